//! Class-specific region mining: split the initial prediction into confident
//! foreground, confident background and confusion regions, mine the confusion
//! region iteratively, and predict with cosine similarity to the mined
//! prototypes. The module has no learnable parameters.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrmConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub step_mu1: f64,
    pub step_mu2: f64,
    pub cpm_iters: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
}

impl Default for CsrmConfig {
    fn default() -> Self {
        Self {
            mu1: 0.7,
            mu2: 0.6,
            step_mu1: 0.05,
            step_mu2: 0.02,
            cpm_iters: 3,
            gamma1: 0.9,
            gamma2: 0.1,
            tau: 10.0,
        }
    }
}

impl CsrmConfig {
    /// Thresholds used by CPM iteration `t` (1-based).
    pub fn thresholds(&self, t: usize) -> (f64, f64) {
        let k = t.saturating_sub(1) as f64;
        (self.mu1 - k * self.step_mu1, self.mu2 - k * self.step_mu2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub fg: Vec<bool>,
    pub bg: Vec<bool>,
    pub confusion: Vec<bool>,
}

/// Partitions a `[2, h, w]` probability map (channel 0 background, 1
/// foreground) by `p_f >= mu1` and `p_b >= mu2`. A pixel passing both tests
/// (only possible when `mu1 + mu2 < 1`) is assigned to the foreground.
pub fn filter_regions<T: Scalar>(probs: &Tensor<T>, mu1: f64, mu2: f64) -> Result<RegionPartition> {
    let (p_b, p_f) = split_channels(probs)?;
    Ok(partition(p_f, p_b, mu1, mu2, None))
}

fn split_channels<T: Scalar>(probs: &Tensor<T>) -> Result<(&[T], &[T])> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Shape(format!("expected a [2, h, w] prediction, got {:?}", s)));
    }
    Ok(probs.data().split_at(s[1] * s[2]))
}

fn partition<T: Scalar>(p_f: &[T], p_b: &[T], mu1: f64, mu2: f64, within: Option<&[bool]>) -> RegionPartition {
    let n = p_f.len();
    let mut out = RegionPartition {
        fg: vec![false; n],
        bg: vec![false; n],
        confusion: vec![false; n],
    };
    let (t1, t2) = (T::of(mu1), T::of(mu2));
    for i in 0..n {
        if within.is_some_and(|m| !m[i]) {
            continue;
        }
        if p_f[i] >= t1 {
            out.fg[i] = true;
        } else if p_b[i] >= t2 {
            out.bg[i] = true;
        } else {
            out.confusion[i] = true;
        }
    }
    out
}

/// Per-pixel cosine similarity of a `[C, h, w]` map to `p`, zero where either
/// norm vanishes.
pub fn cosine_map<T: Scalar>(f: &Tensor<T>, p: &[T]) -> Vec<T> {
    let (c, hw) = (f.dim(0), f.len() / f.dim(0));
    let pn = p.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut dot = vec![T::zero(); hw];
    let mut nrm = vec![T::zero(); hw];
    for ch in 0..c {
        for (i, &v) in f.data()[ch * hw..(ch + 1) * hw].iter().enumerate() {
            dot[i] += v * p[ch];
            nrm[i] += v * v;
        }
    }
    dot.iter()
        .zip(&nrm)
        .map(|(&d, &n)| {
            let den = n.sqrt() * pn;
            if den > T::of(COSINE_EPS) {
                d / den
            } else {
                T::zero()
            }
        })
        .collect()
}

/// `tau * cos(F, p_k)` stacked into `[K, h, w]`.
pub fn cosine_logits<T: Scalar>(g: &mut Graph<T>, f: Var, prototypes: &[Var], tau: f64) -> Result<Var> {
    if prototypes.len() < 2 {
        return Err(Error::Shape(format!(
            "cosine prediction needs at least two prototypes, got {}",
            prototypes.len()
        )));
    }
    let s = g.shape(f).to_vec();
    let mut maps = Vec::with_capacity(prototypes.len());
    for &p in prototypes {
        let c = g.cosine(f, p)?;
        let c = g.scale(c, T::of(tau));
        maps.push(g.reshape(c, &[1, s[1], s[2]])?);
    }
    g.concat(&maps)
}

/// Softmax over the prototype axis of [`cosine_logits`].
pub fn cosine_predict<T: Scalar>(g: &mut Graph<T>, f: Var, prototypes: &[Var], tau: f64) -> Result<Var> {
    let l = cosine_logits(g, f, prototypes, tau)?;
    g.softmax_channels(l)
}

/// Final two-channel logits, background first to match the decoder layout.
pub fn final_logits<T: Scalar>(g: &mut Graph<T>, f: Var, fg: Var, bg: Var, tau: f64) -> Result<Var> {
    cosine_logits(g, f, &[bg, fg], tau)
}

/// `gamma1 * refined + gamma2 * filtered`.
pub fn merge_prototypes<T: Scalar>(g: &mut Graph<T>, refined: Var, filtered: Var, gamma1: f64, gamma2: f64) -> Result<Var> {
    let a = g.scale(refined, T::of(gamma1));
    let b = g.scale(filtered, T::of(gamma2));
    g.add(a, b)
}

/// The region itself, or the single highest-scoring pixel when it is empty.
pub fn mask_or_peak<T: Scalar>(mask: &[bool], score: &[T]) -> Vec<T> {
    if mask.iter().any(|&m| m) {
        return mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    }
    let mut best = 0;
    for (i, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = i;
        }
    }
    let mut out = vec![T::zero(); mask.len()];
    out[best] = T::one();
    out
}

fn plain_map<T: Scalar>(f: &Tensor<T>, mask: &[T]) -> Vec<T> {
    let (c, hw) = (f.dim(0), mask.len());
    let den: T = mask.iter().copied().sum();
    (0..c)
        .map(|ch| {
            f.data()[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(mask)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                / den
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CpmStep {
    pub thresholds: (f64, f64),
    pub fg: Vec<bool>,
    pub bg: Vec<bool>,
    pub confusion: Vec<bool>,
}

/// Result of confusion mining. `fg_weights` / `bg_weights` are the pooling
/// masks of the final prototypes (accumulated regions, or the peak-pixel
/// fallback), so the prototypes can be recomputed inside a graph.
#[derive(Clone, Debug)]
pub struct CpmResult<T> {
    pub fg_proto: Vec<T>,
    pub bg_proto: Vec<T>,
    pub fg_weights: Vec<T>,
    pub bg_weights: Vec<T>,
    pub steps: Vec<CpmStep>,
}

/// Iteratively re-partitions the confusion region using cosine predictions
/// from the current prototypes, growing the foreground and background masks.
/// `probs` is the initial prediction used for the empty-region fallback.
pub fn confusion_mining<T: Scalar>(
    f: &Tensor<T>,
    probs: &Tensor<T>,
    start: &RegionPartition,
    cfg: &CsrmConfig,
) -> Result<CpmResult<T>> {
    let (p_b, p_f) = split_channels(probs)?;
    let hw = p_f.len();
    if f.shape().len() != 3 || f.dim(1) * f.dim(2) != hw {
        return Err(Error::Shape(format!("features {:?} vs {hw} prediction pixels", f.shape())));
    }
    let mut fg = start.fg.clone();
    let mut bg = start.bg.clone();
    let mut confusion = start.confusion.clone();
    let mut fg_w = mask_or_peak(&fg, p_f);
    let mut bg_w = mask_or_peak(&bg, p_b);
    let mut steps = Vec::new();
    for t in 1..=cfg.cpm_iters {
        if !confusion.iter().any(|&c| c) {
            break;
        }
        let pf = plain_map(f, &fg_w);
        let pb = plain_map(f, &bg_w);
        let tau = T::of(cfg.tau);
        let cf = cosine_map(f, &pf);
        let cb = cosine_map(f, &pb);
        // two-way softmax: p_f = 1 / (1 + exp(tau * (cb - cf)))
        let yf: Vec<T> = cf
            .iter()
            .zip(&cb)
            .map(|(&a, &b)| T::one() / (T::one() + (tau * (b - a)).exp()))
            .collect();
        let yb: Vec<T> = yf.iter().map(|&v| T::one() - v).collect();
        let (m1, m2) = cfg.thresholds(t);
        let part = partition(&yf, &yb, m1, m2, Some(&confusion));
        for i in 0..hw {
            fg[i] |= part.fg[i];
            bg[i] |= part.bg[i];
        }
        confusion = part.confusion;
        fg_w = mask_or_peak(&fg, p_f);
        bg_w = mask_or_peak(&bg, p_b);
        steps.push(CpmStep {
            thresholds: (m1, m2),
            fg: fg.clone(),
            bg: bg.clone(),
            confusion: confusion.clone(),
        });
    }
    Ok(CpmResult {
        fg_proto: plain_map(f, &fg_w),
        bg_proto: plain_map(f, &bg_w),
        fg_weights: fg_w,
        bg_weights: bg_w,
        steps,
    })
}

/// Prototypes of one CSRM pass, as graph values.
pub struct CsrmPrototypes {
    pub fg: Var,
    pub bg: Var,
}

/// Runs the full CSRM on query features `f` (a graph value) given the detached
/// initial prediction at feature resolution, and returns the merged
/// prototypes. Only the final pooling steps are differentiated.
pub fn mine_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    probs: &Tensor<T>,
    cfg: &CsrmConfig,
) -> Result<CsrmPrototypes> {
    let start = filter_regions(probs, cfg.mu1, cfg.mu2)?;
    let (p_b, p_f) = split_channels(probs)?;
    let fv = g.value(f).clone();
    let cpm = confusion_mining(&fv, probs, &start, cfg)?;
    let filt_fg_w = mask_or_peak(&start.fg, p_f);
    let filt_bg_w = mask_or_peak(&start.bg, p_b);
    let filt_fg = g.masked_mean(f, &filt_fg_w)?;
    let filt_bg = g.masked_mean(f, &filt_bg_w)?;
    let ref_fg = g.masked_mean(f, &cpm.fg_weights)?;
    let ref_bg = g.masked_mean(f, &cpm.bg_weights)?;
    Ok(CsrmPrototypes {
        fg: merge_prototypes(g, ref_fg, filt_fg, cfg.gamma1, cfg.gamma2)?,
        bg: merge_prototypes(g, ref_bg, filt_bg, cfg.gamma1, cfg.gamma2)?,
    })
}
