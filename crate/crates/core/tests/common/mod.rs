//! Helpers shared by the integration suites: plain scalar-loop reference
//! implementations, finite-difference gradient checks and corpus fixtures.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use dmnet::autograd::{Graph, Var};
use dmnet::config::Config;
use dmnet::cprm::{self, FusionWeights};
use dmnet::csrm::{self, CsrmConfig, RegionPartition};
use dmnet::data::{generate_synthetic_dataset, synthetic_fold_file, SyntheticDatasetSpec};
use dmnet::features::FeatureBundle;
use dmnet::kshot;
use dmnet::params::{ParamId, ParamStore};
use dmnet::pipeline::{DmNet, EpisodeFeatures, ImageFeatures, ModelSpec};
use dmnet::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// reference implementations, indexed as [c][i] with i = y * w + x

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor64) -> Mat {
    let c = t.dim(0);
    let n = t.len() / c;
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub struct MiningRef {
    pub query: Vec<f64>,
    pub support: Vec<f64>,
    pub affinity: Vec<f64>,
}

/// Position mining with explicit loops.
pub fn position_ref(fq: &Tensor64, fs: &Tensor64, wp: &Tensor64, a1: f64, b1: f64, lam: f64) -> MiningRef {
    let (q, s) = (rows(fq), rows(fs));
    let (c, n) = (q.len(), q[0].len());
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for a in 0..c {
                for b in 0..c {
                    l[i][j] += q[a][i] * wp.at2(a, b) * s[b][j];
                }
            }
        }
    }
    let a_s: Mat = l.iter().map(|r| softmax(r)).collect();
    let mut a_q = vec![vec![0.0; n]; n];
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| l[i][j]).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            a_q[i][j] = v;
        }
    }
    let mut oq = vec![vec![0.0; n]; c];
    let mut os = vec![vec![0.0; n]; c];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += s[ch][j] * a_s[i][j];
            }
            oq[ch][i] = a1 * acc + lam * q[ch][i];
        }
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += q[ch][i] * a_q[i][j];
            }
            os[ch][j] = b1 * acc + lam * s[ch][j];
        }
    }
    MiningRef {
        query: flat(&oq),
        support: flat(&os),
        affinity: flat(&l),
    }
}

/// Mean of every `grid x grid` bin; `h` and `w` must be multiples of `grid`.
fn pooled(f: &Mat, h: usize, w: usize, grid: usize) -> Mat {
    let (bh, bw) = (h / grid, w / grid);
    f.iter()
        .map(|plane| {
            let mut d = Vec::new();
            for by in 0..grid {
                for bx in 0..grid {
                    let mut acc = 0.0;
                    for y in by * bh..(by + 1) * bh {
                        for x in bx * bw..(bx + 1) * bw {
                            acc += plane[y * w + x];
                        }
                    }
                    d.push(acc / (bh * bw) as f64);
                }
            }
            d
        })
        .collect()
}

/// Channel mining with explicit loops over pooled descriptors.
#[allow(clippy::too_many_arguments)]
pub fn channel_ref(
    fq: &Tensor64,
    fs: &Tensor64,
    wc: &Tensor64,
    grid: usize,
    a2: f64,
    b2: f64,
    lam: f64,
) -> MiningRef {
    let (h, w) = (fq.dim(1), fq.dim(2));
    let (q, s) = (rows(fq), rows(fs));
    let (dq, ds) = (pooled(&q, h, w, grid), pooled(&s, h, w, grid));
    let (c, n, r) = (q.len(), q[0].len(), grid * grid);
    let mut l = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            for u in 0..r {
                for v in 0..r {
                    l[a][b] += dq[a][u] * wc.at2(u, v) * ds[b][v];
                }
            }
        }
    }
    let a_s: Mat = l.iter().map(|row| softmax(row)).collect();
    let mut a_q = vec![vec![0.0; c]; c];
    for b in 0..c {
        let col: Vec<f64> = (0..c).map(|a| l[a][b]).collect();
        for (a, v) in softmax(&col).into_iter().enumerate() {
            a_q[a][b] = v;
        }
    }
    let mut oq = vec![vec![0.0; n]; c];
    let mut os = vec![vec![0.0; n]; c];
    for i in 0..n {
        for a in 0..c {
            let acc: f64 = (0..c).map(|b| a_s[a][b] * s[b][i]).sum();
            oq[a][i] = a2 * acc + lam * q[a][i];
        }
        for b in 0..c {
            let acc: f64 = (0..c).map(|a| a_q[a][b] * q[a][i]).sum();
            os[b][i] = b2 * acc + lam * s[b][i];
        }
    }
    MiningRef {
        query: flat(&oq),
        support: flat(&os),
        affinity: flat(&l),
    }
}

fn cos(f: &Mat, i: usize, p: &[f64]) -> f64 {
    let (mut d, mut nf, mut np) = (0.0, 0.0, 0.0);
    for (ch, &pc) in p.iter().enumerate() {
        d += f[ch][i] * pc;
        nf += f[ch][i] * f[ch][i];
        np += pc * pc;
    }
    let den = (nf * np).sqrt();
    if den > 1e-12 {
        d / den
    } else {
        0.0
    }
}

fn region_mean(f: &Mat, mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    f.iter()
        .map(|plane| plane.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n)
        .collect()
}

fn region_or_peak(mask: &[bool], score: &[f64]) -> Vec<bool> {
    if mask.iter().any(|&m| m) {
        return mask.to_vec();
    }
    let mut best = 0;
    for i in 1..score.len() {
        if score[i] > score[best] {
            best = i;
        }
    }
    (0..mask.len()).map(|i| i == best).collect()
}

pub struct CpmRef {
    pub fg_proto: Vec<f64>,
    pub bg_proto: Vec<f64>,
    /// `(fg, bg, confusion)` after each executed iteration.
    pub steps: Vec<(Vec<bool>, Vec<bool>, Vec<bool>)>,
}

/// Confusion mining with explicit loops. `probs` is `[2, h, w]`, background
/// first.
pub fn cpm_ref(f: &Tensor64, probs: &Tensor64, cfg: &CsrmConfig) -> CpmRef {
    let fm = rows(f);
    let n = fm[0].len();
    let (pb, pf) = probs.data().split_at(n);
    let mut fg: Vec<bool> = (0..n).map(|i| pf[i] >= cfg.mu1).collect();
    let mut bg: Vec<bool> = (0..n).map(|i| !fg[i] && pb[i] >= cfg.mu2).collect();
    let mut confusion: Vec<bool> = (0..n).map(|i| !fg[i] && !bg[i]).collect();
    let mut steps = Vec::new();
    for t in 1..=cfg.cpm_iters {
        if !confusion.iter().any(|&c| c) {
            break;
        }
        let mu1 = cfg.mu1 - (t - 1) as f64 * cfg.step_mu1;
        let mu2 = cfg.mu2 - (t - 1) as f64 * cfg.step_mu2;
        let p_f = region_mean(&fm, &region_or_peak(&fg, pf));
        let p_b = region_mean(&fm, &region_or_peak(&bg, pb));
        let mut still = vec![false; n];
        for i in 0..n {
            if !confusion[i] {
                continue;
            }
            let (ef, eb) = ((cfg.tau * cos(&fm, i, &p_f)).exp(), (cfg.tau * cos(&fm, i, &p_b)).exp());
            let yf = ef / (ef + eb);
            if yf >= mu1 {
                fg[i] = true;
            } else if 1.0 - yf >= mu2 {
                bg[i] = true;
            } else {
                still[i] = true;
            }
        }
        confusion = still;
        steps.push((fg.clone(), bg.clone(), confusion.clone()));
    }
    CpmRef {
        fg_proto: region_mean(&fm, &region_or_peak(&fg, pf)),
        bg_proto: region_mean(&fm, &region_or_peak(&bg, pb)),
        steps,
    }
}

/// `softmax_k(tau * cos(F_i, p_k))`, as `[K, h*w]` flattened.
pub fn cosine_predict_ref(f: &Tensor64, protos: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let fm = rows(f);
    let n = fm[0].len();
    let mut out = vec![0.0; protos.len() * n];
    for i in 0..n {
        let logits: Vec<f64> = protos.iter().map(|p| tau * cos(&fm, i, p)).collect();
        for (k, v) in softmax(&logits).into_iter().enumerate() {
            out[k * n + i] = v;
        }
    }
    out
}

/// K-shot fusion: softmax of affinity means, weighted prototypes, cosine
/// logits `[bg, fg]`.
pub fn kshot_ref(f: &Tensor64, affinities: &[Tensor64], fg: &[Vec<f64>], bg: &[Vec<f64>], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let means: Vec<f64> = affinities.iter().map(|a| a.data().iter().sum::<f64>() / a.len() as f64).collect();
    let phi = softmax(&means);
    let c = fg[0].len();
    let mix = |ps: &[Vec<f64>]| -> Vec<f64> { (0..c).map(|ch| ps.iter().zip(&phi).map(|(p, w)| w * p[ch]).sum()).collect() };
    let (pf, pb) = (mix(fg), mix(bg));
    let fm = rows(f);
    let n = fm[0].len();
    let mut logits = vec![0.0; 2 * n];
    for i in 0..n {
        logits[i] = tau * cos(&fm, i, &pb);
        logits[n + i] = tau * cos(&fm, i, &pf);
    }
    (phi, logits)
}

// ---------------------------------------------------------------------------
// checks against the library, each returning the largest absolute deviation

pub fn set_param(store: &mut ParamStore<f64>, id: ParamId, t: Tensor64) {
    *store.get_mut(id) = t;
}

pub fn scalar(v: f64) -> Tensor64 {
    Tensor64::new(&[1], vec![v]).unwrap()
}

pub fn random_fusion(r: &mut ChaCha8Rng, c: usize, grid: usize, lambda: f64) -> (ParamStore<f64>, FusionWeights) {
    let mut store = ParamStore::new(0);
    let fw = FusionWeights::register(&mut store, c, grid, lambda);
    set_param(&mut store, fw.w_p, random_tensor(&[c, c], r));
    set_param(&mut store, fw.w_c, random_tensor(&[grid * grid, grid * grid], r));
    for id in [fw.alpha1, fw.beta1, fw.alpha2, fw.beta2] {
        set_param(&mut store, id, scalar(r.gen_range(-1.0..1.0)));
    }
    (store, fw)
}

pub fn check_position(seed: u64, c: usize, h: usize, w: usize) -> f64 {
    let mut r = rng(seed);
    let (store, fw) = random_fusion(&mut r, c, 2, 0.5);
    let (fq, fs) = (random_tensor(&[c, h, w], &mut r), random_tensor(&[c, h, w], &mut r));
    let mut g = Graph::new();
    let (q, s) = (g.constant(fq.clone()), g.constant(fs.clone()));
    let out = cprm::position_mining(&mut g, &store, &fw, q, s).unwrap();
    let p = |id: ParamId| store.get(id).data()[0];
    let want = position_ref(&fq, &fs, store.get(fw.w_p), p(fw.alpha1), p(fw.beta1), 0.5);
    max_diff(g.value(out.query).data(), &want.query)
        .max(max_diff(g.value(out.support).data(), &want.support))
        .max(max_diff(g.value(out.affinity).data(), &want.affinity))
}

pub fn check_channel(seed: u64, c: usize, side: usize, grid: usize) -> f64 {
    let mut r = rng(seed);
    let (store, fw) = random_fusion(&mut r, c, grid, 0.5);
    let (fq, fs) = (random_tensor(&[c, side, side], &mut r), random_tensor(&[c, side, side], &mut r));
    let mut g = Graph::new();
    let (q, s) = (g.constant(fq.clone()), g.constant(fs.clone()));
    let out = cprm::channel_mining(&mut g, &store, &fw, q, s).unwrap();
    let p = |id: ParamId| store.get(id).data()[0];
    let want = channel_ref(&fq, &fs, store.get(fw.w_c), grid, p(fw.alpha2), p(fw.beta2), 0.5);
    max_diff(g.value(out.query).data(), &want.query)
        .max(max_diff(g.value(out.support).data(), &want.support))
        .max(max_diff(g.value(out.affinity).data(), &want.affinity))
}

/// A `[2, h, w]` prediction with a uniform random foreground channel.
pub fn random_probs(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor64 {
    let pf: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
    let mut d: Vec<f64> = pf.iter().map(|p| 1.0 - p).collect();
    d.extend(pf);
    Tensor64::new(&[2, h, w], d).unwrap()
}

pub fn check_cpm(seed: u64, c: usize, h: usize, w: usize) -> f64 {
    let mut r = rng(seed);
    let f = random_tensor(&[c, h, w], &mut r);
    let probs = random_probs(&mut r, h, w);
    let cfg = CsrmConfig::default();
    let start = csrm::filter_regions(&probs, cfg.mu1, cfg.mu2).unwrap();
    let got = csrm::confusion_mining(&f, &probs, &start, &cfg).unwrap();
    let want = cpm_ref(&f, &probs, &cfg);
    assert_eq!(got.steps.len(), want.steps.len(), "seed {seed}: iteration count");
    for (a, b) in got.steps.iter().zip(&want.steps) {
        assert_eq!((&a.fg, &a.bg, &a.confusion), (&b.0, &b.1, &b.2), "seed {seed}: step masks");
    }
    max_diff(&got.fg_proto, &want.fg_proto).max(max_diff(&got.bg_proto, &want.bg_proto))
}

pub fn check_merge(seed: u64, c: usize) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (random_tensor(&[c], &mut r), random_tensor(&[c], &mut r));
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let m = csrm::merge_prototypes(&mut g, va, vb, 0.9, 0.1).unwrap();
    let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 0.9 * x + 0.1 * y).collect();
    max_diff(g.value(m).data(), &want)
}

pub fn check_cosine(seed: u64, c: usize, h: usize, w: usize, k: usize) -> f64 {
    let mut r = rng(seed);
    let f = random_tensor(&[c, h, w], &mut r);
    let protos: Vec<Vec<f64>> = (0..k).map(|_| random_tensor(&[c], &mut r).into_data()).collect();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let pv: Vec<Var> = protos.iter().map(|p| g.constant(Tensor64::new(&[c], p.clone()).unwrap())).collect();
    let out = csrm::cosine_predict(&mut g, fv, &pv, 10.0).unwrap();
    max_diff(g.value(out).data(), &cosine_predict_ref(&f, &protos, 10.0))
}

pub fn check_kshot(seed: u64, c: usize, h: usize, w: usize, k: usize) -> f64 {
    let mut r = rng(seed);
    let f = random_tensor(&[c, h, w], &mut r);
    let affs: Vec<Tensor64> = (0..k).map(|_| random_tensor(&[h * w, h * w], &mut r)).collect();
    let fg: Vec<Vec<f64>> = (0..k).map(|_| random_tensor(&[c], &mut r).into_data()).collect();
    let bg: Vec<Vec<f64>> = (0..k).map(|_| random_tensor(&[c], &mut r).into_data()).collect();
    let phi = kshot::appearance_factors(&affs).unwrap();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let mut vars = |ps: &[Vec<f64>]| -> Vec<Var> { ps.iter().map(|p| g.constant(Tensor64::new(&[c], p.clone()).unwrap())).collect() };
    let (fgv, bgv) = (vars(&fg), vars(&bg));
    let logits = kshot::fused_logits(&mut g, fv, &fgv, &bgv, &phi, 10.0).unwrap();
    let (phi_ref, logits_ref) = kshot_ref(&f, &affs, &fg, &bg, 10.0);
    max_diff(&phi, &phi_ref).max(max_diff(g.value(logits).data(), &logits_ref))
}

/// Every oracle comparison at a few seeds and sizes up to 4x4x4; returns the
/// worst deviation per component.
pub fn oracle_suite() -> Vec<(&'static str, f64)> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..8).map(f).fold(0.0, f64::max);
    vec![
        ("position mining", worst(&|s| check_position(s, 1 + s as usize % 4, 1 + (s as usize / 2) % 4, 4))),
        ("channel mining", worst(&|s| check_channel(s, 1 + s as usize % 4, 4, if s % 2 == 0 { 2 } else { 4 }))),
        ("confusion mining", worst(&|s| check_cpm(s, 1 + s as usize % 4, 4, 4))),
        ("prototype merge", worst(&|s| check_merge(s, 4))),
        ("cosine prediction", worst(&|s| check_cosine(s, 1 + s as usize % 4, 3, 4, 2 + s as usize % 3))),
        ("k-shot fusion", worst(&|s| check_kshot(s, 4, 2, 2, 1 + s as usize % 5))),
    ]
}

// ---------------------------------------------------------------------------
// gradient checks

/// Moves every zero-initialized bias off zero. With zero biases, pixels whose
/// input is all zero sit exactly on a ReLU kink, where a central difference
/// sees half a slope.
pub fn jitter_biases(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
}

/// `||a - n|| / max(||a|| + ||n||, 1e-12)` between the analytic gradient of
/// every listed parameter and its central finite difference.
pub fn gradient_error(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    loss: &mut dyn FnMut(&ParamStore<f64>, bool) -> (f64, Vec<(ParamId, Tensor64)>),
) -> Vec<(String, f64)> {
    const H: f64 = 1e-6;
    let (_, grads) = loss(store, true);
    ids.iter()
        .map(|&id| {
            let analytic = grads
                .iter()
                .find(|(g, _)| *g == id)
                .map(|(_, t)| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
            let mut numeric = vec![0.0; analytic.len()];
            for (k, num) in numeric.iter_mut().enumerate() {
                let x = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = x + H;
                let up = loss(store, false).0;
                store.get_mut(id).data_mut()[k] = x - H;
                let down = loss(store, false).0;
                store.get_mut(id).data_mut()[k] = x;
                *num = (up - down) / (2.0 * H);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12);
            (store.name(id).to_string(), rel)
        })
        .collect()
}

/// A tiny full model with every component switched on, in `f64`.
pub fn tiny_spec(c: usize) -> ModelSpec {
    ModelSpec {
        mid_channels: 3,
        high_channels: 4,
        reduce_dim: c,
        channel_grid: 2,
        lambda_fuse: 0.5,
        use_cprm: true,
        use_csrm: true,
        use_kms: true,
        csrm: CsrmConfig::default(),
        rho: 0.5,
        known_classes: vec![1, 2],
    }
}

/// Random features for a `side x side` feature grid at stride 2, with a
/// rectangular mask for query and support.
pub fn tiny_episode(seed: u64, side: usize, shots: usize, class: u8) -> (EpisodeFeatures<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let (hh, ww) = (2 * side, 2 * side);
    let image = |r: &mut ChaCha8Rng| {
        let bundle = FeatureBundle {
            mid: random_tensor(&[3, side, side], r).map(f64::abs),
            high: random_tensor(&[4, side, side], r).map(f64::abs),
            stride: 2,
        };
        let (y0, x0) = (r.gen_range(0..hh / 2), r.gen_range(0..ww / 2));
        let mask: Vec<bool> = (0..hh * ww)
            .map(|i| {
                let (y, x) = (i / ww, i % ww);
                y >= y0 && y < y0 + hh / 2 && x >= x0 && x < x0 + ww / 2
            })
            .collect();
        (ImageFeatures::new(Arc::new(bundle), &mask, hh, ww), mask)
    };
    let (query, qmask) = image(&mut r);
    let support = (0..shots).map(|_| image(&mut r).0).collect();
    let target = qmask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    (
        EpisodeFeatures {
            target_class: class,
            query,
            support,
        },
        target,
    )
}

/// Analytic vs numeric gradients of the full training loss for the mining
/// weights and every decoder tensor.
pub fn model_gradient_suite() -> Vec<(String, f64)> {
    let spec = tiny_spec(3);
    let mut model = DmNet::<f64>::new(spec, 5);
    let (ep, target) = tiny_episode(11, 4, 1, 1);
    // populate the memory once so the meta-activation map is non-trivial and
    // stays fixed across the perturbed evaluations
    model.update_memory(&ep).unwrap();
    let (ep2, _) = tiny_episode(12, 4, 1, 2);
    model.update_memory(&ep2).unwrap();
    let ids: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&id| {
            let n = model.params.name(id);
            matches!(n, "cprm.alpha1" | "cprm.beta1" | "cprm.w_p") || n.starts_with("decoder.")
        })
        .collect();
    jitter_biases(&mut model.params, &mut rng(13));
    let mut store = model.params.clone();
    let mut loss = |p: &ParamStore<f64>, want_grads: bool| {
        let mut m = model.clone();
        m.params = p.clone();
        let mut g = Graph::new();
        let fwd = m.forward(&mut g, &ep, dmnet::pipeline::Mode::Train).unwrap();
        let l = m.loss(&mut g, &fwd, &ep, &target, 1.0).unwrap();
        let v = g.value(l).data()[0];
        let grads = if want_grads {
            let gr = g.backward(l).unwrap();
            g.param_grads(&gr)
        } else {
            Vec::new()
        };
        (v, grads)
    };
    gradient_error(&mut store, &ids, &mut loss)
}

// ---------------------------------------------------------------------------
// corpus fixtures

/// Generates the default synthetic corpus under `dir` and returns a config
/// pointing at it, sized for the desk-scale runs.
pub fn synthetic_config(dir: &Path, n_images: usize, image_size: usize) -> Config {
    let spec = SyntheticDatasetSpec {
        n_images,
        image_size,
        ..SyntheticDatasetSpec::default()
    };
    let root = dir.join("synthetic");
    if !root.join("metadata.json").exists() {
        generate_synthetic_dataset(&spec, &root).unwrap();
        std::fs::write(root.join("folds.toml"), synthetic_fold_file(&spec, 2)).unwrap();
    }
    let mut cfg = Config::default();
    cfg.data.root = root.clone();
    cfg.data.fold_file = root.join("folds.toml");
    cfg.data.n_images = n_images;
    cfg.data.image_size = image_size;
    cfg.model.reduce_dim = 32;
    cfg
}

/// Structural check of a partition: disjoint, and covering every pixel.
pub fn partition_ok(p: &RegionPartition) -> bool {
    (0..p.fg.len()).all(|i| [p.fg[i], p.bg[i], p.confusion[i]].iter().filter(|&&b| b).count() == 1)
}
