//! Class-public region mining: bidirectional cross-attention between the
//! masked support features and the query features, along positions and along
//! channels, followed by aggregation into a support prototype.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable weights of both mining branches plus the fixed fusion weight.
#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    /// `[C, C]` bilinear form of the position affinity.
    pub w_p: ParamId,
    pub alpha1: ParamId,
    pub beta1: ParamId,
    /// `[r, r]` bilinear form over pooled spatial descriptors for the channel
    /// affinity, with `r = grid * grid`.
    pub w_c: ParamId,
    pub alpha2: ParamId,
    pub beta2: ParamId,
    pub grid: usize,
    pub lambda_fuse: f64,
}

impl FusionWeights {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, channels: usize, grid: usize, lambda_fuse: f64) -> Self {
        let r = grid * grid;
        Self {
            w_p: store.add("cprm.w_p", &[channels, channels], Init::Identity(1.0 / (channels as f64).sqrt())),
            alpha1: store.add("cprm.alpha1", &[1], Init::Constant(0.5)),
            beta1: store.add("cprm.beta1", &[1], Init::Constant(0.5)),
            w_c: store.add("cprm.w_c", &[r, r], Init::Identity(1.0 / (r as f64).sqrt())),
            alpha2: store.add("cprm.alpha2", &[1], Init::Constant(0.5)),
            beta2: store.add("cprm.beta2", &[1], Init::Constant(0.5)),
            grid,
            lambda_fuse,
        }
    }
}

/// Shared 1x1 convolution applied to both aggregated maps.
#[derive(Clone, Copy, Debug)]
pub struct Aggregator {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Aggregator {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, channels: usize) -> Self {
        Self {
            weight: store.add("cprm.agg.weight", &[channels, channels, 1, 1], Init::Identity(0.5)),
            bias: store.add("cprm.agg.bias", &[channels], Init::Constant(0.0)),
        }
    }
}

pub struct PositionOutput {
    pub query: Var,
    pub support: Var,
    /// `[hw_q, hw_s]`; rows are query positions, columns support positions.
    pub affinity: Var,
    /// Row-normalized: each query position's attention over support positions.
    pub attn_support: Var,
    /// Column-normalized: each support position's attention over query positions.
    pub attn_query: Var,
}

pub struct ChannelOutput {
    pub query: Var,
    pub support: Var,
    /// `[C, C]`; rows are query channels, columns support channels.
    pub affinity: Var,
}

pub struct AggregateOutput {
    pub query: Var,
    pub support: Var,
    pub prototype: Var,
}

fn check_pair<T: Scalar>(g: &Graph<T>, f_q: Var, f_s: Var) -> Result<(usize, usize, usize)> {
    let (a, b) = (g.shape(f_q), g.shape(f_s));
    if a.len() != 3 || a != b {
        return Err(Error::Shape(format!("query {:?} vs support {:?}", a, b)));
    }
    Ok((a[0], a[1], a[2]))
}

fn finite<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite entries in {what}")))
    }
}

/// Zeroes support features outside the target mask.
pub fn mask_support<T: Scalar>(g: &mut Graph<T>, f_s: Var, mask: Var) -> Result<Var> {
    g.mul_spatial(f_s, mask)
}

/// `L = W_q^T W_P W_s`; `F_q^P = a1 * W_s A_s^T + lambda * W_q` and
/// `F_s^P = b1 * W_q A_q + lambda * W_s`.
pub fn position_mining<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &FusionWeights,
    f_q: Var,
    f_s: Var,
) -> Result<PositionOutput> {
    let (c, h, wd) = check_pair(g, f_q, f_s)?;
    let hw = h * wd;
    let wq = g.reshape(f_q, &[c, hw])?;
    let ws = g.reshape(f_s, &[c, hw])?;
    let w_p = g.param(store, w.w_p);
    let wq_t = g.transpose(wq)?;
    let left = g.matmul(wq_t, w_p)?;
    let affinity = g.matmul(left, ws)?;
    finite(g, affinity, "position affinity")?;

    let attn_support = g.softmax_rows(affinity)?;
    let attn_query = g.softmax_cols(affinity)?;
    let lam = T::of(w.lambda_fuse);

    let a_s_t = g.transpose(attn_support)?;
    let q_att = g.matmul(ws, a_s_t)?;
    let alpha1 = g.param(store, w.alpha1);
    let q_att = g.scale_by(q_att, alpha1)?;
    let q_res = g.scale(wq, lam);
    let q = g.add(q_att, q_res)?;

    let s_att = g.matmul(wq, attn_query)?;
    let beta1 = g.param(store, w.beta1);
    let s_att = g.scale_by(s_att, beta1)?;
    let s_res = g.scale(ws, lam);
    let s = g.add(s_att, s_res)?;

    Ok(PositionOutput {
        query: g.reshape(q, &[c, h, wd])?,
        support: g.reshape(s, &[c, h, wd])?,
        affinity,
        attn_support,
        attn_query,
    })
}

/// Adaptive average pooling of an `h x w` grid onto `grid x grid` bins, as a
/// constant `[h*w, grid*grid]` matrix.
pub fn pooling_matrix<T: Scalar>(h: usize, w: usize, grid: usize) -> Tensor<T> {
    let r = grid * grid;
    let mut m = Tensor::zeros(&[h * w, r]);
    let bins = |n: usize, i: usize| (i * n / grid, ((i + 1) * n).div_ceil(grid).max(i * n / grid + 1));
    for by in 0..grid {
        let (y0, y1) = bins(h, by);
        for bx in 0..grid {
            let (x0, x1) = bins(w, bx);
            let k = T::of(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
            for y in y0..y1 {
                for x in x0..x1 {
                    m.data_mut()[(y * w + x) * r + by * grid + bx] = k;
                }
            }
        }
    }
    m
}

/// Channel counterpart of [`position_mining`]: the affinity is `[C, C]` over
/// channel descriptors, `L_C = (W_q P) W_C (W_s P)^T` with `P` the fixed
/// pooling matrix.
pub fn channel_mining<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &FusionWeights,
    f_q: Var,
    f_s: Var,
) -> Result<ChannelOutput> {
    let (c, h, wd) = check_pair(g, f_q, f_s)?;
    let hw = h * wd;
    let wq = g.reshape(f_q, &[c, hw])?;
    let ws = g.reshape(f_s, &[c, hw])?;
    let pool = g.constant(pooling_matrix(h, wd, w.grid));
    let dq = g.matmul(wq, pool)?;
    let ds = g.matmul(ws, pool)?;
    let w_c = g.param(store, w.w_c);
    let left = g.matmul(dq, w_c)?;
    let ds_t = g.transpose(ds)?;
    let affinity = g.matmul(left, ds_t)?;
    finite(g, affinity, "channel affinity")?;

    let attn_support = g.softmax_rows(affinity)?;
    let attn_query = g.softmax_cols(affinity)?;
    let lam = T::of(w.lambda_fuse);

    let q_att = g.matmul(attn_support, ws)?;
    let alpha2 = g.param(store, w.alpha2);
    let q_att = g.scale_by(q_att, alpha2)?;
    let q_res = g.scale(wq, lam);
    let q = g.add(q_att, q_res)?;

    let a_q_t = g.transpose(attn_query)?;
    let s_att = g.matmul(a_q_t, wq)?;
    let beta2 = g.param(store, w.beta2);
    let s_att = g.scale_by(s_att, beta2)?;
    let s_res = g.scale(ws, lam);
    let s = g.add(s_att, s_res)?;

    Ok(ChannelOutput {
        query: g.reshape(q, &[c, h, wd])?,
        support: g.reshape(s, &[c, h, wd])?,
        affinity,
    })
}

/// Sums the position and channel variants, applies the shared 1x1 conv and
/// pools the support map under `mask` into the support prototype.
#[allow(clippy::too_many_arguments)]
pub fn aggregate<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    agg: &Aggregator,
    q_pos: Var,
    q_chan: Var,
    s_pos: Var,
    s_chan: Var,
    mask: &[T],
) -> Result<AggregateOutput> {
    let wt = g.param(store, agg.weight);
    let bs = g.param(store, agg.bias);
    let q_sum = g.add(q_pos, q_chan)?;
    let s_sum = g.add(s_pos, s_chan)?;
    let query = g.conv2d(q_sum, wt, Some(bs), 1)?;
    let support = g.conv2d(s_sum, wt, Some(bs), 1)?;
    let prototype = g.masked_mean(support, mask)?;
    Ok(AggregateOutput {
        query,
        support,
        prototype,
    })
}

/// Mean of each affinity row (one per query position), min-max normalized to
/// `[0, 1]` and shaped `[h, w]`; a constant map becomes all 0.5.
pub fn positional_activation_map<T: Scalar>(g: &mut Graph<T>, affinity: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(affinity).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::Shape(format!("affinity {:?} for a {h}x{w} query", s)));
    }
    let avg = g.constant(Tensor::full(&[s[1], 1], T::one() / T::of(s[1] as f64)));
    let means = g.matmul(affinity, avg)?;
    let m = g.minmax_normalize(means);
    g.reshape(m, &[h, w])
}
