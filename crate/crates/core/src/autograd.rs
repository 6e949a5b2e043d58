//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the tape is a valid topological
//! order for backpropagation. Leaves created with [`Graph::constant`] never
//! receive gradients; leaves created with [`Graph::param`] are tracked by their
//! index in the owning [`ParamStore`](crate::params::ParamStore).

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul, softmax_rows_in_place, transpose, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Bilinear interpolation taps along one axis (`align_corners` semantics).
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = if dst > 1 && src > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Expand(Var),
    MulSpatial(Var, Var),
    MaskedMean {
        input: Var,
        mask: Vec<T>,
        denom: T,
    },
    Cosine(Var, Var),
    Upsample {
        input: Var,
        ys: Taps,
        xs: Taps,
    },
    Bce {
        probs: Var,
        target: Vec<T>,
        eps: T,
    },
    SumAll(Var),
    MinMax {
        input: Var,
        argmin: usize,
        argmax: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-pixel cosine similarity and the norms needed to differentiate it.
fn cosine_parts<T: Scalar>(f: &[T], p: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>, T) {
    let pn = p.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut cos = vec![T::zero(); hw];
    let mut fnorm = vec![T::zero(); hw];
    let mut dot = vec![T::zero(); hw];
    for ch in 0..c {
        let pc = p[ch];
        let row = &f[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            dot[i] += row[i] * pc;
            fnorm[i] += row[i] * row[i];
        }
    }
    for i in 0..hw {
        fnorm[i] = fnorm[i].sqrt();
        let den = fnorm[i] * pn;
        if den > T::of(COSINE_EPS) {
            cos[i] = dot[i] / den;
        }
    }
    (cos, fnorm, pn)
}

/// Denominator below which a cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id).clone();
        self.push(t, Op::Param(id), true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o -= x;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Multiplies `a` by the single element held in `k`.
    pub fn scale_by(&mut self, a: Var, k: Var) -> Result<Var> {
        if self.value(k).len() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a scalar, got {:?}",
                self.shape(k)
            )));
        }
        let kv = self.value(k).data()[0];
        let out = self.value(a).map(|v| v * kv);
        let ng = self.ng(a) || self.ng(k);
        Ok(self.push(out, Op::ScaleBy(a, k), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose(self.value(a).data(), r, c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[c, r], data)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Softmax along the last axis of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_rows of {:?}", s)));
        }
        let mut out = self.value(a).clone();
        softmax_rows_in_place(out.data_mut(), s[1]);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Softmax along the first axis of a 2-d tensor.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.transpose(a)?;
        let sm = self.softmax_rows(t)?;
        self.transpose(sm)
    }

    /// Softmax over the channel axis of a `[C, h, w]` map.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("softmax_channels of {:?}", s)));
        }
        let flat = self.reshape(a, &[s[0], s[1] * s[2]])?;
        let sm = self.softmax_cols(flat)?;
        self.reshape(sm, &s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Same-padded stride-1 convolution of a `[C_in, h, w]` map with a
    /// `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d input {:?} weight {:?}", si, sw)));
        }
        let geom = ConvGeom {
            c_in: si[0],
            c_out: sw[0],
            h: si[1],
            w: si[2],
            k: sw[2],
            dilation,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let data = conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        let out = Tensor::new(&[geom.c_out, geom.h, geom.w], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat {:?} with trailing {:?}", s, tail)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Broadcasts a `[C]` vector to a `[C, h, w]` map.
    pub fn expand(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::Shape(format!("expand of {:?}", s)));
        }
        let c = s[0];
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(c * h * w);
        for &x in src {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        let ng = self.ng(v);
        Ok(self.push(Tensor::new(&[c, h, w], data)?, Op::Expand(v), ng))
    }

    /// `[C, h, w] * [h, w]` with the second operand broadcast over channels.
    pub fn mul_spatial(&mut self, f: Var, m: Var) -> Result<Var> {
        let sf = self.shape(f);
        let sm = self.shape(m);
        if sf.len() != 3 || sm != [sf[1], sf[2]] {
            return Err(Error::Shape(format!("mul_spatial {:?} by {:?}", sf, sm)));
        }
        let hw = sf[1] * sf[2];
        let mv = self.value(m).data().to_vec();
        let mut out = self.value(f).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            for (o, &k) in plane.iter_mut().zip(&mv) {
                *o *= k;
            }
        }
        let ng = self.ng(f) || self.ng(m);
        Ok(self.push(out, Op::MulSpatial(f, m), ng))
    }

    /// Masked average pooling of a `[C, h, w]` map with a constant `h*w` mask.
    pub fn masked_mean(&mut self, f: Var, mask: &[T]) -> Result<Var> {
        let sf = self.shape(f).to_vec();
        if sf.len() != 3 || mask.len() != sf[1] * sf[2] {
            return Err(Error::Shape(format!(
                "masked_mean {:?} with mask of {}",
                sf,
                mask.len()
            )));
        }
        let denom: T = mask.iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::EmptyMask);
        }
        let hw = sf[1] * sf[2];
        let data: Vec<T> = self
            .value(f)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().zip(mask).map(|(&a, &b)| a * b).sum::<T>() / denom)
            .collect();
        let ng = self.ng(f);
        Ok(self.push(
            Tensor::new(&[sf[0]], data)?,
            Op::MaskedMean {
                input: f,
                mask: mask.to_vec(),
                denom,
            },
            ng,
        ))
    }

    /// Per-pixel cosine similarity between a `[C, h, w]` map and a `[C]`
    /// vector; defined as 0 where either side has zero norm.
    pub fn cosine(&mut self, f: Var, p: Var) -> Result<Var> {
        let sf = self.shape(f).to_vec();
        let sp = self.shape(p);
        if sf.len() != 3 || sp != [sf[0]] {
            return Err(Error::Shape(format!("cosine {:?} with {:?}", sf, sp)));
        }
        let hw = sf[1] * sf[2];
        let (cos, _, _) = cosine_parts(self.value(f).data(), self.value(p).data(), sf[0], hw);
        let ng = self.ng(f) || self.ng(p);
        Ok(self.push(Tensor::new(&[sf[1], sf[2]], cos)?, Op::Cosine(f, p), ng))
    }

    /// Bilinear resize of a `[C, h, w]` map to `[C, out_h, out_w]`.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample of {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ys = Taps::new(h, out_h);
        let xs = Taps::new(w, out_w);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let fy = T::of(ys.frac[oy]);
                let (r0, r1) = (ys.lo[oy] * w, ys.hi[oy] * w);
                for ox in 0..out_w {
                    let fx = T::of(xs.frac[ox]);
                    let (c0, c1) = (xs.lo[ox], xs.hi[ox]);
                    let top = plane[r0 + c0] * (T::one() - fx) + plane[r0 + c1] * fx;
                    let bot = plane[r1 + c0] * (T::one() - fx) + plane[r1 + c1] * fx;
                    data[(ch * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[c, out_h, out_w], data)?,
            Op::Upsample { input: x, ys, xs },
            ng,
        ))
    }

    /// Pixel-mean binary cross-entropy of the foreground channel (index 1) of
    /// a `[2, H, W]` probability map against a `{0,1}` target.
    pub fn bce_foreground(&mut self, probs: Var, target: &[T], eps: T) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 3 || s[0] != 2 || target.len() != s[1] * s[2] {
            return Err(Error::Shape(format!(
                "bce on {:?} with target of {}",
                s,
                target.len()
            )));
        }
        let hw = s[1] * s[2];
        let fg = &self.value(probs).data()[hw..];
        let one = T::one();
        let mut loss = T::zero();
        for (&p, &t) in fg.iter().zip(target) {
            let pc = p.max(eps).min(one - eps);
            loss -= t * pc.ln() + (one - t) * (one - pc).ln();
        }
        loss /= T::of(hw as f64);
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                target: target.to_vec(),
                eps,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::SumAll(a), ng)
    }

    /// `(x - min) / (max - min)` over all entries; a constant (or
    /// non-finite-range) input maps to 0.5 everywhere and passes no gradient.
    pub fn minmax_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (mut lo, mut hi) = (0, 0);
        for (i, &v) in x.data().iter().enumerate() {
            if v < x.data()[lo] {
                lo = i;
            }
            if v > x.data()[hi] {
                hi = i;
            }
        }
        let (min, span) = (x.data()[lo], x.data()[hi] - x.data()[lo]);
        if !(span > T::zero() && span.is_finite()) {
            let out = Tensor::full(x.shape(), T::of(0.5));
            return self.constant(out);
        }
        let out = x.map(|v| (v - min) / span);
        let ng = self.ng(a);
        self.push(
            out,
            Op::MinMax {
                input: a,
                argmin: lo,
                argmax: hi,
            },
            ng,
        )
    }

    /// Backpropagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(g.shape(), d).unwrap());
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accum(grads, *a, g.map(|v| v * k));
            }
            Op::ScaleBy(a, k) => {
                let kv = self.value(*k).data()[0];
                if self.ng(*a) {
                    self.accum(grads, *a, g.map(|v| v * kv));
                }
                if self.ng(*k) {
                    let d: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum();
                    self.accum(grads, *k, Tensor::scalar(d));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if self.ng(*a) {
                    let bt = transpose(vb.data(), k, n);
                    let d = matmul(g.data(), &bt, m, n, k);
                    self.accum(grads, *a, Tensor::new(&[m, k], d).unwrap());
                }
                if self.ng(*b) {
                    let at = transpose(va.data(), m, k);
                    let d = matmul(&at, g.data(), k, m, n);
                    self.accum(grads, *b, Tensor::new(&[k, n], d).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.dim(0), g.dim(1));
                let d = transpose(g.data(), r, c);
                self.accum(grads, *a, Tensor::new(&[c, r], d).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accum(grads, *a, g.clone().reshaped(&shape).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.dim(1);
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(y.shape(), d).unwrap());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *a, Tensor::new(x.shape(), d).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    *geom,
                );
                self.accum(grads, *input, Tensor::new(self.shape(*input), gi).unwrap());
                self.accum(grads, *weight, Tensor::new(self.shape(*weight), gw).unwrap());
                if let Some(b) = bias {
                    self.accum(grads, *b, Tensor::new(&[geom.c_out], gb).unwrap());
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let d = g.data()[off..off + n].to_vec();
                        self.accum(grads, p, Tensor::new(self.shape(p), d).unwrap());
                    }
                    off += n;
                }
            }
            Op::Expand(v) => {
                let c = self.value(*v).len();
                let hw = g.len() / c;
                let d = g.data().chunks(hw).map(|pl| pl.iter().copied().sum()).collect();
                self.accum(grads, *v, Tensor::new(&[c], d).unwrap());
            }
            Op::MulSpatial(f, m) => {
                let vf = self.value(*f);
                let vm = self.value(*m);
                let hw = vm.len();
                if self.ng(*f) {
                    let mut d = g.clone();
                    for plane in d.data_mut().chunks_mut(hw) {
                        for (o, &k) in plane.iter_mut().zip(vm.data()) {
                            *o *= k;
                        }
                    }
                    self.accum(grads, *f, d);
                }
                if self.ng(*m) {
                    let mut d = vec![T::zero(); hw];
                    for (gp, fp) in g.data().chunks(hw).zip(vf.data().chunks(hw)) {
                        for i in 0..hw {
                            d[i] += gp[i] * fp[i];
                        }
                    }
                    self.accum(grads, *m, Tensor::new(vm.shape(), d).unwrap());
                }
            }
            Op::MaskedMean { input, mask, denom } => {
                let shape = self.shape(*input).to_vec();
                let hw = mask.len();
                let mut d = Vec::with_capacity(shape.iter().product());
                for &gc in g.data() {
                    let k = gc / *denom;
                    d.extend(mask.iter().map(|&m| m * k));
                }
                debug_assert_eq!(d.len(), shape[0] * hw);
                self.accum(grads, *input, Tensor::new(&shape, d).unwrap());
            }
            Op::Cosine(f, p) => {
                let vf = self.value(*f);
                let vp = self.value(*p);
                let c = vf.dim(0);
                let hw = vf.len() / c;
                let (cos, fnorm, pn) = cosine_parts(vf.data(), vp.data(), c, hw);
                let eps = T::of(COSINE_EPS);
                let mut gf = vec![T::zero(); vf.len()];
                let mut gp = vec![T::zero(); c];
                for i in 0..hw {
                    let den = fnorm[i] * pn;
                    if den <= eps {
                        continue;
                    }
                    let gi = g.data()[i];
                    let inv = gi / den;
                    let kf = gi * cos[i] / (fnorm[i] * fnorm[i]);
                    let kp = gi * cos[i] / (pn * pn);
                    for ch in 0..c {
                        let fv = vf.data()[ch * hw + i];
                        let pv = vp.data()[ch];
                        gf[ch * hw + i] = inv * pv - kf * fv;
                        gp[ch] += inv * fv - kp * pv;
                    }
                }
                self.accum(grads, *f, Tensor::new(vf.shape(), gf).unwrap());
                self.accum(grads, *p, Tensor::new(&[c], gp).unwrap());
            }
            Op::Upsample { input, ys, xs } => {
                let s = self.shape(*input).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (g.dim(1), g.dim(2));
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        let fy = T::of(ys.frac[oy]);
                        let (r0, r1) = (ys.lo[oy] * w, ys.hi[oy] * w);
                        for ox in 0..ow {
                            let fx = T::of(xs.frac[ox]);
                            let (c0, c1) = (xs.lo[ox], xs.hi[ox]);
                            let gv = g.data()[(ch * oh + oy) * ow + ox];
                            let top = gv * (T::one() - fy);
                            let bot = gv * fy;
                            plane[r0 + c0] += top * (T::one() - fx);
                            plane[r0 + c1] += top * fx;
                            plane[r1 + c0] += bot * (T::one() - fx);
                            plane[r1 + c1] += bot * fx;
                        }
                    }
                }
                self.accum(grads, *input, Tensor::new(&s, d).unwrap());
            }
            Op::Bce { probs, target, eps } => {
                let vp = self.value(*probs);
                let hw = target.len();
                let one = T::one();
                let k = g.data()[0] / T::of(hw as f64);
                let mut d = vec![T::zero(); vp.len()];
                for i in 0..hw {
                    let p = vp.data()[hw + i];
                    if p < *eps || p > one - *eps {
                        continue;
                    }
                    let t = target[i];
                    d[hw + i] = k * (-(t / p) + (one - t) / (one - p));
                }
                self.accum(grads, *probs, Tensor::new(vp.shape(), d).unwrap());
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accum(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MinMax { input, argmin, argmax } => {
                let x = self.value(*input).data();
                let inv = T::one() / (x[*argmax] - x[*argmin]);
                let y = node.value.data();
                let mut d: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let (mut to_min, mut to_max) = (T::zero(), T::zero());
                for (&gv, &yv) in g.data().iter().zip(y) {
                    to_min += gv * (yv - T::one());
                    to_max -= gv * yv;
                }
                d[*argmin] += to_min * inv;
                d[*argmax] += to_max * inv;
                self.accum(grads, *input, Tensor::new(self.shape(*input), d).unwrap());
            }
        }
    }

    /// Gradients of every parameter leaf reached by the backward pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads.by_node[i].clone().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }
}

pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}
