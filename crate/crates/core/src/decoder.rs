//! Decoder producing the initial two-channel prediction, and the training loss.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Dilations of the 3x3 ASPP branches; a 1x1 branch runs alongside them.
pub const ASPP_DILATIONS: [usize; 3] = [6, 12, 18];

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

impl Conv {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                &[c_out, c_in, k, k],
                Init::KaimingUniform { fan_in: c_in * k * k },
            ),
            bias: store.add(&format!("{name}.bias"), &[c_out], Init::Constant(0.0)),
            dilation,
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, relu: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, Some(b), self.dilation)?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

/// `concat(F_q, P, M^p, M^A)` -> 1x1 reduce -> two 3x3 -> ASPP -> 1x1 classifier.
#[derive(Clone, Debug)]
pub struct Decoder {
    channels: usize,
    reduce: Conv,
    body: [Conv; 2],
    aspp: Vec<Conv>,
    fuse: Conv,
    classifier: Conv,
}

impl Decoder {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, channels: usize) -> Self {
        let c = channels;
        let reduce = Conv::register(store, "decoder.reduce", c, 2 * c + 2, 1, 1);
        let body = [
            Conv::register(store, "decoder.body0", c, c, 3, 1),
            Conv::register(store, "decoder.body1", c, c, 3, 1),
        ];
        let mut aspp = vec![Conv::register(store, "decoder.aspp1", c, c, 1, 1)];
        for d in ASPP_DILATIONS {
            aspp.push(Conv::register(store, &format!("decoder.aspp{d}"), c, c, 3, d));
        }
        let fuse = Conv::register(store, "decoder.aspp_fuse", c, c * aspp.len(), 1, 1);
        let classifier = Conv::register(store, "decoder.classifier", 2, c, 1, 1);
        Self {
            channels,
            reduce,
            body,
            aspp,
            fuse,
            classifier,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Returns `[2, h, w]` logits; channel 0 is background, 1 foreground.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_q: Var,
        prototype: Var,
        m_p: Var,
        m_a: Var,
    ) -> Result<Var> {
        let s = g.shape(f_q).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::Shape(format!("decoder expects [{}, h, w], got {:?}", self.channels, s)));
        }
        let (h, w) = (s[1], s[2]);
        for (name, v) in [("positional map", m_p), ("meta-activation map", m_a)] {
            if g.shape(v) != [h, w] {
                return Err(Error::Shape(format!("{name} {:?} for a {h}x{w} query", g.shape(v))));
            }
        }
        if g.shape(prototype) != [self.channels] {
            return Err(Error::Shape(format!("prototype {:?}", g.shape(prototype))));
        }
        let p = g.expand(prototype, h, w)?;
        let mp = g.reshape(m_p, &[1, h, w])?;
        let ma = g.reshape(m_a, &[1, h, w])?;
        let x = g.concat(&[f_q, p, mp, ma])?;
        let mut x = self.reduce.apply(g, store, x, true)?;
        for conv in &self.body {
            x = conv.apply(g, store, x, true)?;
        }
        let branches = self
            .aspp
            .iter()
            .map(|conv| conv.apply(g, store, x, true))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&branches)?;
        let x = self.fuse.apply(g, store, cat, true)?;
        self.classifier.apply(g, store, x, false)
    }
}

/// Validates a `{0,1}` mask and converts it to the scalar type.
pub fn binary_target<T: Scalar>(mask: &[u8]) -> Result<Vec<T>> {
    mask.iter()
        .map(|&m| match m {
            0 => Ok(T::zero()),
            1 => Ok(T::one()),
            v => Err(Error::Data(format!("mask value {v} is not binary"))),
        })
        .collect()
}

/// Upsamples `[2, h, w]` logits to `out_h x out_w` and takes the channel softmax.
pub fn upsampled_probs<T: Scalar>(g: &mut Graph<T>, logits: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let up = g.upsample(logits, out_h, out_w)?;
    g.softmax_channels(up)
}

/// `BCE(y_final) + eta * BCE(y_q)` on full-resolution probabilities.
pub fn segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    y_final: Var,
    y_q: Var,
    target: &[T],
    eta: f64,
) -> Result<Var> {
    let eps = T::of(BCE_EPS);
    let main = g.bce_foreground(y_final, target, eps)?;
    if eta == 0.0 {
        return Ok(main);
    }
    let aux = g.bce_foreground(y_q, target, eps)?;
    let aux = g.scale(aux, T::of(eta));
    g.add(main, aux)
}

/// Channel softmax of plain `[2, h, w]` logits.
pub fn probs_of<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let p = g.softmax_channels(v).expect("two-channel logits");
    g.value(p).clone()
}
