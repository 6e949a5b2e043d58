//! The full network: adapter, CPRM, decoder, CSRM and KMS wired together for
//! one episode.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::cprm::{self, Aggregator, FusionWeights};
use crate::csrm::{self, CsrmConfig};
use crate::data::{ClassId, Episode, EpisodeImage, FoldSpec};
use crate::decoder::{self, Decoder};
use crate::error::{Error, Result};
use crate::features::{downsample_mask, masked_average_pool, Backbone, FeatureBundle, FeatureCache};
use crate::kms::{self, MetaMemory};
use crate::kshot;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture and fixed hyperparameters of a [`DmNet`]; everything needed to
/// rebuild it from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mid_channels: usize,
    pub high_channels: usize,
    pub reduce_dim: usize,
    pub channel_grid: usize,
    pub lambda_fuse: f64,
    pub use_cprm: bool,
    pub use_csrm: bool,
    pub use_kms: bool,
    pub csrm: CsrmConfig,
    pub rho: f64,
    /// Training classes in memory-row order.
    pub known_classes: Vec<ClassId>,
}

impl ModelSpec {
    pub fn new<T: Scalar>(cfg: &Config, backbone: &dyn Backbone<T>, fold: &FoldSpec) -> Self {
        Self {
            mid_channels: backbone.mid_channels(),
            high_channels: backbone.high_channels(),
            reduce_dim: cfg.model.reduce_dim,
            channel_grid: cfg.cprm.channel_grid,
            lambda_fuse: cfg.cprm.lambda_fuse,
            use_cprm: cfg.model.use_cprm,
            use_csrm: cfg.model.use_csrm,
            use_kms: cfg.model.use_kms,
            csrm: cfg.csrm.clone(),
            rho: cfg.kms.rho,
            known_classes: fold.training_classes.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Backbone features of one episode image plus its feature-resolution masks.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    pub bundle: Arc<FeatureBundle<T>>,
    pub height: usize,
    pub width: usize,
    pub fg: Vec<T>,
    pub bg: Vec<T>,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn new(bundle: Arc<FeatureBundle<T>>, mask: &[bool], height: usize, width: usize) -> Self {
        let stride = bundle.stride;
        let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
        Self {
            fg: downsample_mask(mask, height, width, stride),
            bg: downsample_mask(&inv, height, width, stride),
            bundle,
            height,
            width,
        }
    }

    pub fn from_image(cache: &FeatureCache<T>, img: &EpisodeImage) -> Result<Self> {
        let image = img.sample.image.cast::<T>();
        let bundle = if img.cacheable {
            cache.get(img.id(), &image)?
        } else {
            Arc::new(cache.backbone().extract(&image)?)
        };
        let (h, w) = img.size();
        Ok(Self::new(bundle, &img.mask, h, w))
    }

    fn high_prototypes(&self) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let fg = masked_average_pool(&self.bundle.high, &self.fg)?;
        let bg = match masked_average_pool(&self.bundle.high, &self.bg) {
            Ok(p) => Some(p),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        Ok((fg, bg))
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeFeatures<T> {
    pub target_class: ClassId,
    pub query: ImageFeatures<T>,
    pub support: Vec<ImageFeatures<T>>,
}

impl<T: Scalar> EpisodeFeatures<T> {
    pub fn extract(cache: &FeatureCache<T>, ep: &Episode) -> Result<Self> {
        Ok(Self {
            target_class: ep.target_class,
            query: ImageFeatures::from_image(cache, &ep.query)?,
            support: ep
                .support
                .iter()
                .map(|s| ImageFeatures::from_image(cache, s))
                .collect::<Result<_>>()?,
        })
    }

    /// Query mask as a `{0,1}` target at image resolution.
    pub fn query_target(ep: &Episode) -> Vec<T> {
        ep.query.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
    }
}

/// Graph values and diagnostics of one forward pass.
pub struct Forward<T> {
    /// `[2, h, w]` decoder logits (phi-weighted across branches when K > 1).
    pub y_q: Var,
    /// `[2, h, w]` final logits; identical to `y_q` when CSRM is disabled.
    pub y_final: Var,
    pub positional_maps: Vec<Tensor<T>>,
    pub meta_maps: Vec<Tensor<T>>,
    pub phi: Vec<T>,
}

struct Branch<T> {
    f_q: Var,
    prototype: Var,
    m_p: Var,
    affinity_mean: Option<T>,
}

/// Per-image prediction at input resolution.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `[2, H, W]` final probabilities, background first.
    pub probs: Tensor<T>,
    /// `[2, H, W]` decoder probabilities.
    pub initial: Tensor<T>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DmNet<T: Scalar> {
    spec: ModelSpec,
    pub params: ParamStore<T>,
    adapter: (ParamId, ParamId),
    cprm: Option<(FusionWeights, Aggregator)>,
    decoder: Decoder,
    pub memory: MetaMemory<T>,
}

impl<T: Scalar> DmNet<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut params = ParamStore::new(seed);
        let c = spec.reduce_dim;
        let adapter = (
            params.add(
                "adapter.weight",
                &[c, spec.mid_channels, 1, 1],
                Init::KaimingUniform { fan_in: spec.mid_channels },
            ),
            params.add("adapter.bias", &[c], Init::Constant(0.0)),
        );
        let cprm = spec.use_cprm.then(|| {
            (
                FusionWeights::register(&mut params, c, spec.channel_grid, spec.lambda_fuse),
                Aggregator::register(&mut params, c),
            )
        });
        let decoder = Decoder::register(&mut params, c);
        let memory = MetaMemory::new(spec.known_classes.len(), spec.high_channels, spec.rho);
        Self {
            spec,
            params,
            adapter,
            cprm,
            decoder,
            memory,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Rebuilds a model around existing parameters and memory, checking that
    /// every parameter has the expected name and shape.
    pub fn from_parts(spec: ModelSpec, params: ParamStore<T>, memory: MetaMemory<T>) -> Result<Self> {
        let mut model = Self::new(spec, 0);
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let (want, got) = (model.params.get(id), params.get(id));
            if model.params.name(id) != params.name(id) || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    params.name(id),
                    got.shape(),
                    model.params.name(id),
                    want.shape()
                )));
            }
        }
        if memory.classes() != model.memory.classes() || memory.dim() != model.memory.dim() {
            return Err(Error::Checkpoint("memory size does not match the model".into()));
        }
        model.params = params;
        model.memory = memory;
        Ok(model)
    }

    fn adapt(&self, g: &mut Graph<T>, mid: &Tensor<T>) -> Result<Var> {
        let x = g.constant(mid.clone());
        let w = g.param(&self.params, self.adapter.0);
        let b = g.param(&self.params, self.adapter.1);
        let y = g.conv2d(x, w, Some(b), 1)?;
        Ok(g.relu(y))
    }

    fn branch(&self, g: &mut Graph<T>, q: &ImageFeatures<T>, s: &ImageFeatures<T>) -> Result<Branch<T>> {
        let (h, w) = q.bundle.spatial();
        if s.bundle.spatial() != (h, w) {
            return Err(Error::Shape(format!(
                "support features {:?} vs query {:?}",
                s.bundle.spatial(),
                (h, w)
            )));
        }
        let f_q = self.adapt(g, &q.bundle.mid)?;
        let f_s = self.adapt(g, &s.bundle.mid)?;
        match &self.cprm {
            None => Ok(Branch {
                f_q,
                prototype: g.masked_mean(f_s, &s.fg)?,
                m_p: g.constant(Tensor::full(&[h, w], T::of(0.5))),
                affinity_mean: None,
            }),
            Some((fw, agg)) => {
                let mask = g.constant(Tensor::new(&[h, w], s.fg.clone())?);
                let f_s = cprm::mask_support(g, f_s, mask)?;
                let pos = cprm::position_mining(g, &self.params, fw, f_q, f_s)?;
                let chan = cprm::channel_mining(g, &self.params, fw, f_q, f_s)?;
                let out = cprm::aggregate(g, &self.params, agg, pos.query, chan.query, pos.support, chan.support, &s.fg)?;
                let l = g.value(pos.affinity);
                let mean = l.sum() / T::of(l.len() as f64);
                Ok(Branch {
                    f_q: out.query,
                    prototype: out.prototype,
                    m_p: cprm::positional_activation_map(g, pos.affinity, h, w)?,
                    affinity_mean: Some(mean),
                })
            }
        }
    }

    fn slot(&self, class: ClassId) -> Result<usize> {
        self.spec
            .known_classes
            .iter()
            .position(|&k| k == class)
            .ok_or(Error::Index {
                index: class as usize,
                len: self.spec.known_classes.len(),
            })
    }

    /// Folds the high-level support prototypes of a training episode into the
    /// memory row of its class.
    pub fn update_memory(&mut self, ep: &EpisodeFeatures<T>) -> Result<()> {
        let slot = self.slot(ep.target_class)?;
        for s in &ep.support {
            let (fg, bg) = s.high_prototypes()?;
            self.memory.update(slot, &fg, bg.as_deref())?;
        }
        Ok(())
    }

    fn meta_map(&self, q: &ImageFeatures<T>, s: &ImageFeatures<T>, target: ClassId, mode: Mode) -> Result<Tensor<T>> {
        let (h, w) = q.bundle.spatial();
        if !self.spec.use_kms {
            return Ok(Tensor::full(&[h, w], T::of(0.5)));
        }
        match mode {
            Mode::Train => kms::suppress_train(&q.bundle.high, &self.memory, self.slot(target)?),
            Mode::Test => {
                let (fg, bg) = s.high_prototypes()?;
                let bg = bg.unwrap_or_else(|| vec![T::zero(); fg.len()]);
                kms::suppress_test(&q.bundle.high, &fg, &bg, &self.memory)
            }
        }
    }

    /// Builds the forward graph. Memory is read but never written; training
    /// code calls [`DmNet::update_memory`] first.
    pub fn forward(&self, g: &mut Graph<T>, ep: &EpisodeFeatures<T>, mode: Mode) -> Result<Forward<T>> {
        if ep.support.is_empty() {
            return Err(Error::Data("episode without support images".into()));
        }
        let (h, w) = ep.query.bundle.spatial();
        let mut logits = Vec::new();
        let mut queries = Vec::new();
        let mut fgs = Vec::new();
        let mut bgs = Vec::new();
        let mut means = Vec::new();
        let mut positional_maps = Vec::new();
        let mut meta_maps = Vec::new();
        for s in &ep.support {
            let b = self.branch(g, &ep.query, s)?;
            let m_a = self.meta_map(&ep.query, s, ep.target_class, mode)?;
            let ma = g.constant(m_a.clone());
            let y = self.decoder.decode(g, &self.params, b.f_q, b.prototype, b.m_p, ma)?;
            if !g.value(y).is_finite() {
                return Err(Error::Numerical("non-finite decoder output".into()));
            }
            if self.spec.use_csrm {
                let probs = decoder::probs_of(g.value(y));
                let p = csrm::mine_prototypes(g, b.f_q, &probs, &self.spec.csrm)?;
                fgs.push(p.fg);
                bgs.push(p.bg);
            }
            logits.push(y);
            queries.push(b.f_q);
            means.extend(b.affinity_mean);
            positional_maps.push(g.value(b.m_p).clone());
            meta_maps.push(m_a);
        }
        let k = logits.len();
        let phi = if means.len() == k {
            kshot::factors_from_means(&means)?
        } else {
            vec![T::one() / T::of(k as f64); k]
        };
        let y_q = if k == 1 {
            logits[0]
        } else {
            kshot::weighted_sum(g, &logits, &phi)?
        };
        let y_final = if !self.spec.use_csrm {
            y_q
        } else if k == 1 {
            csrm::final_logits(g, queries[0], fgs[0], bgs[0], self.spec.csrm.tau)?
        } else {
            let f_q = kshot::weighted_sum(g, &queries, &phi)?;
            kshot::fused_logits(g, f_q, &fgs, &bgs, &phi, self.spec.csrm.tau)?
        };
        debug_assert_eq!(g.shape(y_final), &[2, h, w]);
        Ok(Forward {
            y_q,
            y_final,
            positional_maps,
            meta_maps,
            phi,
        })
    }

    /// Training forward for one episode: memory update (when KMS is on), then
    /// the forward graph and the loss at image resolution.
    pub fn forward_train(
        &mut self,
        g: &mut Graph<T>,
        ep: &EpisodeFeatures<T>,
        target: &[T],
        eta: f64,
    ) -> Result<(Forward<T>, Var)> {
        if self.spec.use_kms {
            self.update_memory(ep)?;
        }
        let fwd = self.forward(g, ep, Mode::Train)?;
        let loss = self.loss(g, &fwd, ep, target, eta)?;
        Ok((fwd, loss))
    }

    pub fn loss(&self, g: &mut Graph<T>, fwd: &Forward<T>, ep: &EpisodeFeatures<T>, target: &[T], eta: f64) -> Result<Var> {
        let (hh, ww) = (ep.query.height, ep.query.width);
        let pq = decoder::upsampled_probs(g, fwd.y_q, hh, ww)?;
        let loss = if self.spec.use_csrm {
            let pf = decoder::upsampled_probs(g, fwd.y_final, hh, ww)?;
            decoder::segmentation_loss(g, pf, pq, target, eta)?
        } else {
            decoder::segmentation_loss(g, pq, pq, target, 0.0)?
        };
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss is {v}")));
        }
        Ok(loss)
    }

    /// Test-mode prediction at the query's input resolution.
    pub fn predict(&self, ep: &EpisodeFeatures<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, ep, Mode::Test)?;
        let (hh, ww) = (ep.query.height, ep.query.width);
        let pf = decoder::upsampled_probs(&mut g, fwd.y_final, hh, ww)?;
        let pq = decoder::upsampled_probs(&mut g, fwd.y_q, hh, ww)?;
        let probs = g.value(pf).clone();
        if !probs.is_finite() {
            return Err(Error::Numerical("non-finite prediction".into()));
        }
        let n = hh * ww;
        let mask = (0..n).map(|i| probs.data()[n + i] > probs.data()[i]).collect();
        Ok(Prediction {
            probs,
            initial: g.value(pq).clone(),
            mask,
        })
    }
}
