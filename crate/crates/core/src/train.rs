//! Episodic training loop: batched SGD with a poly schedule, and a warm-up
//! window during which only the known-class memory is updated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::Config;
use crate::data::{sample_episode, Dataset, EpisodeIndex};
use crate::error::{Error, Result};
use crate::features::FeatureCache;
use crate::kms::warmup_gate;
use crate::params::{accumulate_grads, poly_lr, Sgd};
use crate::pipeline::{DmNet, EpisodeFeatures};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Mean batch loss; absent during warm-up.
    pub loss: Option<f64>,
}

/// Trains `model` in place for `cfg.train.iterations` batches and returns one
/// record per iteration. `on_step` sees every record as it is produced.
pub fn train<T: Scalar>(
    model: &mut DmNet<T>,
    cache: &FeatureCache<T>,
    dataset: &Dataset,
    index: &EpisodeIndex,
    cfg: &Config,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let tc = &cfg.train;
    let crop = (cfg.data.crop > 0).then_some(cfg.data.crop);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Sgd::<T>::new(tc.momentum, tc.weight_decay);
    let mut log = Vec::with_capacity(tc.iterations);
    for iteration in 0..tc.iterations {
        let live = warmup_gate(iteration, tc.iters_per_epoch, cfg.kms.lambda_warm);
        let mut grads = Vec::new();
        let mut loss_sum = 0.0;
        for _ in 0..tc.batch_size {
            let ep = sample_episode(dataset, index, 1, crop, &mut rng)?;
            let feats = EpisodeFeatures::extract(cache, &ep)?;
            if !live {
                if model.spec().use_kms {
                    model.update_memory(&feats)?;
                }
                continue;
            }
            let target = EpisodeFeatures::<T>::query_target(&ep);
            let mut g = Graph::new();
            let (_, loss) = model.forward_train(&mut g, &feats, &target, tc.eta).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "iteration {iteration}, query {} class {}: {m}",
                    ep.query.id(),
                    ep.target_class
                )),
                e => e,
            })?;
            loss_sum += g.value(loss).data()[0].to_f64_lossy();
            let gr = g.backward(loss)?;
            accumulate_grads(&mut grads, g.param_grads(&gr));
        }
        let lr = poly_lr(tc.lr, iteration, tc.iterations, tc.poly_power);
        let record = if live {
            let inv = T::of(1.0 / tc.batch_size as f64);
            for (_, gt) in grads.iter_mut() {
                gt.scale_assign(inv);
                if !gt.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at iteration {iteration}")));
                }
            }
            opt.step(&mut model.params, &grads, T::of(lr));
            StepRecord {
                iteration,
                lr,
                loss: Some(loss_sum / tc.batch_size as f64),
            }
        } else {
            StepRecord {
                iteration,
                lr,
                loss: None,
            }
        };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}
