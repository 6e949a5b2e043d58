//! Everything a run needs, opened once from a [`Config`]: dataset, fold,
//! episode indices and the shared frozen backbone with its feature cache.

use std::path::Path;
use std::sync::Arc;

use crate::config::Config;
use crate::data::{build_index, load_fold_spec, Dataset, EpisodeIndex, FoldSpec, Split};
use crate::error::Result;
use crate::evaluation::{evaluate_fold, MetricsReport, PairResult};
use crate::features::{Backbone, ConvStack, FeatureCache};
use crate::pipeline::{DmNet, EpisodeFeatures, ModelSpec};
use crate::scalar::Scalar;
use crate::train::{train, StepRecord};

pub struct Experiment<T: Scalar> {
    pub config: Config,
    pub dataset: Dataset,
    pub fold: FoldSpec,
    pub train_index: EpisodeIndex,
    pub test_index: EpisodeIndex,
    pub cache: FeatureCache<T>,
}

pub fn open_backbone<T: Scalar>(cfg: &Config) -> Result<Arc<dyn Backbone<T>>> {
    Ok(if cfg.model.backbone == "tiny" {
        Arc::new(ConvStack::<T>::tiny(cfg.model.backbone_seed))
    } else {
        Arc::new(ConvStack::<T>::load(Path::new(&cfg.model.backbone))?)
    })
}

impl<T: Scalar> Experiment<T> {
    pub fn open(config: Config) -> Result<Self> {
        let dataset = Dataset::open(&config.data.root)?;
        let fold = load_fold_spec(&config.data.fold_file, config.data.fold)?;
        let train_index = build_index(&dataset, &fold, Split::Train, config.data.min_pixels)?;
        let test_index = build_index(&dataset, &fold, Split::Test, config.data.min_pixels)?;
        let cache = FeatureCache::new(open_backbone::<T>(&config)?);
        Ok(Self {
            config,
            dataset,
            fold,
            train_index,
            test_index,
            cache,
        })
    }

    /// Swaps the config (e.g. to change ablation flags) while keeping the
    /// loaded data and cached features. Data and backbone keys must agree.
    pub fn with_config(mut self, config: Config) -> Self {
        debug_assert_eq!(self.config.data, config.data);
        self.config = config;
        self
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(&self.config, self.cache.backbone().as_ref(), &self.fold)
    }

    pub fn new_model(&self, seed: u64) -> DmNet<T> {
        DmNet::new(self.spec(), seed)
    }

    pub fn backbone_digest(&self) -> String {
        self.cache.backbone().digest()
    }

    pub fn train(&self, model: &mut DmNet<T>, on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        train(model, &self.cache, &self.dataset, &self.train_index, &self.config, on_step)
    }

    pub fn evaluate(&self, model: &DmNet<T>, pairs: usize, k: usize, seed: u64) -> Result<(MetricsReport, Vec<PairResult>)> {
        let crop = (self.config.data.crop > 0).then_some(self.config.data.crop);
        let mut predict = |ep: &crate::data::Episode| {
            let f = EpisodeFeatures::extract(&self.cache, ep)?;
            Ok(model.predict(&f)?.mask)
        };
        evaluate_fold(&mut predict, &self.dataset, &self.fold, &self.test_index, pairs, k, seed, crop)
    }
}
