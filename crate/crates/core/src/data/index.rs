use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::episode::EpisodePlan;
use super::fold::{ClassId, FoldSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Every `(image, class)` pair eligible to appear in an episode.
#[derive(Clone, Debug)]
pub struct EpisodeIndex {
    pub split: Split,
    pub entries: Vec<(String, ClassId)>,
    pub leakage_filtered: bool,
    by_class: BTreeMap<ClassId, Vec<String>>,
}

/// Scans every mask of `dataset` and indexes the classes of `split`.
///
/// The train split drops every image that contains any pixel of a testing
/// class. `min_pixels` is the smallest object area (in mask pixels) that makes
/// an image usable for a class.
pub fn build_index(dataset: &Dataset, fold: &FoldSpec, split: Split, min_pixels: usize) -> Result<EpisodeIndex> {
    let testing: BTreeSet<ClassId> = fold.testing_classes.iter().copied().collect();
    let wanted: &[ClassId] = match split {
        Split::Train => &fold.training_classes,
        Split::Test => &fold.testing_classes,
    };
    let mut by_class: BTreeMap<ClassId, Vec<String>> = wanted.iter().map(|&c| (c, Vec::new())).collect();
    for id in dataset.ids() {
        let (mask, ..) = dataset.load_mask(id)?;
        let mut counts = [0usize; 256];
        for &c in &mask {
            counts[c as usize] += 1;
        }
        if split == Split::Train && testing.iter().any(|&c| counts[c as usize] > 0) {
            continue;
        }
        for &c in wanted {
            if counts[c as usize] >= min_pixels.max(1) {
                by_class.get_mut(&c).expect("wanted class").push(id.clone());
            }
        }
    }
    if let Some((&c, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Data(format!(
            "no {:?}-split images contain class '{}'",
            split,
            fold.name(c)
        )));
    }
    Ok(EpisodeIndex::from_class_lists(split, split == Split::Train, by_class))
}

impl EpisodeIndex {
    pub fn from_class_lists(split: Split, leakage_filtered: bool, by_class: BTreeMap<ClassId, Vec<String>>) -> Self {
        let entries = by_class
            .iter()
            .flat_map(|(&c, ids)| ids.iter().map(move |id| (id.clone(), c)))
            .collect();
        Self {
            split,
            entries,
            leakage_filtered,
            by_class,
        }
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().collect()
    }

    pub fn images_of(&self, class: ClassId) -> &[String] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn distinct_images(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// Classes with at least `k + 1` images (one query plus `k` supports).
    pub fn samplable_classes(&self, k: usize) -> Vec<ClassId> {
        self.by_class
            .iter()
            .filter(|(_, v)| v.len() > k)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn restricted_to(&self, classes: &[ClassId]) -> Self {
        let by_class = self
            .by_class
            .iter()
            .filter(|(c, _)| classes.contains(c))
            .map(|(&c, v)| (c, v.clone()))
            .collect();
        Self::from_class_lists(self.split, self.leakage_filtered, by_class)
    }

    /// Draws one episode: a class uniformly at random, a query image of that
    /// class, then `k` distinct support images of the same class.
    pub fn sample_plan<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<EpisodePlan> {
        if k == 0 {
            return Err(Error::Sampling("k must be at least 1".into()));
        }
        if self.by_class.is_empty() {
            return Err(Error::Sampling("index is empty".into()));
        }
        let classes = self.classes();
        let class = classes[rng.gen_range(0..classes.len())];
        let imgs = &self.by_class[&class];
        if imgs.len() < k + 1 {
            return Err(Error::Sampling(format!(
                "class {class} has {} images, {}-shot episodes need {}",
                imgs.len(),
                k,
                k + 1
            )));
        }
        let picks = sample_indices(rng, imgs.len(), k + 1);
        let mut it = picks.iter();
        let query_id = imgs[it.next().expect("k + 1 picks")].clone();
        let support_ids = it.map(|i| imgs[i].clone()).collect();
        Ok(EpisodePlan {
            class,
            query_id,
            support_ids,
        })
    }
}
