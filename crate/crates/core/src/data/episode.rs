use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::dataset::{Dataset, Sample};
use super::fold::ClassId;
use super::index::EpisodeIndex;
use crate::error::{Error, Result};

/// Which images form an episode; one line of a pair-list file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub class: ClassId,
    pub query_id: String,
    pub support_ids: Vec<String>,
}

impl EpisodePlan {
    pub fn k(&self) -> usize {
        self.support_ids.len()
    }
}

/// An image of an episode with its binary target-class mask.
#[derive(Clone, Debug)]
pub struct EpisodeImage {
    pub sample: Arc<Sample>,
    pub mask: Vec<bool>,
    /// False for random crops, whose features must not be memoized by id.
    pub cacheable: bool,
}

impl EpisodeImage {
    pub fn id(&self) -> &str {
        &self.sample.id
    }

    pub fn size(&self) -> (usize, usize) {
        (self.sample.height, self.sample.width)
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub target_class: ClassId,
    pub support: Vec<EpisodeImage>,
    pub query: EpisodeImage,
}

/// Attempts at finding a crop that still shows the target class.
pub const MAX_CROP_ATTEMPTS: usize = 20;

fn crop_with_class<R: Rng + ?Sized>(
    sample: Arc<Sample>,
    class: ClassId,
    crop: Option<usize>,
    rng: &mut R,
) -> Result<EpisodeImage> {
    let Some(size) = crop.filter(|&s| s < sample.height || s < sample.width) else {
        let mask = sample.binary_mask(class);
        return Ok(EpisodeImage { sample, mask, cacheable: true });
    };
    if size > sample.height || size > sample.width {
        return Err(Error::Size(format!(
            "{}: {}x{} is smaller than the {size} crop",
            sample.id, sample.height, sample.width
        )));
    }
    for _ in 0..MAX_CROP_ATTEMPTS {
        let top = rng.gen_range(0..=sample.height - size);
        let left = rng.gen_range(0..=sample.width - size);
        let c = sample.crop(top, left, size)?;
        let mask = c.binary_mask(class);
        if mask.iter().any(|&m| m) {
            return Ok(EpisodeImage {
                sample: Arc::new(c),
                mask,
                cacheable: false,
            });
        }
    }
    Err(Error::Sampling(format!(
        "{}: no {size}x{size} crop containing class {class} in {MAX_CROP_ATTEMPTS} attempts",
        sample.id
    )))
}

impl Episode {
    /// Loads the images of `plan`, optionally taking class-preserving crops.
    pub fn materialize<R: Rng + ?Sized>(
        dataset: &Dataset,
        plan: &EpisodePlan,
        crop: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let query = crop_with_class(dataset.get(&plan.query_id)?, plan.class, crop, rng)?;
        let mut support = Vec::with_capacity(plan.k());
        for id in &plan.support_ids {
            support.push(crop_with_class(dataset.get(id)?, plan.class, crop, rng)?);
        }
        let ep = Episode {
            target_class: plan.class,
            support,
            query,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::Data("episode without support images".into()));
        }
        let size = self.query.size();
        if self.query.foreground() == 0 {
            return Err(Error::Data(format!(
                "query {} has no pixels of class {}",
                self.query.id(),
                self.target_class
            )));
        }
        for s in &self.support {
            if s.foreground() == 0 {
                return Err(Error::Data(format!(
                    "support {} has no pixels of class {}",
                    s.id(),
                    self.target_class
                )));
            }
            if s.size() != size {
                return Err(Error::Data(format!(
                    "support {} is {:?} but query is {:?}",
                    s.id(),
                    s.size(),
                    size
                )));
            }
        }
        Ok(())
    }
}

/// Samples and materializes one episode. Plans whose crops miss the target
/// class are skipped and redrawn.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    index: &EpisodeIndex,
    k: usize,
    crop: Option<usize>,
    rng: &mut R,
) -> Result<Episode> {
    let mut last = None;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let plan = index.sample_plan(k, rng)?;
        match Episode::materialize(dataset, &plan, crop, rng) {
            Ok(ep) => return Ok(ep),
            Err(e @ Error::Sampling(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Sampling("could not draw an episode".into())))
}

/// Writes `query_id,support_id_1,...,support_id_K,class_id` lines.
pub fn write_pair_list(path: &Path, plans: &[EpisodePlan]) -> Result<()> {
    let mut out = String::new();
    for p in plans {
        if std::iter::once(&p.query_id).chain(&p.support_ids).any(|id| id.contains(',')) {
            return Err(Error::Data(format!("image id with a comma in {:?}", p)));
        }
        out.push_str(&p.query_id);
        for s in &p.support_ids {
            out.push(',');
            out.push_str(s);
        }
        let _ = writeln!(out, ",{}", p.class);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pair_list(path: &Path) -> Result<Vec<EpisodePlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut plans = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected query,support...,class",
                path.display(),
                n + 1
            )));
        }
        let class: ClassId = fields[fields.len() - 1].parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad class id", path.display(), n + 1))
        })?;
        plans.push(EpisodePlan {
            class,
            query_id: fields[0].to_string(),
            support_ids: fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(plans)
}
