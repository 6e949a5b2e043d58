//! IoU-based metrics and the fixed-pair evaluation protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, Episode, EpisodeIndex, EpisodePlan, FoldSpec, MAX_CROP_ATTEMPTS};
use crate::error::{Error, Result};

/// Pixel counts of a binary prediction against a binary ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// Foreground IoU; 1 when both prediction and truth are empty.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// IoU of the complementary (background) labels.
    pub fn background_iou(&self) -> f64 {
        Counts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
        .iou()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

pub fn accumulate_iou(pred: &[bool], gt: &[bool]) -> Result<Counts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction of {} pixels vs truth of {}", pred.len(), gt.len())));
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub macc: f64,
    pub n_pairs: usize,
    pub k: usize,
    pub seed: u64,
    pub failed_pairs: usize,
    pub excluded_classes: Vec<String>,
}

/// Outcome of one evaluated pair, kept for per-object analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub class: ClassId,
    pub query_id: String,
    pub support_ids: Vec<String>,
    /// Fraction of query pixels belonging to the target object.
    pub object_fraction: f64,
    pub counts: Counts,
}

/// Reduces per-pair counts to a report. Per-class IoU uses counts summed over
/// all pairs of the class; FB-IoU uses counts summed over every pair.
pub fn summarize(
    pairs: &[PairResult],
    fold: &FoldSpec,
    classes: &[ClassId],
    k: usize,
    seed: u64,
    failed_pairs: usize,
    excluded: &[ClassId],
) -> MetricsReport {
    let mut per_class: BTreeMap<ClassId, Counts> = classes.iter().map(|&c| (c, Counts::default())).collect();
    let mut total = Counts::default();
    for p in pairs {
        per_class.entry(p.class).or_default().add(p.counts);
        total.add(p.counts);
    }
    let n = per_class.len().max(1) as f64;
    let miou = per_class.values().map(Counts::iou).sum::<f64>() / n;
    let macc = per_class.values().map(Counts::accuracy).sum::<f64>() / n;
    MetricsReport {
        per_class_iou: per_class.iter().map(|(&c, v)| (fold.name(c), 100.0 * v.iou())).collect(),
        miou: 100.0 * miou,
        fb_iou: 100.0 * 0.5 * (total.iou() + total.background_iou()),
        macc: 100.0 * macc,
        n_pairs: pairs.len(),
        k,
        seed,
        failed_pairs,
        excluded_classes: fold.names(excluded),
    }
}

/// Draws `n_pairs` episode plans of `k` supports from the samplable classes.
pub fn sample_plans(index: &EpisodeIndex, n_pairs: usize, k: usize, seed: u64) -> Result<(Vec<EpisodePlan>, Vec<ClassId>)> {
    let ok = index.samplable_classes(k);
    let excluded: Vec<ClassId> = index.classes().into_iter().filter(|c| !ok.contains(c)).collect();
    for c in &excluded {
        log::warn!("class {c} has too few images for {k}-shot episodes; excluded");
    }
    if ok.is_empty() {
        return Err(Error::Sampling(format!("no class can form {k}-shot episodes")));
    }
    let idx = index.restricted_to(&ok);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = (0..n_pairs).map(|_| idx.sample_plan(k, &mut rng)).collect::<Result<_>>()?;
    Ok((plans, excluded))
}

/// Evaluates `predict` on fixed plans. Episodes that fail to load or predict
/// are logged and skipped; they count in `failed_pairs`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_plans(
    predict: &mut dyn FnMut(&Episode) -> Result<Vec<bool>>,
    dataset: &Dataset,
    fold: &FoldSpec,
    plans: &[EpisodePlan],
    crop: Option<usize>,
    seed: u64,
    excluded: &[ClassId],
) -> Result<(MetricsReport, Vec<PairResult>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pairs = Vec::with_capacity(plans.len());
    let mut failed = 0;
    let mut classes: Vec<ClassId> = plans.iter().map(|p| p.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let k = plans.first().map_or(1, EpisodePlan::k);
    for plan in plans {
        let mut ep = Err(Error::Sampling("no attempt".into()));
        for _ in 0..MAX_CROP_ATTEMPTS {
            ep = Episode::materialize(dataset, plan, crop, &mut rng);
            if !matches!(ep, Err(Error::Sampling(_))) {
                break;
            }
        }
        let outcome = ep.and_then(|ep| {
            let pred = predict(&ep)?;
            let counts = accumulate_iou(&pred, &ep.query.mask)?;
            Ok(PairResult {
                class: plan.class,
                query_id: plan.query_id.clone(),
                support_ids: plan.support_ids.clone(),
                object_fraction: ep.query.foreground() as f64 / ep.query.mask.len() as f64,
                counts,
            })
        });
        match outcome {
            Ok(p) => pairs.push(p),
            Err(e) => {
                log::warn!("pair {:?} skipped: {e}", plan);
                failed += 1;
            }
        }
    }
    Ok((summarize(&pairs, fold, &classes, k, seed, failed, excluded), pairs))
}

/// Samples `n_pairs` episodes with `seed` and evaluates `predict` on them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_fold(
    predict: &mut dyn FnMut(&Episode) -> Result<Vec<bool>>,
    dataset: &Dataset,
    fold: &FoldSpec,
    index: &EpisodeIndex,
    n_pairs: usize,
    k: usize,
    seed: u64,
    crop: Option<usize>,
) -> Result<(MetricsReport, Vec<PairResult>)> {
    let (plans, excluded) = sample_plans(index, n_pairs, k, seed)?;
    evaluate_plans(predict, dataset, fold, &plans, crop, seed, &excluded)
}

impl MetricsReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou={:.4}", self.miou);
        let _ = writeln!(s, "fb_iou={:.4}", self.fb_iou);
        let _ = writeln!(s, "macc={:.4}", self.macc);
        let _ = writeln!(s, "n_pairs={}", self.n_pairs);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "failed_pairs={}", self.failed_pairs);
        let _ = writeln!(s, "excluded_classes={}", self.excluded_classes.join(";"));
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "iou.{c}={v:.4}");
        }
        s
    }

    /// Writes `report.txt` (key=value), `report.json` and `per_class.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("report.txt", self.to_key_values())?;
        put(
            "report.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?,
        )?;
        let mut csv = String::from("class,iou\n");
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(csv, "{c},{v:.4}");
        }
        put("per_class.csv", csv)
    }
}
