use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Pixel value of a class in a mask file; 0 is background/ignore.
pub type ClassId = u8;

/// Disjoint known/unknown class split for one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub training_classes: Vec<ClassId>,
    pub testing_classes: Vec<ClassId>,
    pub class_names: BTreeMap<ClassId, String>,
}

impl FoldSpec {
    pub fn new(
        fold_id: usize,
        training_classes: Vec<ClassId>,
        testing_classes: Vec<ClassId>,
        class_names: BTreeMap<ClassId, String>,
    ) -> Result<Self> {
        if training_classes.is_empty() || testing_classes.is_empty() {
            return Err(Error::Spec(format!("fold {fold_id}: class lists must be non-empty")));
        }
        let train: BTreeSet<_> = training_classes.iter().collect();
        if let Some(c) = testing_classes.iter().find(|c| train.contains(c)) {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            return Err(Error::Spec(format!(
                "fold {fold_id}: class '{name}' is both a training and a testing class"
            )));
        }
        if training_classes.contains(&0) || testing_classes.contains(&0) {
            return Err(Error::Spec(format!("fold {fold_id}: class id 0 is reserved for background")));
        }
        Ok(Self {
            fold_id,
            training_classes,
            testing_classes,
            class_names,
        })
    }

    pub fn name(&self, c: ClassId) -> String {
        self.class_names.get(&c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    pub fn names(&self, ids: &[ClassId]) -> Vec<String> {
        ids.iter().map(|&c| self.name(c)).collect()
    }

    /// Row of a known class in the meta memory.
    pub fn known_slot(&self, c: ClassId) -> Option<usize> {
        self.training_classes.iter().position(|&k| k == c)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FoldFile {
    /// Class names in id order; the first name has id 1.
    classes: Vec<String>,
    fold: BTreeMap<String, FoldEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FoldEntry {
    train: Vec<String>,
    test: Vec<String>,
}

/// Reads fold `fold_id` from a TOML fold file:
///
/// ```toml
/// classes = ["ship", "storage tank", ...]
/// [fold.0]
/// train = ["bridge", ...]
/// test = ["ship", ...]
/// ```
pub fn load_fold_spec(path: &Path, fold_id: usize) -> Result<FoldSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fold_spec(&text, fold_id).map_err(|e| match e {
        Error::Spec(m) => Error::Spec(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_fold_spec(text: &str, fold_id: usize) -> Result<FoldSpec> {
    let file: FoldFile = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
    if file.classes.len() > 255 {
        return Err(Error::Spec("at most 255 classes fit in an 8-bit mask".into()));
    }
    let ids: BTreeMap<&str, ClassId> = file
        .classes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), (i + 1) as ClassId))
        .collect();
    let entry = file
        .fold
        .get(&fold_id.to_string())
        .ok_or_else(|| Error::Spec(format!("fold {fold_id} not defined")))?;
    let resolve = |names: &[String]| -> Result<Vec<ClassId>> {
        names
            .iter()
            .map(|n| {
                ids.get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::Spec(format!("unknown class '{n}'")))
            })
            .collect()
    };
    let names = file
        .classes
        .iter()
        .enumerate()
        .map(|(i, n)| ((i + 1) as ClassId, n.clone()))
        .collect();
    FoldSpec::new(fold_id, resolve(&entry.train)?, resolve(&entry.test)?, names)
}
