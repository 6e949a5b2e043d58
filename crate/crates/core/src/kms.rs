//! Known-class meta suppressor: an EMA memory of per-class prototypes over
//! high-level features, and the argmax competition that produces the
//! meta-activation map.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::csrm::cosine_map;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + DeserializeOwned")]
pub struct MetaMemory<T> {
    dim: usize,
    rho: f64,
    fg: Vec<Vec<T>>,
    bg: Vec<Vec<T>>,
    initialized: Vec<bool>,
    update_counts: Vec<u64>,
}

impl<T: Scalar> MetaMemory<T> {
    pub fn new(classes: usize, dim: usize, rho: f64) -> Self {
        Self {
            dim,
            rho,
            fg: vec![vec![T::zero(); dim]; classes],
            bg: vec![vec![T::zero(); dim]; classes],
            initialized: vec![false; classes],
            update_counts: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.fg.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn fg(&self, slot: usize) -> &[T] {
        &self.fg[slot]
    }

    pub fn bg(&self, slot: usize) -> &[T] {
        &self.bg[slot]
    }

    pub fn is_initialized(&self, slot: usize) -> bool {
        self.initialized.get(slot).copied().unwrap_or(false)
    }

    pub fn update_count(&self, slot: usize) -> u64 {
        self.update_counts[slot]
    }

    fn check(&self, slot: usize) -> Result<()> {
        if slot >= self.classes() {
            return Err(Error::Index {
                index: slot,
                len: self.classes(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, p: &[T]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::Shape(format!("prototype of {} for a memory of width {}", p.len(), self.dim)));
        }
        Ok(())
    }

    /// EMA update of both rows of `slot`; the first update copies the
    /// prototypes. `bg = None` leaves the background row untouched.
    pub fn update(&mut self, slot: usize, fg: &[T], bg: Option<&[T]>) -> Result<()> {
        self.check(slot)?;
        self.check_dim(fg)?;
        if let Some(b) = bg {
            self.check_dim(b)?;
        }
        let first = !self.initialized[slot];
        let rho = T::of(self.rho);
        let blend = |row: &mut Vec<T>, v: &[T]| {
            if first {
                row.copy_from_slice(v);
            } else {
                for (r, &x) in row.iter_mut().zip(v) {
                    *r = rho * *r + (T::one() - rho) * x;
                }
            }
        };
        blend(&mut self.fg[slot], fg);
        if let Some(b) = bg {
            blend(&mut self.bg[slot], b);
        }
        self.initialized[slot] = true;
        self.update_counts[slot] += 1;
        Ok(())
    }

    /// Overwrites a row as if it had already been initialized; for tests and
    /// tooling that need a specific memory state.
    pub fn set_rows(&mut self, slot: usize, fg: &[T], bg: &[T]) -> Result<()> {
        self.check(slot)?;
        self.check_dim(fg)?;
        self.check_dim(bg)?;
        self.fg[slot].copy_from_slice(fg);
        self.bg[slot].copy_from_slice(bg);
        self.initialized[slot] = true;
        Ok(())
    }
}

/// True once `iteration >= lambda_warm * iters_per_epoch`.
pub fn warmup_gate(iteration: usize, iters_per_epoch: usize, lambda_warm: f64) -> bool {
    iteration as f64 >= lambda_warm * iters_per_epoch as f64
}

/// Per pixel, keeps `(cos + 1) / 2` for channel `keep` when it wins the argmax
/// over all `candidates` (ties go to the lowest index), else 0.
fn compete<T: Scalar>(f: &Tensor<T>, candidates: &[&[T]], keep: usize) -> Tensor<T> {
    let (h, w) = (f.dim(1), f.dim(2));
    let maps: Vec<Vec<T>> = candidates.iter().map(|p| cosine_map(f, p)).collect();
    let half = T::of(0.5);
    let data = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for (k, m) in maps.iter().enumerate().skip(1) {
                if m[i] > maps[best][i] {
                    best = k;
                }
            }
            if best == keep {
                (maps[keep][i] + T::one()) * half
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(&[h, w], data).expect("h*w entries")
}

fn check_features<T: Scalar>(f: &Tensor<T>, dim: usize) -> Result<()> {
    if f.shape().len() != 3 || f.dim(0) != dim {
        return Err(Error::Shape(format!("high-level features {:?} for memory width {dim}", f.shape())));
    }
    Ok(())
}

/// Training-phase map: `[W_b^t, W_f^t, other initialized W_f]`, keeping the
/// target foreground channel. An uninitialized target yields all 0.5.
pub fn suppress_train<T: Scalar>(f_h: &Tensor<T>, memory: &MetaMemory<T>, target: usize) -> Result<Tensor<T>> {
    check_features(f_h, memory.dim)?;
    memory.check(target)?;
    if !memory.initialized[target] {
        return Ok(Tensor::full(&[f_h.dim(1), f_h.dim(2)], T::of(0.5)));
    }
    let mut cands: Vec<&[T]> = vec![&memory.bg[target], &memory.fg[target]];
    for k in 0..memory.classes() {
        if k != target && memory.initialized[k] {
            cands.push(&memory.fg[k]);
        }
    }
    Ok(compete(f_h, &cands, 1))
}

/// Test-phase map: `[P_f, P_b, all initialized W_f]`, keeping the support
/// foreground channel.
pub fn suppress_test<T: Scalar>(f_h: &Tensor<T>, p_f: &[T], p_b: &[T], memory: &MetaMemory<T>) -> Result<Tensor<T>> {
    check_features(f_h, memory.dim)?;
    memory.check_dim(p_f)?;
    memory.check_dim(p_b)?;
    let mut cands: Vec<&[T]> = vec![p_f, p_b];
    for k in 0..memory.classes() {
        if memory.initialized[k] {
            cands.push(&memory.fg[k]);
        }
    }
    Ok(compete(f_h, &cands, 0))
}
