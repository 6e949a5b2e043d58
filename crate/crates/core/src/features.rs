//! Frozen convolutional feature extraction and masked average pooling.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_forward, max_pool, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{digest_tensors, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mid-level and high-level feature maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    /// `[C_mid, h, w]`; drives the cross-image and query-self mining.
    pub mid: Tensor<T>,
    /// `[C_H, h, w]`; feeds the known-class memory.
    pub high: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn spatial(&self) -> (usize, usize) {
        (self.mid.dim(1), self.mid.dim(2))
    }
}

/// Anything that turns a `[3, H, W]` image in `[0, 1]` into a [`FeatureBundle`].
pub trait Backbone<T: Scalar>: Send + Sync {
    fn extract(&self, image: &Tensor<T>) -> Result<FeatureBundle<T>>;
    fn stride(&self) -> usize;
    fn mid_channels(&self) -> usize;
    fn high_channels(&self) -> usize;
    /// Hash of every frozen weight; must never change during training.
    fn digest(&self) -> String;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageSpec {
    c_in: usize,
    c_out: usize,
    dilation: usize,
    /// 2x2 max-pool after the activation.
    pool: bool,
}

/// A plain stack of `conv3x3 -> ReLU [-> maxpool2]` stages with frozen weights.
///
/// `mid` is the concatenation of the configured mid stages, each max-pooled to
/// the final stride; `high` is the output of the last stage.
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    stages: Vec<StageSpec>,
    weights: ParamStore<T>,
    mid_stages: Vec<usize>,
    mean: [f64; 3],
    std: [f64; 3],
}

/// On-disk form of a [`ConvStack`]: architecture plus flat weights.
#[derive(Serialize, Deserialize)]
struct ConvStackFile {
    stages: Vec<StageSpec>,
    mid_stages: Vec<usize>,
    mean: [f64; 3],
    std: [f64; 3],
    /// Per stage: `[c_out * c_in * 9]` kernel followed by `[c_out]` bias.
    weights: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<T: Scalar> ConvStack<T> {
    /// The desk-scale encoder: four stages, stride 8, random weights drawn
    /// from `seed` and never updated.
    pub fn tiny(seed: u64) -> Self {
        let stages = vec![
            StageSpec { c_in: 3, c_out: 16, dilation: 1, pool: true },
            StageSpec { c_in: 16, c_out: 32, dilation: 1, pool: true },
            StageSpec { c_in: 32, c_out: 48, dilation: 1, pool: true },
            StageSpec { c_in: 48, c_out: 64, dilation: 1, pool: false },
        ];
        let mut weights = ParamStore::new(seed);
        for (i, s) in stages.iter().enumerate() {
            weights.add(
                &format!("stage{}.weight", i + 1),
                &[s.c_out, s.c_in, 3, 3],
                Init::KaimingUniform { fan_in: s.c_in * 9 },
            );
            weights.add(&format!("stage{}.bias", i + 1), &[s.c_out], Init::Constant(0.0));
        }
        Self {
            stages,
            weights,
            mid_stages: vec![1, 2],
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }

    /// Loads a pretrained stack exported to the JSON weight format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConvStackFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if file.weights.len() != file.stages.len() || file.stages.is_empty() {
            return Err(Error::Config(format!(
                "{}: {} stages but {} weight entries",
                path.display(),
                file.stages.len(),
                file.weights.len()
            )));
        }
        if file.mid_stages.iter().any(|&i| i >= file.stages.len()) || file.mid_stages.is_empty() {
            return Err(Error::Config(format!("{}: bad mid_stages", path.display())));
        }
        let mut weights = ParamStore::new(0);
        for (i, (s, (w, b))) in file.stages.iter().zip(&file.weights).enumerate() {
            if i > 0 && s.c_in != file.stages[i - 1].c_out {
                return Err(Error::Config(format!("{}: stage {i} channel mismatch", path.display())));
            }
            let wid = weights.add(&format!("stage{}.weight", i + 1), &[s.c_out, s.c_in, 3, 3], Init::Constant(0.0));
            let bid = weights.add(&format!("stage{}.bias", i + 1), &[s.c_out], Init::Constant(0.0));
            if w.len() != s.c_out * s.c_in * 9 || b.len() != s.c_out {
                return Err(Error::Config(format!("{}: stage {i} weight size", path.display())));
            }
            for (d, &v) in weights.get_mut(wid).data_mut().iter_mut().zip(w) {
                *d = T::of(v);
            }
            for (d, &v) in weights.get_mut(bid).data_mut().iter_mut().zip(b) {
                *d = T::of(v);
            }
        }
        Ok(Self {
            stages: file.stages,
            weights,
            mid_stages: file.mid_stages,
            mean: file.mean,
            std: file.std,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let weights = self
            .weights
            .iter()
            .collect::<Vec<_>>()
            .chunks(2)
            .map(|wb| {
                (
                    wb[0].1.data().iter().map(|v| v.to_f64_lossy()).collect(),
                    wb[1].1.data().iter().map(|v| v.to_f64_lossy()).collect(),
                )
            })
            .collect();
        let file = ConvStackFile {
            stages: self.stages.clone(),
            mid_stages: self.mid_stages.clone(),
            mean: self.mean,
            std: self.std,
            weights,
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn min_size(&self) -> usize {
        2 * self.stride()
    }
}

impl<T: Scalar> Backbone<T> for ConvStack<T> {
    fn extract(&self, image: &Tensor<T>) -> Result<FeatureBundle<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected a [3, H, W] image, got {:?}", s)));
        }
        let (mut h, mut w) = (s[1], s[2]);
        if h < self.min_size() || w < self.min_size() {
            return Err(Error::Size(format!(
                "{h}x{w} is below the backbone minimum of {0}x{0}",
                self.min_size()
            )));
        }
        let hw = h * w;
        let mut x: Vec<T> = image
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(c, plane)| {
                let (m, sd) = (T::of(self.mean[c]), T::of(self.std[c]));
                plane.iter().map(move |&v| (v - m) / sd)
            })
            .collect();

        let mut stride = 1;
        let mut outputs: Vec<(Vec<T>, usize, usize, usize, usize)> = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let geom = ConvGeom {
                c_in: st.c_in,
                c_out: st.c_out,
                h,
                w,
                k: 3,
                dilation: st.dilation,
            };
            let wt = self.weights.get(crate::params::ParamId(2 * i));
            let bs = self.weights.get(crate::params::ParamId(2 * i + 1));
            let mut y = conv2d_forward(&x, wt.data(), Some(bs.data()), geom);
            y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            if st.pool {
                let (p, ph, pw) = max_pool(&y, st.c_out, h, w, 2);
                y = p;
                h = ph;
                w = pw;
                stride *= 2;
            }
            outputs.push((y.clone(), st.c_out, h, w, stride));
            x = y;
        }

        let mut mid = Vec::new();
        let mut mid_c = 0;
        for &i in &self.mid_stages {
            let (data, c, sh, sw, sstride) = &outputs[i];
            let f = stride / sstride;
            let (pooled, ph, pw) = if f > 1 {
                max_pool(data, *c, *sh, *sw, f)
            } else {
                (data.clone(), *sh, *sw)
            };
            debug_assert_eq!((ph, pw), (h, w));
            mid.extend(pooled);
            mid_c += c;
        }
        let (high, hc, ..) = outputs.pop().expect("at least one stage");
        Ok(FeatureBundle {
            mid: Tensor::new(&[mid_c, h, w], mid)?,
            high: Tensor::new(&[hc, h, w], high)?,
            stride,
        })
    }

    fn stride(&self) -> usize {
        1 << self.stages.iter().filter(|s| s.pool).count()
    }

    fn mid_channels(&self) -> usize {
        self.mid_stages.iter().map(|&i| self.stages[i].c_out).sum()
    }

    fn high_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.c_out)
    }

    fn digest(&self) -> String {
        digest_tensors(self.weights.iter())
    }
}

/// Prototype of `f` (`[C, h, w]`) under a non-negative `h*w` mask:
/// `p[c] = sum f[c,i] m[i] / sum m[i]`.
pub fn masked_average_pool<T: Scalar>(f: &Tensor<T>, mask: &[T]) -> Result<Vec<T>> {
    let s = f.shape();
    if s.len() != 3 || s[1] * s[2] != mask.len() {
        return Err(Error::Shape(format!(
            "masked_average_pool of {:?} with mask of {}",
            s,
            mask.len()
        )));
    }
    let denom: T = mask.iter().copied().sum();
    if denom <= T::zero() {
        return Err(Error::EmptyMask);
    }
    Ok(f.data()
        .chunks(mask.len())
        .map(|plane| plane.iter().zip(mask).map(|(&a, &b)| a * b).sum::<T>() / denom)
        .collect())
}

/// Resamples a full-resolution binary mask to feature resolution with max
/// pooling, so any object pixel marks its whole cell.
pub fn downsample_mask<T: Scalar>(mask: &[bool], h: usize, w: usize, stride: usize) -> Vec<T> {
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                out[(y / stride) * ow + x / stride] = T::one();
            }
        }
    }
    out
}

/// Memoizes backbone output per image id; the backbone is frozen, so an
/// image's features never change.
pub struct FeatureCache<T> {
    backbone: Arc<dyn Backbone<T>>,
    cache: RwLock<HashMap<String, Arc<FeatureBundle<T>>>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new(backbone: Arc<dyn Backbone<T>>) -> Self {
        Self {
            backbone,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone<T>> {
        &self.backbone
    }

    pub fn get(&self, id: &str, image: &Tensor<T>) -> Result<Arc<FeatureBundle<T>>> {
        if let Some(b) = self.cache.read().expect("cache lock").get(id) {
            return Ok(b.clone());
        }
        let b = Arc::new(self.backbone.extract(image)?);
        self.cache
            .write()
            .expect("cache lock")
            .insert(id.to_string(), b.clone());
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_ceil_of_stride() {
        let enc = ConvStack::<f32>::tiny(0);
        let img = Tensor::full(&[3, 36, 29], 0.3f32);
        let b = enc.extract(&img).unwrap();
        assert_eq!(b.stride, 8);
        assert_eq!(b.spatial(), (5, 4));
        assert_eq!(b.mid.dim(0), enc.mid_channels());
        assert_eq!(b.high.dim(0), 64);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let enc = ConvStack::<f32>::tiny(0);
        let img = Tensor::full(&[3, 8, 64], 0.3f32);
        assert!(matches!(enc.extract(&img), Err(Error::Size(_))));
    }

    #[test]
    fn map_of_ones_is_ones() {
        let f = Tensor::full(&[3, 2, 2], 1.0f64);
        let p = masked_average_pool(&f, &[0.0, 0.2, 0.0, 0.9]).unwrap();
        assert_eq!(p, vec![1.0; 3]);
    }

    #[test]
    fn map_diagonal_mask() {
        let f = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = masked_average_pool(&f, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, vec![2.5]);
    }

    #[test]
    fn map_empty_mask_errors() {
        let f = Tensor::full(&[3, 2, 2], 1.0f64);
        assert!(matches!(masked_average_pool(&f, &[0.0; 4]), Err(Error::EmptyMask)));
    }

    #[test]
    fn single_pixel_survives_downsampling() {
        let mut m = vec![false; 16 * 16];
        m[7 * 16 + 9] = true;
        let d: Vec<f64> = downsample_mask(&m, 16, 16, 8);
        assert_eq!(d, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let enc = ConvStack::<f64>::tiny(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stack.json");
        enc.save(&p).unwrap();
        let back = ConvStack::<f64>::load(&p).unwrap();
        assert_eq!(enc.digest(), back.digest());
    }
}
