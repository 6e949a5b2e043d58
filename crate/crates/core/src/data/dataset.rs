use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::{GrayImage, RgbImage};

use super::fold::ClassId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its dense class mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H * W` class ids, 0 = background.
    pub mask: Vec<ClassId>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn binary_mask(&self, class: ClassId) -> Vec<bool> {
        self.mask.iter().map(|&c| c == class).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut out = BTreeMap::new();
        for &c in &self.mask {
            if c != 0 {
                *out.entry(c).or_insert(0) += 1;
            }
        }
        out
    }

    /// Crops a `size x size` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Sample> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::Shape(format!(
                "crop {size}x{size} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let hw = self.height * self.width;
        let mut img = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in top..top + size {
                let row = c * hw + y * self.width;
                img.extend_from_slice(&self.image.data()[row + left..row + left + size]);
            }
        }
        let mut mask = Vec::with_capacity(size * size);
        for y in top..top + size {
            mask.extend_from_slice(&self.mask[y * self.width + left..y * self.width + left + size]);
        }
        Ok(Sample {
            id: format!("{}@{top},{left}", self.id),
            image: Tensor::new(&[3, size, size], img)?,
            mask,
            height: size,
            width: size,
        })
    }
}

/// A dataset in the standard layout: `root/images/<id>.png` (RGB) and
/// `root/masks/<id>.png` (8-bit class ids).
pub struct Dataset {
    root: PathBuf,
    ids: Vec<String>,
    loaded: RwLock<HashMap<String, Arc<Sample>>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join("images");
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let p = entry.path();
            if p.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::Data(format!("no images under {}", dir.display())));
        }
        ids.sort();
        Ok(Self {
            root: root.to_path_buf(),
            ids,
            loaded: RwLock::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn load_mask(&self, id: &str) -> Result<(Vec<ClassId>, usize, usize)> {
        let p = self.mask_path(id);
        let m = image::open(&p)
            .map_err(|e| Error::Image { path: p.clone(), source: e })?
            .into_luma8();
        let (w, h) = m.dimensions();
        Ok((m.into_raw(), h as usize, w as usize))
    }

    /// Loads (and memoizes) an image/mask pair.
    pub fn get(&self, id: &str) -> Result<Arc<Sample>> {
        if let Some(s) = self.loaded.read().expect("dataset lock").get(id) {
            return Ok(s.clone());
        }
        let p = self.image_path(id);
        let img = image::open(&p)
            .map_err(|e| Error::Image { path: p.clone(), source: e })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let (mask, mh, mw) = self.load_mask(id)?;
        if (mh, mw) != (h as usize, w as usize) {
            return Err(Error::Data(format!(
                "{id}: mask is {mh}x{mw} but image is {h}x{w}"
            )));
        }
        let sample = Arc::new(Sample {
            id: id.to_string(),
            image: rgb_to_tensor(&img),
            mask,
            height: h as usize,
            width: w as usize,
        });
        self.loaded
            .write()
            .expect("dataset lock")
            .insert(id.to_string(), sample.clone());
        Ok(sample)
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let hw = (w * h) as usize;
    let mut data = vec![0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h as usize, w as usize], data).expect("rgb buffer size")
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.dim(1), t.dim(2));
    let hw = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (t.data()[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray(mask: &[u8], h: usize, w: usize) -> GrayImage {
    GrayImage::from_raw(w as u32, h as u32, mask.to_vec()).expect("mask buffer size")
}
