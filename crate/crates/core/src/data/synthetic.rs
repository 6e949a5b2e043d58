//! Procedural multi-class shape scenes for desk-scale episodes.
//!
//! Every image holds several shapes drawn from a fixed catalogue. Class
//! appearance (hue, saturation, brightness, texture) is re-drawn per image and
//! shared by all instances of a class within that image, so instances differ
//! strongly across images but agree inside one image. Object size follows a
//! log-uniform scale range.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fold::ClassId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Ring,
    Triangle,
    Rectangle,
    Cross,
    Star,
    Ellipse,
    LShape,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Ring,
        ShapeKind::Triangle,
        ShapeKind::Rectangle,
        ShapeKind::Cross,
        ShapeKind::Star,
        ShapeKind::Ellipse,
        ShapeKind::LShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Ring => "ring",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::LShape => "l_shape",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Membership test in object-local coordinates (unit radius).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Triangle => {
                let s3 = 3f64.sqrt();
                v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0
            }
            ShapeKind::Rectangle => u.abs() <= 0.95 && v.abs() <= 0.6,
            ShapeKind::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 1.0)
            }
            ShapeKind::Star => {
                let r = (u * u + v * v).sqrt();
                let th = v.atan2(u);
                r <= 0.45 + 0.55 * (2.5 * th).cos().abs().powi(2)
            }
            ShapeKind::Ellipse => u * u + (v / 0.5) * (v / 0.5) <= 1.0,
            ShapeKind::LShape => {
                ((-0.9..=-0.25).contains(&u) && v.abs() <= 0.9)
                    || (u.abs() <= 0.9 && (-0.9..=-0.25).contains(&v))
            }
        }
    }

    /// Base hue in turns; classes are spread around the color wheel.
    fn hue(self) -> f64 {
        Self::ALL.iter().position(|&k| k == self).unwrap_or(0) as f64 / 8.0
    }

    /// Texture frequency and orientation characteristic of the class.
    fn texture(self) -> (f64, f64) {
        let i = Self::ALL.iter().position(|&k| k == self).unwrap_or(0) as f64;
        (0.6 + 0.25 * (i % 4.0), i * PI / 8.0)
    }
}

/// Per-class appearance ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceJitter {
    /// Max absolute hue shift, in turns.
    pub hue: f64,
    pub saturation: (f64, f64),
    pub value: (f64, f64),
    /// Linear size multiplier range (sampled log-uniformly).
    pub scale: (f64, f64),
    /// Max absolute rotation, radians.
    pub rotation: f64,
    /// Amplitude of the class texture pattern.
    pub texture: f64,
}

impl Default for AppearanceJitter {
    fn default() -> Self {
        Self {
            hue: 0.05,
            saturation: (0.45, 0.95),
            value: (0.45, 0.95),
            scale: (0.6, 1.8),
            rotation: PI,
            texture: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub shape_classes: Vec<ShapeKind>,
    pub n_images: usize,
    pub image_size: usize,
    pub shapes_per_image: (usize, usize),
    /// Either one entry per class or a single entry shared by all classes.
    pub appearance_jitter: Vec<AppearanceJitter>,
    /// Object radius at scale 1, as a fraction of the image size.
    pub base_radius: f64,
    /// Amplitude of per-pixel sensor noise on the whole image.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            shape_classes: ShapeKind::ALL.to_vec(),
            n_images: 600,
            image_size: 64,
            shapes_per_image: (2, 3),
            appearance_jitter: vec![AppearanceJitter::default()],
            base_radius: 0.18,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("synthetic spec: {m}")));
        if self.shape_classes.len() < 2 {
            return bad("need at least two shape classes");
        }
        let (lo, hi) = self.shapes_per_image;
        if lo < 2 || hi < lo {
            return bad("shapes_per_image must satisfy 2 <= min <= max");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        let nj = self.appearance_jitter.len();
        if nj != 1 && nj != self.shape_classes.len() {
            return bad("appearance_jitter needs one entry or one per class");
        }
        for j in &self.appearance_jitter {
            if !(j.scale.0 > 0.0 && j.scale.1 >= j.scale.0) {
                return bad("scale range must be positive and ordered");
            }
        }
        if !(self.base_radius > 0.0 && self.base_radius < 0.5) {
            return bad("base_radius must lie in (0, 0.5)");
        }
        Ok(())
    }

    fn jitter(&self, class_idx: usize) -> &AppearanceJitter {
        if self.appearance_jitter.len() == 1 {
            &self.appearance_jitter[0]
        } else {
            &self.appearance_jitter[class_idx]
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.shape_classes.iter().map(|k| k.name().to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: ClassId,
    pub scale: f64,
    pub radius_px: f64,
    pub rotation: f64,
    /// Pixels the object covers on its own.
    pub drawn_area: usize,
    /// Pixels still showing after later objects were painted over it.
    pub visible_area: usize,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Class ids present in the mask, ascending.
    pub classes: Vec<ClassId>,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMetadata {
    pub spec: SyntheticDatasetSpec,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug)]
pub struct GenerationReport {
    pub metadata: SyntheticMetadata,
    pub warnings: Vec<String>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

struct Placed {
    kind: ShapeKind,
    class: ClassId,
    cx: f64,
    cy: f64,
    r: f64,
    rot: f64,
    scale: f64,
}

/// Renders one scene; returns RGB pixels, the class mask and object records.
fn render(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<ClassId>, Vec<ObjectRecord>) {
    let n = spec.image_size;
    let nf = n as f64;
    let ncls = spec.shape_classes.len();

    // Background: low-saturation gradient.
    let bg_h = rng.gen_range(0.0..1.0);
    let c0 = hsv_to_rgb(bg_h, rng.gen_range(0.0..0.25), rng.gen_range(0.15..0.55));
    let c1 = hsv_to_rgb(bg_h + rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.25), rng.gen_range(0.15..0.55));
    let ang = rng.gen_range(0.0..2.0 * PI);
    let (ga, gb) = (ang.cos(), ang.sin());
    let mut rgb: Vec<[f64; 3]> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 / nf - 0.5, (i % n) as f64 / nf - 0.5);
            let t = (0.5 + ga * x + gb * y).clamp(0.0, 1.0);
            [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
        })
        .collect();
    let mut mask = vec![0 as ClassId; n * n];

    // Per-image class appearance.
    let looks: Vec<[f64; 3]> = (0..ncls)
        .map(|ci| {
            let j = spec.jitter(ci);
            let h = spec.shape_classes[ci].hue() + rng.gen_range(-j.hue..=j.hue);
            let s = rng.gen_range(j.saturation.0..=j.saturation.1);
            let v = rng.gen_range(j.value.0..=j.value.1);
            hsv_to_rgb(h, s, v)
        })
        .collect();

    let count = rng.gen_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let first = rng.gen_range(0..ncls);
    let second = (first + rng.gen_range(1..ncls)) % ncls;
    let mut placed: Vec<Placed> = Vec::new();
    for o in 0..count {
        let ci = match o {
            0 => first,
            1 => second,
            _ => rng.gen_range(0..ncls),
        };
        let j = *spec.jitter(ci);
        for attempt in 0..60 {
            // Shrink the draw on repeated collisions so crowded scenes still fit.
            let shrink = 1.0 - 0.01 * attempt as f64;
            let scale = log_uniform(rng, j.scale) * shrink;
            let r = (spec.base_radius * nf * scale).max(2.0);
            let margin = r.min(nf / 2.0 - 1.0);
            let cx = rng.gen_range(margin..=nf - margin);
            let cy = rng.gen_range(margin..=nf - margin);
            let clear = placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= 0.85 * (p.r + r));
            if clear {
                placed.push(Placed {
                    kind: spec.shape_classes[ci],
                    class: (ci + 1) as ClassId,
                    cx,
                    cy,
                    r,
                    rot: rng.gen_range(-j.rotation..=j.rotation),
                    scale,
                });
                break;
            }
        }
    }

    let mut records = Vec::with_capacity(placed.len());
    let mut owner = vec![usize::MAX; n * n];
    for (oi, p) in placed.iter().enumerate() {
        let ci = p.class as usize - 1;
        let j = spec.jitter(ci);
        let (freq, tex_ang) = p.kind.texture();
        let base = looks[ci];
        let tint: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-0.03..0.03));
        let (cr, sr) = (p.rot.cos(), p.rot.sin());
        let (tc, ts) = (tex_ang.cos(), tex_ang.sin());
        let y0 = (p.cy - p.r - 1.0).floor().max(0.0) as usize;
        let y1 = ((p.cy + p.r + 1.0).ceil() as usize).min(n);
        let x0 = (p.cx - p.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((p.cx + p.r + 1.0).ceil() as usize).min(n);
        let mut drawn = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - p.cx) / p.r;
                let dy = (y as f64 + 0.5 - p.cy) / p.r;
                let u = cr * dx + sr * dy;
                let v = -sr * dx + cr * dy;
                if !p.kind.contains(u, v) {
                    continue;
                }
                drawn += 1;
                let i = y * n + x;
                let stripe = (freq * p.r * (tc * u + ts * v)).sin();
                for c in 0..3 {
                    rgb[i][c] = base[c] + tint[c] + j.texture * stripe;
                }
                mask[i] = p.class;
                owner[i] = oi;
            }
        }
        let c = [0, 1, 2].map(|c| ((base[c] + tint[c]).clamp(0.0, 1.0) * 255.0).round() as u8);
        records.push(ObjectRecord {
            class: p.class,
            scale: p.scale,
            radius_px: p.r,
            rotation: p.rot,
            drawn_area: drawn,
            visible_area: 0,
            color: c,
        });
    }
    for &o in &owner {
        if o != usize::MAX {
            records[o].visible_area += 1;
        }
    }
    for px in rgb.iter_mut() {
        for c in px.iter_mut() {
            *c += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    (rgb, mask, records)
}

pub fn image_id(i: usize) -> String {
    format!("img_{i:05}")
}

/// Writes `root/images`, `root/masks` and `root/metadata.json`.
/// Regenerating with the same spec produces byte-identical files.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, root: &Path) -> Result<GenerationReport> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if spec.n_images < spec.shape_classes.len() * 10 {
        let w = format!(
            "{} images for {} classes: some classes may not support 5-shot episodes",
            spec.n_images,
            spec.shape_classes.len()
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let n = spec.image_size as u32;
    let mut images = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let (rgb, mask, objects) = render(spec, &mut rng);
        let id = image_id(i);
        let img = RgbImage::from_fn(n, n, |x, y| {
            let p = rgb[(y * n + x) as usize];
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let ip = img_dir.join(format!("{id}.png"));
        img.save(&ip).map_err(|e| Error::Image { path: ip.clone(), source: e })?;
        let mut classes: Vec<ClassId> = mask.iter().copied().filter(|&c| c != 0).collect();
        classes.sort_unstable();
        classes.dedup();
        let mp = mask_dir.join(format!("{id}.png"));
        GrayImage::from_raw(n, n, mask)
            .expect("mask size")
            .save(&mp)
            .map_err(|e| Error::Image { path: mp.clone(), source: e })?;
        images.push(ImageRecord { id, classes, objects });
    }
    let metadata = SyntheticMetadata {
        spec: spec.clone(),
        class_names: spec.class_names(),
        images,
    };
    let mp = root.join("metadata.json");
    let text = serde_json::to_string_pretty(&metadata).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(GenerationReport { metadata, warnings })
}

pub fn load_metadata(root: &Path) -> Result<SyntheticMetadata> {
    let p = root.join("metadata.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

/// Fold file text for a synthetic corpus: `n_folds` consecutive blocks of
/// testing classes, everything else for training.
pub fn synthetic_fold_file(spec: &SyntheticDatasetSpec, test_per_fold: usize) -> String {
    let names = spec.class_names();
    let quote = |v: &[String]| {
        v.iter().map(|n| format!("\"{n}\"")).collect::<Vec<_>>().join(", ")
    };
    let mut out = format!("classes = [{}]\n", quote(&names));
    let n_folds = names.len() / test_per_fold.max(1);
    for f in 0..n_folds {
        let test: Vec<String> = names[f * test_per_fold..(f + 1) * test_per_fold].to_vec();
        let train: Vec<String> = names.iter().filter(|n| !test.contains(n)).cloned().collect();
        out.push_str(&format!(
            "\n[fold.{f}]\ntrain = [{}]\ntest = [{}]\n",
            quote(&train),
            quote(&test)
        ));
    }
    out
}
