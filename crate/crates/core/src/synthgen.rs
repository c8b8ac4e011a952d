//! Synthetic multi-hospital slides. Class fixes the morphology drawn inside
//! a tissue ellipse; hospital fixes an affine color transform applied
//! afterwards.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BACKGROUND: [f32; 3] = [236.0, 233.0, 239.0];
const STROMA: [f32; 3] = [196.0, 128.0, 170.0];
const NUCLEI: [f32; 3] = [92.0, 48.0, 142.0];

/// Per-hospital appearance: out = M·in + offset + U(−noise, noise), clamped
/// to [0, 255] and rounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTransform {
    pub mixing: [[f32; 3]; 3],
    pub offset: f32,
    pub noise: f32,
}

impl DomainTransform {
    pub fn identity() -> Self {
        DomainTransform {
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: 0.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixing.iter().flatten().any(|m| !(0.0..=1.5).contains(m)) {
            return Err(Error::Config(format!("mixing entries must lie in [0, 1.5]: {:?}", self.mixing)));
        }
        if !(self.noise >= 0.0 && self.offset.is_finite()) {
            return Err(Error::Config("noise must be >= 0 and offset finite".into()));
        }
        Ok(())
    }

    /// Sum of off-diagonal mixing weights; larger means a stronger shift.
    pub fn off_diagonal(&self) -> f32 {
        (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| self.mixing[i][j]).sum()
    }

    pub fn apply(&self, img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        let mut out = img.clone();
        for p in out.pixels_mut() {
            let x = p.0.map(f32::from);
            for c in 0..3 {
                let m = &self.mixing[c];
                let mut v = m[0] * x[0] + m[1] * x[1] + m[2] * x[2] + self.offset;
                if self.noise > 0.0 {
                    v += rng.random_range(-self.noise..=self.noise);
                }
                p.0[c] = v.clamp(0.0, 255.0).round() as u8;
            }
        }
        out
    }
}

const STRONG_MIXING: [[f32; 3]; 3] = [[0.5, 0.38, 0.1], [0.32, 0.48, 0.18], [0.36, 0.12, 0.5]];

/// (1−λ)·I + λ·M for the strong mixing matrix M.
pub fn mixing_toward_strong(lambda: f32) -> [[f32; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let eye = if i == j { 1.0 } else { 0.0 };
            *v = (1.0 - lambda) * eye + lambda * STRONG_MIXING[i][j];
        }
    }
    m
}

/// All hospitals sit on one shift axis: ordinary hospitals cycle through
/// λ = 0, 0.25, 0.5 and the last hospital takes the full strong mixing
/// (λ = 1), beyond anything seen during training.
pub fn default_transforms(hospitals: usize) -> Vec<DomainTransform> {
    let mild = [(0.0, 0.0, 4.0), (0.25, -3.0, 4.0), (0.5, -6.0, 5.0)];
    let strong = (1.0, -8.0, 6.0);
    (0..hospitals)
        .map(|h| {
            let (lambda, offset, noise) = if h + 1 == hospitals { strong } else { mild[h % mild.len()] };
            DomainTransform {
                mixing: mixing_toward_strong(lambda),
                offset,
                noise,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub hospitals: usize,
    pub classes: usize,
    pub slides_per_cell: usize,
    /// Square slide side in pixels.
    pub size: usize,
    pub seed: u64,
    /// One per hospital; empty selects [`default_transforms`].
    pub transforms: Vec<DomainTransform>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hospitals: 4,
            classes: 3,
            slides_per_cell: 12,
            size: 256,
            seed: 0,
            transforms: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.hospitals < 3 || self.classes < 2 || self.slides_per_cell == 0 {
            return Err(Error::Config(
                "synth needs >= 3 hospitals, >= 2 classes and >= 1 slide per cell".into(),
            ));
        }
        if self.size < 4 * patch_size {
            return Err(Error::Config(format!(
                "slide size {} is below 4x the patch size {patch_size}",
                self.size
            )));
        }
        if !self.transforms.is_empty() && self.transforms.len() != self.hospitals {
            return Err(Error::Config(format!(
                "{} transforms for {} hospitals",
                self.transforms.len(),
                self.hospitals
            )));
        }
        self.resolved_transforms().iter().try_for_each(DomainTransform::validate)
    }

    pub fn resolved_transforms(&self) -> Vec<DomainTransform> {
        if self.transforms.is_empty() {
            default_transforms(self.hospitals)
        } else {
            self.transforms.clone()
        }
    }

    pub fn hospital_id(h: usize) -> String {
        format!("H{h}")
    }

    pub fn slide_id(h: usize, class: usize, k: usize) -> String {
        format!("H{h}-c{class}-s{k:02}")
    }

    /// Geometry seed of one slide of the corpus.
    pub fn slide_seed(&self, h: usize, class: usize, k: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((h * 4096 + class) * 65536 + k) as u64);
        rng.random()
    }
}

fn paint(img: &mut RgbImage, x: usize, y: usize, color: [f32; 3]) {
    img.put_pixel(x as u32, y as u32, Rgb(color.map(|c| c.round() as u8)));
}

/// Blob count for blob classes; stripe classes return None.
fn blob_count(class: usize) -> Option<(usize, usize)> {
    match class {
        0 => Some((32, 48)),
        1 => Some((100, 130)),
        c if c % 2 == 1 => Some((150 + 40 * c, 190 + 40 * c)),
        _ => None,
    }
}

/// Untransformed slide: bright background, a tissue ellipse and class
/// morphology inside it (class 0 sparse blobs, class 1 dense blobs, class 2
/// stripes; further classes alternate denser blobs and finer stripes).
/// Depends only on (class, seed, size).
pub fn slide_geometry(class: usize, seed: u64, size: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let mut img = RgbImage::new(size as u32, size as u32);
    let (cx, cy) = (s * rng.random_range(0.47..0.53), s * rng.random_range(0.47..0.53));
    let (ax, ay) = (s * rng.random_range(0.40..0.46), s * rng.random_range(0.40..0.46));
    let inside = |x: f32, y: f32| ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0;
    for y in 0..size {
        for x in 0..size {
            let c = if inside(x as f32, y as f32) { STROMA } else { BACKGROUND };
            paint(&mut img, x, y, c);
        }
    }
    let scale = s / 256.0;
    match blob_count(class) {
        Some((lo, hi)) => {
            let n = rng.random_range(lo..=hi);
            for _ in 0..n {
                let (bx, by) = loop {
                    let p = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                    if inside(p.0, p.1) {
                        break p;
                    }
                };
                let r = rng.random_range(3.5..6.5) * scale;
                let (x0, x1) = ((bx - r).floor().max(0.0) as usize, ((bx + r).ceil() as usize).min(size - 1));
                let (y0, y1) = ((by - r).floor().max(0.0) as usize, ((by + r).ceil() as usize).min(size - 1));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let (fx, fy) = (x as f32, y as f32);
                        if (fx - bx).powi(2) + (fy - by).powi(2) <= r * r && inside(fx, fy) {
                            paint(&mut img, x, y, NUCLEI);
                        }
                    }
                }
            }
        }
        None => {
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let spacing = rng.random_range(13.0..19.0) * scale / (class / 2) as f32;
            let width = rng.random_range(3.0..5.0) * scale;
            let phase = rng.random_range(0.0..spacing);
            let (nx, ny) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32, y as f32);
                    let t = (fx * nx + fy * ny + phase).rem_euclid(spacing);
                    if t < width && inside(fx, fy) {
                        paint(&mut img, x, y, NUCLEI);
                    }
                }
            }
        }
    }
    img
}

/// Geometry of `class` under the hospital's transform; the transform noise
/// is seeded by (seed, hospital).
pub fn generate_slide(class: usize, hospital: usize, seed: u64, size: usize, transform: &DomainTransform) -> RgbImage {
    let geometry = slide_geometry(class, seed, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(hospital as u64 + 1);
    transform.apply(&geometry, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    pub config: SynthConfig,
    pub transforms: Vec<DomainTransform>,
    pub strong_shift_hospital: String,
    pub slides: usize,
}

/// Hospital with the largest off-diagonal mixing.
pub fn strong_shift_hospital(transforms: &[DomainTransform]) -> usize {
    let mut best = 0;
    for (h, t) in transforms.iter().enumerate() {
        if t.off_diagonal() > transforms[best].off_diagonal() {
            best = h;
        }
    }
    best
}

/// Write `<out>/<hospital>/<class>/<slide-id>.png` for every slide and
/// `<out>/corpus.json`.
pub fn generate_corpus(config: &SynthConfig, out: &Path, patch_size: usize) -> Result<CorpusDescriptor> {
    config.validate(patch_size)?;
    let transforms = config.resolved_transforms();
    let mut slides = 0;
    for (h, t) in transforms.iter().enumerate() {
        for class in 0..config.classes {
            let dir = out.join(SynthConfig::hospital_id(h)).join(class.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for k in 0..config.slides_per_cell {
                let img = generate_slide(class, h, config.slide_seed(h, class, k), config.size, t);
                let path = dir.join(format!("{}.png", SynthConfig::slide_id(h, class, k)));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                slides += 1;
            }
        }
    }
    let desc = CorpusDescriptor {
        config: config.clone(),
        strong_shift_hospital: SynthConfig::hospital_id(strong_shift_hospital(&transforms)),
        transforms,
        slides,
    };
    let path = out.join("corpus.json");
    let json = serde_json::to_string_pretty(&desc).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(desc)
}
