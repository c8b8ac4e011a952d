//! Slide-to-patch pipeline: Otsu tissue segmentation, 3×3 closing,
//! non-overlapping tiling with background rejection, slide-level
//! train/val/test splits, balanced resampling and the patch manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, PatchRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SlideImage {
    pub slide_id: String,
    pub hospital: String,
    pub class: usize,
    pub pixels: RgbImage,
}

/// Rounded mean of the three channels.
pub fn grayscale(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16 + 1) / 3) as u8)
        .collect()
}

pub fn histogram(gray: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &g in gray {
        h[g as usize] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Otsu {
    pub threshold: u8,
    /// Set when the histogram has a single occupied bin.
    pub degenerate: bool,
}

/// Between-class variance of the split {≤t, >t}, up to the constant 1/N²,
/// as the fraction (w₁·S₀ − w₀·S₁)² / (w₀·w₁).
fn split_score(w0: u64, s0: u64, w1: u64, s1: u64) -> (u128, u128) {
    let d = (w1 as u128 * s0 as u128).abs_diff(w0 as u128 * s1 as u128);
    (d, w0 as u128 * w1 as u128)
}

fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let mask = u64::MAX as u128;
    let (a1, a0) = (a >> 64, a & mask);
    let (b1, b0) = (b >> 64, b & mask);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & mask) + (p10 & mask);
    let lo = (p00 & mask) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// d₁²/q₁ > d₂²/q₂ in exact arithmetic (all d < 2^64).
fn score_greater(a: (u128, u128), b: (u128, u128)) -> bool {
    mul_wide(a.0 * a.0, b.1) > mul_wide(b.0 * b.0, a.1)
}

/// Threshold t maximizing the between-class variance of {≤t, >t}; the
/// smallest t wins ties. Exact for histograms of fewer than 2^28 pixels.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<Otsu> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::invalid("otsu: empty histogram"));
    }
    if total >= 1 << 28 {
        return Err(Error::invalid("otsu: histogram exceeds 2^28 pixels"));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(Otsu {
            threshold: occupied[0] as u8,
            degenerate: true,
        });
    }
    let s_total: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut w0, mut s0) = (0u64, 0u64);
    let mut best: Option<(u8, (u128, u128))> = None;
    for t in 0..256usize {
        w0 += hist[t];
        s0 += t as u64 * hist[t];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let score = split_score(w0, s0, w1, s_total - s0);
        if best.is_none_or(|(_, b)| score_greater(score, b)) {
            best = Some((t as u8, score));
        }
    }
    Ok(Otsu {
        threshold: best.expect("two occupied bins give a valid split").0,
        degenerate: false,
    })
}

/// Which side of the threshold is tissue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Tissue is gray ≤ threshold (stained tissue absorbs light).
    #[default]
    DarkTissue,
    BrightTissue,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; true = tissue.
    pub data: Vec<bool>,
    pub threshold: u8,
}

impl TissueMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>, threshold: u8) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("mask of {} cells for {rows}x{cols}", data.len())));
        }
        Ok(TissueMask {
            rows,
            cols,
            data,
            threshold,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }
}

pub fn tissue_mask(img: &RgbImage, polarity: Polarity) -> Result<(TissueMask, Otsu)> {
    let gray = grayscale(img);
    let otsu = otsu_threshold(&histogram(&gray))?;
    let t = otsu.threshold;
    let data = gray
        .iter()
        .map(|&g| match polarity {
            Polarity::DarkTissue => g <= t,
            Polarity::BrightTissue => g > t,
        })
        .collect();
    Ok((TissueMask::new(img.height() as usize, img.width() as usize, data, t)?, otsu))
}

/// 3×3 window reduction; pixels outside the mask are skipped.
fn window(mask: &TissueMask, any: bool) -> Vec<bool> {
    let (rows, cols) = (mask.rows as isize, mask.cols as isize);
    let mut out = Vec::with_capacity(mask.data.len());
    for r in 0..rows {
        for c in 0..cols {
            let mut hit = !any;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (y, x) = (r + dr, c + dc);
                    if y < 0 || x < 0 || y >= rows || x >= cols {
                        continue;
                    }
                    let v = mask.data[(y * cols + x) as usize];
                    if any && v {
                        hit = true;
                    } else if !any && !v {
                        hit = false;
                    }
                }
            }
            out.push(hit);
        }
    }
    out
}

/// Dilation then erosion with a 3×3 square. Out-of-image pixels are ignored
/// by both, so the result always contains the input.
pub fn morphological_close(mask: &TissueMask) -> TissueMask {
    let dilated = TissueMask {
        data: window(mask, true),
        ..mask.clone()
    };
    TissueMask {
        data: window(&dilated, false),
        ..mask.clone()
    }
}

/// One grid tile of a slide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchCandidate {
    /// Grid position.
    pub row: usize,
    pub col: usize,
    pub background_fraction: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    /// Tiles before background filtering.
    pub candidates: usize,
    pub retained: Vec<PatchCandidate>,
}

/// Grid tiling from the origin with the given stride; margins that do not
/// fit a whole tile are dropped. A tile is kept iff its background fraction
/// is at most `max_background`.
pub fn extract_patches(mask: &TissueMask, size: usize, stride: usize, max_background: f64) -> Result<Extraction> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if size > mask.rows || size > mask.cols {
        return Err(Error::invalid(format!(
            "patch size {size} exceeds the {}x{} slide",
            mask.rows, mask.cols
        )));
    }
    let grid_rows = (mask.rows - size) / stride + 1;
    let grid_cols = (mask.cols - size) / stride + 1;
    let mut retained = Vec::new();
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let (y0, x0) = (gr * stride, gc * stride);
            let mut background = 0usize;
            for y in y0..y0 + size {
                background += (x0..x0 + size).filter(|&x| !mask.at(y, x)).count();
            }
            let fraction = background as f64 / (size * size) as f64;
            if fraction <= max_background {
                retained.push(PatchCandidate {
                    row: gr,
                    col: gc,
                    background_fraction: fraction as f32,
                });
            }
        }
    }
    Ok(Extraction {
        candidates: grid_rows * grid_cols,
        retained,
    })
}

/// Slide-level split: seeded shuffle, floor(n·f) slides per split, then the
/// remainder handed out one at a time to train, val, test, train, ...
pub fn split_train_val_test(slides: &[String], fractions: [f64; 3], seed: u64) -> Result<BTreeMap<String, Split>> {
    if slides.len() < 3 {
        return Err(Error::invalid(format!("need >= 3 slides to split, got {}", slides.len())));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut ids: Vec<&String> = slides.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() != slides.len() {
        return Err(Error::invalid("duplicate slide ids in split input"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let mut counts = fractions.map(|f| (n as f64 * f + 1e-9).floor() as usize);
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        counts[k % 3] += 1;
        k += 1;
    }
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut out = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, count) in splits.iter().zip(counts) {
        for id in it.by_ref().take(count) {
            out.insert(id.clone(), *split);
        }
    }
    Ok(out)
}

/// Downsample every (hospital, class) cell without replacement to the size
/// of the smallest cell (further capped at `cap`). Returns the kept indices
/// into `records` in ascending order.
pub fn balance_resample(records: &[PatchRecord], classes: usize, seed: u64, cap: usize) -> Result<Vec<usize>> {
    let hospitals: BTreeSet<&str> = records.iter().map(|r| r.hospital.as_str()).collect();
    if hospitals.is_empty() {
        return Err(Error::invalid("balance: no records"));
    }
    let mut cells: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for h in &hospitals {
        for c in 0..classes {
            cells.insert((h, c), Vec::new());
        }
    }
    for (i, r) in records.iter().enumerate() {
        cells
            .get_mut(&(r.hospital.as_str(), r.class))
            .ok_or_else(|| Error::invalid(format!("record {} has class {} >= {classes}", r.slide_id, r.class)))?
            .push(i);
    }
    if let Some(((h, c), _)) = cells.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Data(format!("balance: cell (hospital {h}, class {c}) is empty")));
    }
    let target = cells.values().map(Vec::len).min().unwrap().min(cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for members in cells.values() {
        kept.extend(index::sample(&mut rng, members.len(), target).into_iter().map(|k| members[k]));
    }
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    pub patch_size: usize,
    pub bg_max: f64,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub polarity: Polarity,
    /// Upper bound on a balanced (hospital, class) cell.
    pub cell_cap: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            patch_size: 64,
            bg_max: 0.5,
            fractions: [0.45, 0.45, 0.10],
            seed: 0,
            polarity: Polarity::DarkTissue,
            cell_cap: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub slides: usize,
    pub candidates: usize,
    pub retained: usize,
    pub written: usize,
    pub degenerate_slides: Vec<String>,
}

/// Slide files under `<root>/<hospital>/<class>/<slide-id>.png`, sorted.
pub fn discover_slides(root: &Path) -> Result<Vec<(String, usize, PathBuf)>> {
    let read = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(p, e)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for hdir in read(root)?.into_iter().filter(|p| p.is_dir()) {
        let hospital = hdir.file_name().unwrap().to_string_lossy().into_owned();
        for cdir in read(&hdir)?.into_iter().filter(|p| p.is_dir()) {
            let name = cdir.file_name().unwrap().to_string_lossy().into_owned();
            let class: usize = name
                .parse()
                .map_err(|_| Error::Data(format!("{}: class directory must be an integer", cdir.display())))?;
            for f in read(&cdir)? {
                if f.extension().is_some_and(|e| e == "png") {
                    out.push((hospital.clone(), class, f));
                }
            }
        }
    }
    Ok(out)
}

pub fn load_slide(hospital: &str, class: usize, path: &Path) -> Result<SlideImage> {
    let pixels = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    Ok(SlideImage {
        slide_id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        hospital: hospital.to_string(),
        class,
        pixels,
    })
}

/// Segment, close and tile one slide.
pub fn process_slide(slide: &SlideImage, opts: &PreprocessOptions) -> Result<(Extraction, Otsu)> {
    let (mask, otsu) = tissue_mask(&slide.pixels, opts.polarity)?;
    let closed = morphological_close(&mask);
    Ok((extract_patches(&closed, opts.patch_size, opts.patch_size, opts.bg_max)?, otsu))
}

/// Full pipeline from a slide tree to `<out>/patches/...` and
/// `<out>/manifest.jsonl`. Balancing applies to the train split only.
pub fn run_preprocess(input: &Path, out: &Path, opts: &PreprocessOptions) -> Result<PreprocessSummary> {
    let files = discover_slides(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no slides under {}", input.display())));
    }
    let mut seen = BTreeSet::new();
    // Split each hospital's slides class by class so every class reaches
    // every split whenever a class has at least three slides.
    let mut by_cell: BTreeMap<(String, usize), Vec<String>> = BTreeMap::new();
    for (h, class, f) in &files {
        let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("slide id {id} appears twice")));
        }
        by_cell.entry((h.clone(), *class)).or_default().push(id);
    }
    let mut split_of = BTreeMap::new();
    for ((h, class), ids) in &by_cell {
        let split = split_train_val_test(ids, opts.fractions, opts.seed)
            .map_err(|e| Error::Data(format!("hospital {h} class {class}: {e}")))?;
        split_of.extend(split);
    }

    let size = opts.patch_size as u32;
    let mut records = Vec::new();
    let mut crops = Vec::new();
    let mut summary = PreprocessSummary {
        slides: files.len(),
        candidates: 0,
        retained: 0,
        written: 0,
        degenerate_slides: Vec::new(),
    };
    for (h, class, f) in &files {
        let slide = load_slide(h, *class, f)?;
        let (ex, otsu) = process_slide(&slide, opts).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        if otsu.degenerate {
            summary.degenerate_slides.push(slide.slide_id.clone());
        }
        summary.candidates += ex.candidates;
        summary.retained += ex.retained.len();
        for p in ex.retained {
            let crop = image::imageops::crop_imm(&slide.pixels, p.col as u32 * size, p.row as u32 * size, size, size).to_image();
            records.push(PatchRecord {
                slide_id: slide.slide_id.clone(),
                hospital: h.clone(),
                class: *class,
                row: p.row,
                col: p.col,
                background_fraction: p.background_fraction,
                split: split_of[&slide.slide_id],
                path: PathBuf::from("patches")
                    .join(h)
                    .join(format!("{}_r{}_c{}.png", slide.slide_id, p.row, p.col)),
            });
            crops.push(crop);
        }
    }

    let classes = records.iter().map(|r| r.class + 1).max().unwrap_or(0);
    let train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    let train_records: Vec<PatchRecord> = train.iter().map(|&i| records[i].clone()).collect();
    let kept_train: BTreeSet<usize> = balance_resample(&train_records, classes, opts.seed, opts.cell_cap)?
        .into_iter()
        .map(|k| train[k])
        .collect();
    let keep: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split != Split::Train || kept_train.contains(&i))
        .collect();

    let mut final_records = Vec::with_capacity(keep.len());
    for &i in &keep {
        let path = out.join(&records[i].path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        crops[i].save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        final_records.push(records[i].clone());
    }
    summary.written = final_records.len();
    write_manifest(&final_records, &out.join("manifest.jsonl"))?;
    Ok(summary)
}
