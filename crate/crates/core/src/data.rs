//! Patch records, the JSON Lines manifest and an in-memory patch store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One extracted patch. Field order is the manifest column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub slide_id: String,
    pub hospital: String,
    pub class: usize,
    pub row: usize,
    pub col: usize,
    pub background_fraction: f32,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

impl PatchRecord {
    fn sort_key(&self) -> (&str, &str, usize, usize) {
        (&self.hospital, &self.slide_id, self.row, self.col)
    }
}

/// Canonical order: (hospital, slide, row, col); stable.
pub fn sort_records(records: &mut [PatchRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub fn write_manifest(records: &[PatchRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &sorted {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Patches held in memory as 8-bit CHW pixels next to their records.
#[derive(Clone, Debug)]
pub struct PatchSet {
    records: Vec<PatchRecord>,
    shape: [usize; 3],
    pixels: Vec<u8>,
}

impl PatchSet {
    /// `pixels` is CHW per patch, patches concatenated in record order.
    pub fn new(records: Vec<PatchRecord>, shape: [usize; 3], pixels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * records.len() {
            return Err(Error::Data(format!(
                "{} pixels for {} patches of shape {shape:?}",
                pixels.len(),
                records.len()
            )));
        }
        Ok(PatchSet {
            records,
            shape,
            pixels,
        })
    }

    /// Read a manifest and every patch PNG it references.
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let mut shape = None;
        let mut pixels = Vec::new();
        for r in &records {
            let path = root.join(&r.path);
            let img = image::open(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let s = *shape.get_or_insert([3, h, w]);
            if s != [3, h, w] {
                return Err(Error::Image {
                    path,
                    reason: format!("patch is {w}x{h}, expected {}x{}", s[2], s[1]),
                });
            }
            let raw = img.as_raw();
            for c in 0..3 {
                pixels.extend((0..h * w).map(|i| raw[i * 3 + c]));
            }
        }
        let shape = shape.ok_or_else(|| Error::Data(format!("{} lists no patches", manifest.display())))?;
        PatchSet::new(records, shape, pixels)
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let per: usize = self.shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// (n, c, h, w) batch scaled to [0, 1].
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend(self.pixels(i).iter().map(|&v| v as f32 / 255.0));
        }
        let shape = vec![indices.len(), self.shape[0], self.shape[1], self.shape[2]];
        Tensor::new(shape, data).expect("patch batch shape")
    }

    pub fn hospitals(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.hospital.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Indices grouped by slide id, restricted to `filter`.
    pub fn slides(&self, filter: impl Fn(&PatchRecord) -> bool) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if filter(r) {
                out.entry(r.slide_id.clone()).or_default().push(i);
            }
        }
        out
    }
}
