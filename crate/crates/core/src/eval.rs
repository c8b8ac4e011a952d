//! Slide-level prediction, accuracy tables and PCA embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::{forward_pass, ModelConfig, ParamSet, Stage};
use crate::tensor::tape::softmax_with_temperature;
use crate::trainer::Regime;

/// Patches per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub hospital: String,
    pub class: usize,
    pub probabilities: Vec<f32>,
    pub predicted: usize,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of the patch probability vectors of one slide.
pub fn aggregate_slide(
    patches: &[Vec<f32>],
    slide_id: &str,
    hospital: &str,
    class: usize,
) -> Result<SlidePrediction> {
    let Some(first) = patches.first() else {
        return Err(Error::invalid(format!("slide {slide_id} has no patches")));
    };
    let c = first.len();
    let mut acc = vec![0f64; c];
    for p in patches {
        if p.len() != c {
            return Err(Error::invalid(format!("slide {slide_id}: ragged probability vectors")));
        }
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += v as f64;
        }
    }
    let probabilities: Vec<f32> = acc.iter().map(|a| (a / patches.len() as f64) as f32).collect();
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        hospital: hospital.to_string(),
        class,
        predicted: argmax(&probabilities),
        probabilities,
    })
}

/// Percentage of slides whose predicted class equals the true class.
pub fn slide_accuracy(predictions: &[SlidePrediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("slide accuracy of an empty prediction set"));
    }
    let correct = predictions.iter().filter(|p| p.predicted == p.class).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

fn forward_chunks(config: &ModelConfig, params: &ParamSet, data: &PatchSet, indices: &[usize], stage: Stage) -> Result<Vec<Vec<f32>>> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut out = forward_pass(config, params, &data.images(chunk), stage)?;
        if stage == Stage::Logits {
            out = softmax_with_temperature(&out, 1.0)?;
        }
        let width = out.shape()[1];
        rows.extend(out.data().chunks(width).map(<[f32]>::to_vec));
    }
    Ok(rows)
}

/// Softmax probabilities of the given patches, averaged per slide. Slides
/// come back in slide-id order.
pub fn predict_slides(
    config: &ModelConfig,
    params: &ParamSet,
    data: &PatchSet,
    indices: &[usize],
) -> Result<Vec<SlidePrediction>> {
    let probs = forward_chunks(config, params, data, indices, Stage::Logits)?;
    let mut by_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, &i) in indices.iter().enumerate() {
        by_slide.entry(&data.records()[i].slide_id).or_default().push(k);
    }
    by_slide
        .into_iter()
        .map(|(slide, ks)| {
            let rec = &data.records()[indices[ks[0]]];
            let patches: Vec<Vec<f32>> = ks.iter().map(|&k| probs[k].clone()).collect();
            aggregate_slide(&patches, slide, &rec.hospital, rec.class)
        })
        .collect()
}

/// Slide-level accuracy of one regime on one held-out hospital.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub regime: Regime,
    pub slide_count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// k rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// n rows of length k.
    pub projections: Vec<Vec<f64>>,
}

/// Top-k principal components from a full symmetric eigendecomposition of
/// the sample covariance.
pub fn pca_project(samples: &[Vec<f32>], k: usize) -> Result<Pca> {
    let n = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("pca needs at least two samples of equal, nonzero width"));
    }
    if k > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "pca: k = {k} exceeds min(samples - 1, dims) = {}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0f64; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let total: f64 = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            // Sign convention: largest-magnitude entry positive.
            let lead = v.iter().copied().fold(0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let explained_ratio = order[..k]
        .iter()
        .map(|&c| if total > 0.0 { eig.eigenvalues[c].max(0.0) / total } else { 0.0 })
        .collect();
    let projections = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, w)| w * centered[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_ratio,
        projections,
    })
}

/// Feature vectors (or their k-component PCA projection) of the given
/// patches as CSV in the given order. With k > 0 each row also carries the
/// mean projection of its slide.
pub fn embeddings_csv(
    config: &ModelConfig,
    params: &ParamSet,
    data: &PatchSet,
    indices: &[usize],
    k: usize,
) -> Result<String> {
    let feats = forward_chunks(config, params, data, indices, Stage::Features)?;
    let mut out = String::from("slide_id,hospital,class");
    let rows: Vec<Vec<f64>> = if k == 0 {
        for j in 0..config.feature_dim {
            let _ = write!(out, ",f{j}");
        }
        feats.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect()
    } else {
        for j in 0..k {
            let _ = write!(out, ",pc{}", j + 1);
        }
        for j in 0..k {
            let _ = write!(out, ",slide_pc{}", j + 1);
        }
        let pca = pca_project(&feats, k)?;
        let mut slide_sum: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (p, &i) in pca.projections.iter().zip(indices) {
            let e = slide_sum
                .entry(&data.records()[i].slide_id)
                .or_insert_with(|| (vec![0.0; k], 0));
            e.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        pca.projections
            .iter()
            .zip(indices)
            .map(|(p, &i)| {
                let (sum, count) = &slide_sum[data.records()[i].slide_id.as_str()];
                p.iter().copied().chain(sum.iter().map(|s| s / *count as f64)).collect()
            })
            .collect()
    };
    out.push('\n');
    for (row, &i) in rows.iter().zip(indices) {
        let r = &data.records()[i];
        let _ = write!(out, "{},{},{}", r.slide_id, r.hospital, r.class);
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(
    config: &ModelConfig,
    params: &ParamSet,
    data: &PatchSet,
    indices: &[usize],
    k: usize,
    path: &Path,
) -> Result<()> {
    let csv = embeddings_csv(config, params, data, indices, k)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub csv: String,
    pub text: String,
}

fn hundredths(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

fn fmt_hundredths(v: i64, signed: bool) -> String {
    let sign = if v < 0 {
        "-"
    } else if signed {
        "+"
    } else {
        ""
    };
    format!("{sign}{}.{:02}", v.abs() / 100, v.abs() % 100)
}

fn cell(v: Option<i64>, signed: bool) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| fmt_hundredths(v, signed))
}

/// One row per held-out hospital (first-appearance order) with
/// hospital-agnostic and baseline accuracy and their difference, followed by
/// a mean row. Differences are taken on the values rounded to hundredths, so
/// published two-decimal tables reproduce exactly.
pub fn render_report(reports: &[FoldReport]) -> Result<RenderedReport> {
    if reports.is_empty() {
        return Err(Error::invalid("report needs at least one fold"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<&str, [Option<i64>; 2]> = BTreeMap::new();
    for r in reports {
        if !order.contains(&r.held_out.as_str()) {
            order.push(&r.held_out);
        }
        let slot = match r.regime {
            Regime::Masf => 0,
            Regime::Baseline => 1,
        };
        cells.entry(&r.held_out).or_default()[slot] = Some(hundredths(r.accuracy));
    }
    let mut rows: Vec<[String; 4]> = Vec::new();
    let mut sums = [(0i64, 0i64); 3];
    for h in &order {
        let [a, b] = cells[h];
        let d = a.zip(b).map(|(a, b)| a - b);
        for (s, v) in sums.iter_mut().zip([a, b, d]) {
            if let Some(v) = v {
                s.0 += v;
                s.1 += 1;
            }
        }
        rows.push([h.to_string(), cell(a, false), cell(b, false), cell(d, true)]);
    }
    let mean = |(s, n): (i64, i64)| (n > 0).then(|| (s as f64 / n as f64).round() as i64);
    rows.push([
        "mean".to_string(),
        cell(mean(sums[0]), false),
        cell(mean(sums[1]), false),
        cell(mean(sums[2]), true),
    ]);

    let header = ["hold_out", "hospital_agnostic", "baseline", "delta"];
    let mut csv = header.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: [&str; 4]| {
        let mut s = format!("{:<w$}", cols[0], w = widths[0]);
        for (c, w) in cols[1..].iter().zip(&widths[1..]) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        s
    };
    let mut text = line(header);
    text.push_str(&"-".repeat(text.len() - 1));
    text.push('\n');
    for r in &rows {
        text.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
    }
    text.push_str("\nBoth regimes of a fold start from the same initialization seed.\n");
    Ok(RenderedReport { csv, text })
}
