//! Cross-entropy, soft-confusion hospital alignment and triplet losses.
//!
//! Each loss has a tape form (used by the trainer, differentiable) and a
//! value form that evaluates the same tape code on constants.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Probabilities are floored here before renormalizing a soft-confusion row.
pub const CONFUSION_FLOOR: f32 = 1e-12;

/// One hospital's labeled images.
#[derive(Clone, Debug)]
pub struct HospitalGroup {
    pub hospital: String,
    /// (n, channels, rows, cols)
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledBatch {
    pub groups: Vec<HospitalGroup>,
}

impl LabeledBatch {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::invalid("labeled batch has no hospital groups"));
        }
        for g in &self.groups {
            if g.labels.is_empty() {
                return Err(Error::invalid(format!("hospital {} has an empty group", g.hospital)));
            }
            if g.images.shape()[0] != g.labels.len() {
                return Err(Error::invalid(format!(
                    "hospital {}: {} images but {} labels",
                    g.hospital,
                    g.images.shape()[0],
                    g.labels.len()
                )));
            }
            if let Some(bad) = g.labels.iter().find(|&&y| y >= classes) {
                return Err(Error::invalid(format!(
                    "hospital {}: label {bad} outside [0, {classes})",
                    g.hospital
                )));
            }
        }
        Ok(())
    }
}

/// Equal-weight average over groups of the per-group mean of −log p̂_y.
pub fn cross_entropy_tape(tape: &mut Tape, logits: &[Var], labels: &[&[usize]]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::invalid("cross_entropy: need one label set per logit group"));
    }
    let mut total: Option<Var> = None;
    for (&l, &y) in logits.iter().zip(labels) {
        if y.is_empty() {
            return Err(Error::invalid("cross_entropy: empty hospital group"));
        }
        let ls = tape.log_softmax(l, 1.0)?;
        let picked = tape.pick(ls, y)?;
        let m = tape.mean(picked);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(tape.scale(total.unwrap(), -1.0 / logits.len() as f32))
}

/// Soft confusion rows of one hospital on a tape; `None` marks an absent
/// class.
#[derive(Clone, Debug)]
pub struct SoftConfusionVars {
    pub hospital: String,
    pub rows: Vec<Option<Var>>,
    pub counts: Vec<usize>,
}

pub fn soft_confusion_tape(
    tape: &mut Tape,
    hospital: &str,
    logits: Var,
    labels: &[usize],
    classes: usize,
    tau: f32,
) -> Result<SoftConfusionVars> {
    if !(tau > 1.0) {
        return Err(Error::invalid(format!("soft confusion needs tau > 1, got {tau}")));
    }
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != classes {
        return Err(Error::invalid(format!(
            "soft confusion: logits {shape:?} for {} labels and {classes} classes",
            labels.len()
        )));
    }
    let probs = tape.softmax(logits, tau)?;
    let mut rows = Vec::with_capacity(classes);
    let mut counts = Vec::with_capacity(classes);
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        counts.push(idx.len());
        if idx.is_empty() {
            rows.push(None);
            continue;
        }
        let sel = tape.select_rows(probs, &idx)?;
        let mean = tape.mean_rows(sel)?;
        let floored = tape.clamp_min(mean, CONFUSION_FLOOR);
        let z = tape.sum(floored);
        rows.push(Some(tape.div(floored, z)?));
    }
    Ok(SoftConfusionVars {
        hospital: hospital.to_string(),
        rows,
        counts,
    })
}

/// ½[KL(p‖q) + KL(q‖p)] for two probability vectors on the tape.
fn symmetric_kl(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let lp = tape.log(p);
    let lq = tape.log(q);
    let d_pq = tape.sub(lp, lq)?;
    let d_qp = tape.sub(lq, lp)?;
    let t_pq = tape.mul(p, d_pq)?;
    let t_qp = tape.mul(q, d_qp)?;
    let kl_pq = tape.sum(t_pq);
    let kl_qp = tape.sum(t_qp);
    let s = tape.add(kl_pq, kl_qp)?;
    Ok(tape.scale(s, 0.5))
}

pub fn alignment_pair_tape(tape: &mut Tape, a: &SoftConfusionVars, b: &SoftConfusionVars) -> Result<Var> {
    if a.rows.len() != b.rows.len() || a.rows.is_empty() {
        return Err(Error::invalid("alignment: confusion matrices disagree on class count"));
    }
    let classes = a.rows.len();
    let mut total: Option<Var> = None;
    for c in 0..classes {
        let (Some(p), Some(q)) = (a.rows[c], b.rows[c]) else {
            let who = if a.rows[c].is_none() { &a.hospital } else { &b.hospital };
            return Err(Error::invalid(format!("alignment: class {c} absent in hospital {who}")));
        };
        let term = symmetric_kl(tape, p, q)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / classes as f32))
}

/// Mean of the pairwise alignment over every (meta-train, meta-test) pair.
pub fn alignment_total_tape(
    tape: &mut Tape,
    meta_train: &[SoftConfusionVars],
    meta_test: &[SoftConfusionVars],
) -> Result<Var> {
    if meta_train.is_empty() || meta_test.is_empty() {
        return Err(Error::invalid("alignment: meta-train and meta-test must be non-empty"));
    }
    let mut total: Option<Var> = None;
    for a in meta_train {
        for b in meta_test {
            let term = alignment_pair_tape(tape, a, b)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
    }
    let pairs = (meta_train.len() * meta_test.len()) as f32;
    Ok(tape.scale(total.unwrap(), 1.0 / pairs))
}

/// Mean hinge `max(‖a−p‖² − ‖a−n‖² + margin, 0)` over rows of (B, d)
/// embeddings.
pub fn triplet_tape(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f32) -> Result<Var> {
    if margin < 0.0 {
        return Err(Error::invalid(format!("triplet margin must be >= 0, got {margin}")));
    }
    let d_ap = tape.sq_dist(anchor, positive)?;
    let d_an = tape.sq_dist(anchor, negative)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Evaluated soft confusion matrix of one hospital.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftConfusionMatrix {
    pub hospital: String,
    /// `rows[c]` is `s_c`, or `None` when class `c` had no instances.
    pub rows: Vec<Option<Vec<f32>>>,
    pub counts: Vec<usize>,
}

impl SoftConfusionMatrix {
    /// Build directly from per-class probability rows (all classes present).
    pub fn from_rows(hospital: &str, rows: Vec<Vec<f32>>) -> Self {
        let counts = vec![1; rows.len()];
        SoftConfusionMatrix {
            hospital: hospital.to_string(),
            rows: rows.into_iter().map(Some).collect(),
            counts,
        }
    }

    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&c| self.rows[c].is_none()).collect()
    }

    fn to_tape(&self, tape: &mut Tape) -> SoftConfusionVars {
        SoftConfusionVars {
            hospital: self.hospital.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.as_ref().map(|v| tape.constant(Tensor::from_vec(v.clone()))))
                .collect(),
            counts: self.counts.clone(),
        }
    }
}

/// Soft confusion from precomputed logits (n, C).
pub fn soft_confusion_from_logits(
    hospital: &str,
    logits: &Tensor,
    labels: &[usize],
    classes: usize,
    tau: f32,
) -> Result<SoftConfusionMatrix> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let vars = soft_confusion_tape(&mut tape, hospital, l, labels, classes, tau)?;
    Ok(SoftConfusionMatrix {
        hospital: hospital.to_string(),
        rows: vars
            .rows
            .iter()
            .map(|r| r.map(|v| tape.value(v).data().to_vec()))
            .collect(),
        counts: vars.counts,
    })
}

/// Soft confusion of one hospital group under the given parameters.
pub fn soft_confusion(
    config: &ModelConfig,
    params: &ParamSet,
    group: &HospitalGroup,
    tau: f32,
) -> Result<SoftConfusionMatrix> {
    let logits = model::forward_pass(config, params, &group.images, model::Stage::Logits)?;
    soft_confusion_from_logits(&group.hospital, &logits, &group.labels, config.classes, tau)
}

pub fn hospital_alignment_pair(a: &SoftConfusionMatrix, b: &SoftConfusionMatrix) -> Result<f32> {
    let mut tape = Tape::new();
    let (va, vb) = (a.to_tape(&mut tape), b.to_tape(&mut tape));
    let out = alignment_pair_tape(&mut tape, &va, &vb)?;
    tape.value(out).item()
}

pub fn hospital_alignment_total(
    meta_train: &[SoftConfusionMatrix],
    meta_test: &[SoftConfusionMatrix],
) -> Result<f32> {
    let mut tape = Tape::new();
    let tr: Vec<_> = meta_train.iter().map(|m| m.to_tape(&mut tape)).collect();
    let te: Vec<_> = meta_test.iter().map(|m| m.to_tape(&mut tape)).collect();
    let out = alignment_total_tape(&mut tape, &tr, &te)?;
    tape.value(out).item()
}

/// Cross-entropy of a labeled batch under the given parameters.
pub fn cross_entropy(config: &ModelConfig, params: &ParamSet, batch: &LabeledBatch) -> Result<f32> {
    batch.validate(config.classes)?;
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let mut logits = Vec::new();
    for g in &batch.groups {
        let x = tape.constant(g.images.clone());
        let f = model::features(&mut tape, config, &p, x)?;
        logits.push(model::classifier(&mut tape, &p, f)?);
    }
    let labels: Vec<&[usize]> = batch.groups.iter().map(|g| g.labels.as_slice()).collect();
    let out = cross_entropy_tape(&mut tape, &logits, &labels)?;
    tape.value(out).item()
}

/// Cross-entropy from per-group logits (no model involved).
pub fn cross_entropy_from_logits(logits: &[Tensor], labels: &[Vec<usize>]) -> Result<f32> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = logits.iter().map(|l| tape.constant(l.clone())).collect();
    let labels: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let out = cross_entropy_tape(&mut tape, &vars, &labels)?;
    tape.value(out).item()
}

/// Triplet loss on precomputed (B, d) embeddings.
pub fn triplet_loss_from_embeddings(anchor: &Tensor, positive: &Tensor, negative: &Tensor, margin: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(anchor.clone());
    let p = tape.constant(positive.clone());
    let n = tape.constant(negative.clone());
    let out = triplet_tape(&mut tape, a, p, n, margin)?;
    tape.value(out).item()
}

/// Class and hospital of one candidate instance for triplet sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletCandidate {
    pub class: usize,
    pub hospital: usize,
}

/// Indices into the candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Image triples with their class and hospital ids.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    pub anchor_meta: Vec<TripletCandidate>,
    pub positive_meta: Vec<TripletCandidate>,
    pub negative_meta: Vec<TripletCandidate>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchor_meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_meta.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.anchor_meta.len();
        if b == 0 {
            return Err(Error::invalid("triplet batch is empty"));
        }
        if self.positive_meta.len() != b
            || self.negative_meta.len() != b
            || [&self.anchors, &self.positives, &self.negatives]
                .iter()
                .any(|t| t.shape()[0] != b)
        {
            return Err(Error::invalid("triplet batch parts disagree on size"));
        }
        check_triplet_labels(&self.anchor_meta, &self.positive_meta, &self.negative_meta)
    }
}

fn check_triplet_labels(a: &[TripletCandidate], p: &[TripletCandidate], n: &[TripletCandidate]) -> Result<()> {
    for (b, ((a, p), n)) in a.iter().zip(p).zip(n).enumerate() {
        if a.class != p.class || a.class == n.class {
            return Err(Error::invalid(format!(
                "triplet {b}: classes anchor {} positive {} negative {}",
                a.class, p.class, n.class
            )));
        }
    }
    Ok(())
}

/// Triplet loss of a batch under the given parameters.
pub fn triplet_loss(config: &ModelConfig, params: &ParamSet, batch: &TripletBatch, margin: f32) -> Result<f32> {
    batch.validate()?;
    let embed = |x: &Tensor| model::forward_pass(config, params, x, model::Stage::Metric);
    triplet_loss_from_embeddings(&embed(&batch.anchors)?, &embed(&batch.positives)?, &embed(&batch.negatives)?, margin)
}

/// Draw `count` triplets: uniform anchors, a positive of the anchor's class
/// from another hospital when one exists (else the same hospital), and a
/// negative of any other class from any hospital.
pub fn sample_triplets(pool: &[TripletCandidate], count: usize, seed: u64) -> Result<Vec<TripletIndices>> {
    if count == 0 {
        return Err(Error::invalid("triplet count must be >= 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in pool.iter().enumerate() {
        by_class.entry(c.class).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::invalid("triplet sampling needs at least two classes"));
    }
    if pool.iter().all(|c| by_class[&c.class].len() < 2) {
        return Err(Error::invalid("no class has two instances; no positive exists"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let anchor = rng.random_range(0..pool.len());
        let a = pool[anchor];
        let same = &by_class[&a.class];
        if same.len() < 2 {
            continue;
        }
        let cross: Vec<usize> = same.iter().copied().filter(|&j| pool[j].hospital != a.hospital).collect();
        let positive = if cross.is_empty() {
            let local: Vec<usize> = same.iter().copied().filter(|&j| j != anchor).collect();
            local[rng.random_range(0..local.len())]
        } else {
            cross[rng.random_range(0..cross.len())]
        };
        let negatives = pool.len() - same.len();
        let mut k = rng.random_range(0..negatives);
        let negative = pool
            .iter()
            .enumerate()
            .filter(|(_, c)| c.class != a.class)
            .find_map(|(j, _)| {
                if k == 0 {
                    Some(j)
                } else {
                    k -= 1;
                    None
                }
            })
            .unwrap();
        out.push(TripletIndices {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits_for(probs: &[[f32; 2]]) -> Tensor {
        let data = probs.iter().flat_map(|p| [p[0].ln(), p[1].ln()]).collect();
        Tensor::new(vec![probs.len(), 2], data).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        // Near one-hot correct predictions.
        let l = Tensor::new(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
        let ce = cross_entropy_from_logits(&[l], &[vec![0, 2]]).unwrap();
        assert!(ce.abs() < 1e-6);
        let uniform = Tensor::zeros(&[4, 3]);
        let ce = cross_entropy_from_logits(&[uniform], &[vec![0, 1, 2, 1]]).unwrap();
        assert!((ce as f64 - 3f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_weights_hospitals_equally() {
        let e2 = (-2.0f32).exp();
        let e1 = (-1.0f32).exp();
        let h1 = logits_for(&[[e2, 1.0 - e2]]);
        let h2 = logits_for(&[[e1, 1.0 - e1]; 3]);
        let ce = cross_entropy_from_logits(&[h1, h2], &[vec![0], vec![0, 0, 0]]).unwrap();
        assert!((ce - 1.5).abs() < 1e-5, "{ce}");
    }

    #[test]
    fn cross_entropy_rejects_empty_group() {
        let batch = LabeledBatch {
            groups: vec![HospitalGroup {
                hospital: "H0".into(),
                images: Tensor::zeros(&[1, 3, 64, 64]),
                labels: vec![],
            }],
        };
        assert!(batch.validate(3).is_err());
        let l = Tensor::zeros(&[1, 3]);
        assert!(cross_entropy_from_logits(&[l], &[vec![]]).is_err());
    }

    #[test]
    fn soft_confusion_examples() {
        let s = soft_confusion_from_logits("H", &Tensor::zeros(&[1, 2]), &[0], 2, 2.0).unwrap();
        assert_eq!(s.rows[0].as_ref().unwrap(), &vec![0.5, 0.5]);
        assert_eq!(s.missing_classes(), vec![1]);

        let l = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let s = soft_confusion_from_logits("H", &l, &[0], 2, 2.0).unwrap();
        let e = std::f64::consts::E;
        let r = s.rows[0].as_ref().unwrap();
        assert!((r[0] as f64 - e / (e + 1.0)).abs() < 1e-6);

        // Two class-0 instances whose tau=2 softmaxes are [0.6,0.4] and [0.8,0.2].
        let l = Tensor::new(
            vec![2, 2],
            vec![2.0 * (0.6f32 / 0.4).ln(), 0.0, 2.0 * (0.8f32 / 0.2).ln(), 0.0],
        )
        .unwrap();
        let s = soft_confusion_from_logits("H", &l, &[0, 0], 2, 2.0).unwrap();
        let r = s.rows[0].as_ref().unwrap();
        assert!((r[0] - 0.7).abs() < 1e-6 && (r[1] - 0.3).abs() < 1e-6);
        assert!(soft_confusion_from_logits("H", &l, &[0, 0], 2, 1.0).is_err());
    }

    #[test]
    fn alignment_examples() {
        let a = SoftConfusionMatrix::from_rows("A", vec![vec![0.5, 0.5]]);
        let b = SoftConfusionMatrix::from_rows("B", vec![vec![0.9, 0.1]]);
        assert_eq!(hospital_alignment_pair(&a, &a).unwrap(), 0.0);
        let ab = hospital_alignment_pair(&a, &b).unwrap();
        let ba = hospital_alignment_pair(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!((ab as f64 - 0.4394).abs() < 1e-4);

        assert_eq!(hospital_alignment_total(&[a.clone()], &[b.clone()]).unwrap(), ab);
        let c = SoftConfusionMatrix::from_rows("C", vec![vec![0.2, 0.8]]);
        let ac = hospital_alignment_pair(&a, &c).unwrap();
        let bc = hospital_alignment_pair(&b, &c).unwrap();
        let total = hospital_alignment_total(&[a.clone(), b.clone()], &[c]).unwrap();
        assert!((total - (ac + bc) / 2.0).abs() < 1e-7);
        assert!(hospital_alignment_total(&[], &[b]).is_err());
    }

    #[test]
    fn alignment_rejects_missing_class() {
        let a = SoftConfusionMatrix {
            hospital: "A".into(),
            rows: vec![Some(vec![0.5, 0.5]), None],
            counts: vec![1, 0],
        };
        let b = SoftConfusionMatrix::from_rows("B", vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let err = hospital_alignment_pair(&a, &b).unwrap_err().to_string();
        assert!(err.contains("class 1") && err.contains('A'), "{err}");
    }

    fn emb(rows: &[[f32; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn triplet_examples() {
        let (a, p, n) = (emb(&[[0.0, 0.0]]), emb(&[[1.0, 0.0]]), emb(&[[0.0, 2.0]]));
        assert_eq!(triplet_loss_from_embeddings(&a, &p, &n, 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss_from_embeddings(&a, &p, &n, 4.0).unwrap(), 1.0);
        assert_eq!(triplet_loss_from_embeddings(&a, &a, &a, 10.0).unwrap(), 10.0);
        assert!(triplet_loss_from_embeddings(&a, &p, &n, -1.0).is_err());
    }

    #[test]
    fn triplet_batch_label_rule() {
        let meta = |c| TripletCandidate { class: c, hospital: 0 };
        let img = Tensor::zeros(&[1, 3, 4, 4]);
        let mut batch = TripletBatch {
            anchors: img.clone(),
            positives: img.clone(),
            negatives: img,
            anchor_meta: vec![meta(0)],
            positive_meta: vec![meta(0)],
            negative_meta: vec![meta(1)],
        };
        assert!(batch.validate().is_ok());
        batch.negative_meta = vec![meta(0)];
        assert!(batch.validate().is_err());
    }

    fn pool(hospitals: usize, classes: usize, per: usize) -> Vec<TripletCandidate> {
        let mut v = Vec::new();
        for h in 0..hospitals {
            for c in 0..classes {
                for _ in 0..per {
                    v.push(TripletCandidate { class: c, hospital: h });
                }
            }
        }
        v
    }

    #[test]
    fn sampler_rules() {
        let p = pool(3, 3, 4);
        let t = sample_triplets(&p, 1000, 17).unwrap();
        assert_eq!(t, sample_triplets(&p, 1000, 17).unwrap());
        let mut cross = 0;
        for tr in &t {
            assert_eq!(p[tr.anchor].class, p[tr.positive].class);
            assert_ne!(p[tr.anchor].class, p[tr.negative].class);
            if p[tr.anchor].hospital != p[tr.positive].hospital {
                cross += 1;
            }
        }
        assert!(cross > 900, "{cross}");

        let single = pool(1, 2, 3);
        for tr in sample_triplets(&single, 50, 3).unwrap() {
            assert_eq!(single[tr.anchor].hospital, single[tr.positive].hospital);
            assert_ne!(tr.anchor, tr.positive);
        }
    }

    #[test]
    fn sampler_resamples_or_rejects_singletons() {
        let mut p = pool(1, 1, 3);
        p.push(TripletCandidate { class: 1, hospital: 0 });
        for tr in sample_triplets(&p, 100, 5).unwrap() {
            assert_eq!(p[tr.anchor].class, 0);
        }
        let lonely = vec![
            TripletCandidate { class: 0, hospital: 0 },
            TripletCandidate { class: 1, hospital: 1 },
        ];
        assert!(sample_triplets(&lonely, 1, 0).is_err());
        assert!(sample_triplets(&pool(2, 1, 5), 1, 0).is_err());
        assert!(sample_triplets(&pool(2, 2, 5), 0, 0).is_err());
    }

    fn rotate(t: &Tensor, angle: f32) -> Tensor {
        let (s, c) = angle.sin_cos();
        let data = t.data().chunks(2).flat_map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    proptest! {
        #[test]
        fn triplet_rotation_invariant(
            pts in prop::collection::vec(-3.0f32..3.0, 18),
            angle in 0.0f32..6.28,
            margin in 0.0f32..5.0,
        ) {
            let a = Tensor::new(vec![3, 2], pts[0..6].to_vec()).unwrap();
            let p = Tensor::new(vec![3, 2], pts[6..12].to_vec()).unwrap();
            let n = Tensor::new(vec![3, 2], pts[12..18].to_vec()).unwrap();
            let base = triplet_loss_from_embeddings(&a, &p, &n, margin).unwrap();
            let rot = triplet_loss_from_embeddings(&rotate(&a, angle), &rotate(&p, angle), &rotate(&n, angle), margin).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((base - rot).abs() <= 1e-4 * (1.0 + base.abs()));
        }

        #[test]
        fn alignment_symmetric_nonnegative(
            raw in prop::collection::vec(0.01f32..1.0, 12),
        ) {
            let norm = |v: &[f32]| { let s: f32 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let a = SoftConfusionMatrix::from_rows("A", raw[0..6].chunks(3).map(norm).collect());
            let b = SoftConfusionMatrix::from_rows("B", raw[6..12].chunks(3).map(norm).collect());
            let ab = hospital_alignment_pair(&a, &b).unwrap();
            let ba = hospital_alignment_pair(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= -1e-7);
            prop_assert_eq!(hospital_alignment_pair(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn temperature_scaling_identity(
            logits in prop::collection::vec(-5.0f32..5.0, 6),
            tau in 1.1f32..8.0,
        ) {
            let l = Tensor::new(vec![2, 3], logits.clone()).unwrap();
            let scaled = Tensor::new(vec![2, 3], logits.iter().map(|x| x / tau).collect()).unwrap();
            let via_tau = crate::tensor::tape::softmax_with_temperature(&l, tau).unwrap();
            let via_scale = crate::tensor::tape::softmax_with_temperature(&scaled, 1.0).unwrap();
            for (x, y) in via_tau.data().iter().zip(via_scale.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
