//! Episodic hospital-agnostic training, the pooled baseline and the
//! leave-one-hospital-out loop.
//!
//! One masf episode:
//! 1. split the internal hospitals into meta-train and one meta-test hospital;
//! 2. draw n patches per class per hospital;
//! 3. inner step: (ψ′,θ′) = (ψ,θ) − α·clip(∇L_ce) on the meta-train batch;
//! 4. meta loss at (ψ′,θ′,φ): β₁·alignment + β₂·triplet;
//! 5. meta step: Adam(η) on ∇L_ce(ψ,θ) + ∇L_meta(ψ′,θ′), first order;
//! 6. metric step: Adam(γ) on ∇φ L_triplet at ψ′.

mod config;

pub use config::{Regime, TrainConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PatchSet, Split};
use crate::error::{Error, Result};
use crate::eval::{predict_slides, slide_accuracy, FoldReport};
use crate::losses::{self, HospitalGroup, LabeledBatch, TripletCandidate, TripletIndices};
use crate::model::{self, init_params, ModelConfig, ParamSet, Partition};
use crate::tensor::{clip_by_global_norm, global_norm, Optimizer, Tape, Tensor};

/// RNG streams per iteration.
const STREAM_SPLIT: u64 = 0;
const STREAM_BATCH: u64 = 1;

fn episode_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 * 4 + stream);
    rng
}

/// Held-out hospital and the internal hospitals of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub held_out: String,
    pub internal: Vec<String>,
    /// Split of every internal slide, keyed by hospital then slide id.
    pub assignments: BTreeMap<String, BTreeMap<String, Split>>,
}

impl FoldPlan {
    pub fn new(data: &PatchSet, held_out: &str) -> Result<Self> {
        let hospitals = data.hospitals();
        if !hospitals.iter().any(|h| h == held_out) {
            return Err(Error::invalid(format!("hold-out hospital {held_out} not in the manifest")));
        }
        let internal: Vec<String> = hospitals.into_iter().filter(|h| h != held_out).collect();
        if internal.is_empty() {
            return Err(Error::invalid("fold has no internal hospitals"));
        }
        let mut assignments: BTreeMap<String, BTreeMap<String, Split>> = BTreeMap::new();
        for r in data.records() {
            if r.hospital != held_out {
                assignments
                    .entry(r.hospital.clone())
                    .or_default()
                    .insert(r.slide_id.clone(), r.split);
            }
        }
        Ok(FoldPlan {
            held_out: held_out.to_string(),
            internal,
            assignments,
        })
    }

    pub fn fold_id(&self) -> &str {
        &self.held_out
    }
}

/// Which held-out slides are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutSplit {
    #[default]
    All,
    Test,
}

/// One JSON Lines record per training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub fold: String,
    #[serde(rename = "L_ce")]
    pub l_ce: f32,
    #[serde(rename = "L_align")]
    pub l_align: f32,
    #[serde(rename = "L_triplet")]
    pub l_triplet: f32,
    #[serde(rename = "L_meta")]
    pub l_meta: f32,
    pub pre_clip_grad_norm: f64,
    pub seed: u64,
}

pub fn write_log_line(w: &mut dyn Write, log: &IterationLog) -> Result<()> {
    let line = serde_json::to_string(log).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io("metrics.jsonl", e))
}

/// Randomly partition the internal hospitals into meta-train and a single
/// meta-test hospital, determined by (seed, iteration).
pub fn split_meta(internal: &[String], seed: u64, iteration: usize) -> Result<(Vec<String>, Vec<String>)> {
    if internal.len() < 2 {
        return Err(Error::invalid(format!(
            "meta split needs >= 2 internal hospitals, got {}",
            internal.len()
        )));
    }
    let mut rng = episode_rng(seed, iteration, STREAM_SPLIT);
    let k = rng.random_range(0..internal.len());
    let test = vec![internal[k].clone()];
    let train = internal.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, h)| h.clone()).collect();
    Ok((train, test))
}

/// Result of the inner step.
#[derive(Clone, Debug)]
pub struct InnerStep {
    /// Copy of the parameters with (ψ′,θ′) in place of (ψ,θ).
    pub adapted: ParamSet,
    pub loss: f32,
    /// Unclipped ∇_{ψ,θ} L_ce, aligned with `psi_theta` indices.
    pub grads: Vec<Tensor>,
    /// The clipped gradient actually applied.
    pub applied: Vec<Tensor>,
    pub pre_clip_norm: f64,
}

fn psi_theta(params: &ParamSet) -> Vec<usize> {
    params.indices(&[Partition::Psi, Partition::Theta])
}

/// Concatenate the batch's images; returns (images, per-group row ranges).
fn stack_groups(groups: &[&HospitalGroup]) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let first = groups.first().ok_or_else(|| Error::invalid("no hospital groups"))?;
    let tail = first.images.shape()[1..].to_vec();
    let mut data = Vec::new();
    let mut rows = Vec::new();
    let mut n = 0;
    for g in groups {
        if g.images.shape()[1..] != tail[..] {
            return Err(Error::Shape {
                op: "stack_groups",
                lhs: tail.clone(),
                rhs: g.images.shape()[1..].to_vec(),
            });
        }
        let m = g.images.shape()[0];
        data.extend_from_slice(g.images.data());
        rows.push((n..n + m).collect());
        n += m;
    }
    let mut shape = vec![n];
    shape.extend(tail);
    Ok((Tensor::new(shape, data)?, rows))
}

/// Cross-entropy of a labeled batch on a tape, with its (ψ,θ) gradients.
fn ce_with_grads(model_cfg: &ModelConfig, params: &ParamSet, batch: &LabeledBatch) -> Result<(f32, Vec<Tensor>)> {
    batch.validate(model_cfg.classes)?;
    let groups: Vec<&HospitalGroup> = batch.groups.iter().collect();
    let (images, rows) = stack_groups(&groups)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(images);
    let f = model::features(&mut tape, model_cfg, &p, x)?;
    let logits = model::classifier(&mut tape, &p, f)?;
    let mut per_group = Vec::with_capacity(rows.len());
    for r in &rows {
        per_group.push(tape.select_rows(logits, r)?);
    }
    let labels: Vec<&[usize]> = batch.groups.iter().map(|g| g.labels.as_slice()).collect();
    let loss = losses::cross_entropy_tape(&mut tape, &per_group, &labels)?;
    let grads = tape.gradients(loss, &p.select(&psi_theta(params)))?;
    Ok((tape.value(loss).item()?, grads))
}

/// (ψ′,θ′) = (ψ,θ) − α·clip(∇_{ψ,θ} L_ce) by plain descent on a copy.
pub fn inner_update(
    model_cfg: &ModelConfig,
    params: &ParamSet,
    batch: &LabeledBatch,
    alpha: f32,
    clip: f32,
) -> Result<InnerStep> {
    let (loss, grads) = ce_with_grads(model_cfg, params, batch)?;
    let mut applied = grads.clone();
    let pre_clip_norm = clip_by_global_norm(&mut applied, clip)?;
    let mut adapted = params.clone();
    let idx = psi_theta(params);
    Optimizer::plain(alpha).step(&mut adapted.values_mut(&idx), &applied)?;
    Ok(InnerStep {
        adapted,
        loss,
        grads,
        applied,
        pre_clip_norm,
    })
}

/// Weights and shape parameters of the meta loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaWeights {
    pub beta1: f32,
    pub beta2: f32,
    pub tau: f32,
    pub margin: f32,
}

impl From<&TrainConfig> for MetaWeights {
    fn from(c: &TrainConfig) -> Self {
        MetaWeights {
            beta1: c.beta1,
            beta2: c.beta2,
            tau: c.tau,
            margin: c.margin,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaLoss {
    pub total: f32,
    pub align: f32,
    pub triplet: f32,
    /// ∇ L_meta with respect to (ψ′,θ′), aligned with `psi_theta` indices.
    pub grads: Vec<Tensor>,
    /// Features at ψ′ of the episode pool: meta-train rows then meta-test
    /// rows, in group order. Triplet indices refer to these rows.
    pub pool_features: Tensor,
}

/// Triplet candidates for the episode pool (meta-train groups then
/// meta-test groups), with hospitals numbered by group.
pub fn pool_candidates(meta_train: &LabeledBatch, meta_test: &LabeledBatch) -> Vec<TripletCandidate> {
    meta_train
        .groups
        .iter()
        .chain(&meta_test.groups)
        .enumerate()
        .flat_map(|(h, g)| g.labels.iter().map(move |&class| TripletCandidate { class, hospital: h }))
        .collect()
}

/// β₁·L_align(meta-train, meta-test; ψ′,θ′) + β₂·L_triplet(ψ′,φ) and its
/// gradient with respect to (ψ′,θ′).
pub fn meta_loss(
    model_cfg: &ModelConfig,
    adapted: &ParamSet,
    meta_train: &LabeledBatch,
    meta_test: &LabeledBatch,
    triplets: &[TripletIndices],
    w: MetaWeights,
) -> Result<MetaLoss> {
    meta_train.validate(model_cfg.classes)?;
    meta_test.validate(model_cfg.classes)?;
    if triplets.is_empty() {
        return Err(Error::invalid("meta loss needs at least one triplet"));
    }
    let groups: Vec<&HospitalGroup> = meta_train.groups.iter().chain(&meta_test.groups).collect();
    let (images, rows) = stack_groups(&groups)?;
    let n = images.shape()[0];
    if let Some(t) = triplets.iter().find(|t| t.anchor.max(t.positive).max(t.negative) >= n) {
        return Err(Error::invalid(format!("triplet {t:?} outside the {n}-patch pool")));
    }

    let mut tape = Tape::new();
    let p = adapted.bind(&mut tape);
    let x = tape.constant(images);
    let f = model::features(&mut tape, model_cfg, &p, x)?;
    let logits = model::classifier(&mut tape, &p, f)?;
    let mut confusions = Vec::with_capacity(groups.len());
    for (g, r) in groups.iter().zip(&rows) {
        let l = tape.select_rows(logits, r)?;
        confusions.push(losses::soft_confusion_tape(
            &mut tape,
            &g.hospital,
            l,
            &g.labels,
            model_cfg.classes,
            w.tau,
        )?);
    }
    let (tr, te) = confusions.split_at(meta_train.groups.len());
    let align = losses::alignment_total_tape(&mut tape, tr, te)?;

    let emb = model::metric_head(&mut tape, &p, f)?;
    let pick = |sel: fn(&TripletIndices) -> usize| triplets.iter().map(sel).collect::<Vec<_>>();
    let a = tape.select_rows(emb, &pick(|t| t.anchor))?;
    let pz = tape.select_rows(emb, &pick(|t| t.positive))?;
    let ng = tape.select_rows(emb, &pick(|t| t.negative))?;
    let trip = losses::triplet_tape(&mut tape, a, pz, ng, w.margin)?;

    let wa = tape.scale(align, w.beta1);
    let wt = tape.scale(trip, w.beta2);
    let total = tape.add(wa, wt)?;
    let grads = tape.gradients(total, &p.select(&psi_theta(adapted)))?;
    Ok(MetaLoss {
        total: tape.value(total).item()?,
        align: tape.value(align).item()?,
        triplet: tape.value(trip).item()?,
        grads,
        pool_features: tape.value(f).clone(),
    })
}

/// Adaptive step on (ψ,θ) with ∇L_ce(ψ,θ) + ∇L_meta(ψ′,θ′).
pub fn meta_update(
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    ce_grads: &[Tensor],
    meta_grads: &[Tensor],
) -> Result<()> {
    if ce_grads.len() != meta_grads.len() {
        return Err(Error::invalid("meta update: gradient lists differ in length"));
    }
    let mut sum = Vec::with_capacity(ce_grads.len());
    for (a, b) in ce_grads.iter().zip(meta_grads) {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "meta_update",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        sum.push(Tensor::new(a.shape().to_vec(), data)?);
    }
    let idx = psi_theta(params);
    optimizer.step(&mut params.values_mut(&idx), &sum)
}

/// Adaptive step on φ alone with ∇φ L_triplet, embedding features computed
/// at ψ′. Returns the triplet loss before the step.
pub fn metric_update(
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    pool_features: &Tensor,
    triplets: &[TripletIndices],
    margin: f32,
) -> Result<f32> {
    let phi = params.indices(&[Partition::Phi]);
    let (loss, grads) = {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let f = tape.constant(pool_features.clone());
        let emb = model::metric_head(&mut tape, &p, f)?;
        let pick = |sel: fn(&TripletIndices) -> usize| triplets.iter().map(sel).collect::<Vec<_>>();
        let a = tape.select_rows(emb, &pick(|t| t.anchor))?;
        let pz = tape.select_rows(emb, &pick(|t| t.positive))?;
        let ng = tape.select_rows(emb, &pick(|t| t.negative))?;
        let loss = losses::triplet_tape(&mut tape, a, pz, ng, margin)?;
        (tape.value(loss).item()?, tape.gradients(loss, &p.select(&phi))?)
    };
    optimizer.step(&mut params.values_mut(&phi), &grads)?;
    Ok(loss)
}

/// Per-hospital, per-class train-split patch indices of a fold.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    classes: usize,
    cells: BTreeMap<String, Vec<Vec<usize>>>,
}

impl EpisodeSampler {
    /// Rejects a fold whose internal train splits miss a class.
    pub fn new(data: &PatchSet, plan: &FoldPlan, classes: usize) -> Result<Self> {
        let mut cells: BTreeMap<String, Vec<Vec<usize>>> = plan
            .internal
            .iter()
            .map(|h| (h.clone(), vec![Vec::new(); classes]))
            .collect();
        for (i, r) in data.records().iter().enumerate() {
            if r.split != Split::Train || r.hospital == plan.held_out {
                continue;
            }
            if r.class >= classes {
                return Err(Error::Data(format!("slide {} has label {} >= {classes}", r.slide_id, r.class)));
            }
            if let Some(cell) = cells.get_mut(&r.hospital) {
                cell[r.class].push(i);
            }
        }
        for (h, cell) in &cells {
            if let Some(c) = cell.iter().position(Vec::is_empty) {
                return Err(Error::Data(format!("hospital {h} has no train patches of class {c}")));
            }
        }
        Ok(EpisodeSampler { classes, cells })
    }

    pub fn pool(&self, hospital: &str) -> Option<&[Vec<usize>]> {
        self.cells.get(hospital).map(Vec::as_slice)
    }

    fn draw(rng: &mut ChaCha8Rng, pool: &[usize], n: usize, out: &mut Vec<usize>) {
        if pool.len() >= n {
            out.extend(index::sample(rng, pool.len(), n).into_iter().map(|k| pool[k]));
        } else {
            out.extend((0..n).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }

    /// n patches of every class from one hospital (without replacement
    /// when the cell is large enough), class-major order.
    pub fn hospital_batch(&self, rng: &mut ChaCha8Rng, hospital: &str, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let cell = self
            .cells
            .get(hospital)
            .ok_or_else(|| Error::invalid(format!("hospital {hospital} is not internal to this fold")))?;
        let mut idx = Vec::with_capacity(n * self.classes);
        let mut labels = Vec::with_capacity(n * self.classes);
        for (c, pool) in cell.iter().enumerate() {
            Self::draw(rng, pool, n, &mut idx);
            labels.extend(std::iter::repeat_n(c, n));
        }
        Ok((idx, labels))
    }

    /// `per_class` patches of every class pooled over all internal hospitals.
    pub fn pooled_batch(&self, rng: &mut ChaCha8Rng, per_class: usize) -> (Vec<usize>, Vec<usize>) {
        let mut idx = Vec::with_capacity(per_class * self.classes);
        let mut labels = Vec::with_capacity(per_class * self.classes);
        for c in 0..self.classes {
            let pool: Vec<usize> = self.cells.values().flat_map(|cell| cell[c].iter().copied()).collect();
            Self::draw(rng, &pool, per_class, &mut idx);
            labels.extend(std::iter::repeat_n(c, per_class));
        }
        (idx, labels)
    }
}

/// Output of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best internal-validation checkpoint, or the final
    /// parameters when no validation slides exist.
    pub params: ParamSet,
    pub logs: Vec<IterationLog>,
    /// (iteration, internal-validation slide accuracy) at each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    /// Every patch index that entered a training batch.
    pub trained_on: BTreeSet<usize>,
}

struct Selector<'a> {
    model_cfg: &'a ModelConfig,
    data: &'a PatchSet,
    val: Vec<usize>,
    every: usize,
    last: usize,
    best: Option<(f64, usize, ParamSet)>,
    history: Vec<(usize, f64)>,
}

impl Selector<'_> {
    fn observe(&mut self, iteration: usize, params: &ParamSet) -> Result<()> {
        let due = (iteration + 1).is_multiple_of(self.every) || iteration == self.last;
        if self.val.is_empty() || !due {
            return Ok(());
        }
        let acc = slide_accuracy(&predict_slides(self.model_cfg, params, self.data, &self.val)?)?;
        self.history.push((iteration, acc));
        if self.best.as_ref().is_none_or(|b| acc > b.0) {
            self.best = Some((acc, iteration, params.clone()));
        }
        Ok(())
    }
}

/// Callback receiving each log record as it is produced.
pub type LogSink<'a> = &'a mut dyn FnMut(&IterationLog) -> Result<()>;

struct Run<'a> {
    data: &'a PatchSet,
    sampler: EpisodeSampler,
    params: ParamSet,
    selector: Selector<'a>,
    logs: Vec<IterationLog>,
    trained_on: BTreeSet<usize>,
}

impl<'a> Run<'a> {
    fn new(plan: &'a FoldPlan, data: &'a PatchSet, model_cfg: &'a ModelConfig, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        model_cfg.validate()?;
        if data.patch_shape() != model_cfg.input {
            return Err(Error::Config(format!(
                "patches are {:?} but the model expects {:?}",
                data.patch_shape(),
                model_cfg.input
            )));
        }
        let sampler = EpisodeSampler::new(data, plan, model_cfg.classes)?;
        let val = data
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Val && plan.internal.contains(&r.hospital))
            .map(|(i, _)| i)
            .collect();
        Ok(Run {
            data,
            sampler,
            params: init_params(model_cfg, config.seed)?,
            selector: Selector {
                model_cfg,
                data,
                val,
                every: config.eval_every,
                last: config.max_iterations.saturating_sub(1),
                best: None,
                history: Vec::new(),
            },
            logs: Vec::new(),
            trained_on: BTreeSet::new(),
        })
    }

    fn group(&mut self, hospital: &str, idx: Vec<usize>, labels: Vec<usize>) -> HospitalGroup {
        self.trained_on.extend(idx.iter().copied());
        HospitalGroup {
            hospital: hospital.to_string(),
            images: self.data.images(&idx),
            labels,
        }
    }

    fn record(&mut self, log: IterationLog, sink: &mut dyn FnMut(&IterationLog) -> Result<()>) -> Result<()> {
        for v in [log.l_ce, log.l_align, log.l_triplet, log.l_meta] {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "fold {}: non-finite loss at iteration {}",
                    log.fold, log.iteration
                )));
            }
        }
        sink(&log)?;
        self.logs.push(log);
        Ok(())
    }

    fn finish(self) -> TrainOutcome {
        let (params, best_iteration, best_val_accuracy) = match self.selector.best {
            Some((acc, it, p)) => (p, Some(it), Some(acc)),
            None => (self.params, None, None),
        };
        TrainOutcome {
            params,
            logs: self.logs,
            validation: self.selector.history,
            best_iteration,
            best_val_accuracy,
            trained_on: self.trained_on,
        }
    }
}

/// Episodic hospital-agnostic training on the fold's internal hospitals.
pub fn train_masf(
    plan: &FoldPlan,
    data: &PatchSet,
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    sink: LogSink,
) -> Result<TrainOutcome> {
    let mut run = Run::new(plan, data, model_cfg, config)?;
    let weights = MetaWeights::from(config);
    let mut meta_opt = Optimizer::adam(config.eta);
    let mut metric_opt = Optimizer::adam(config.gamma);
    for it in 0..config.max_iterations {
        let (train_h, test_h) = split_meta(&plan.internal, config.seed, it)?;
        let mut rng = episode_rng(config.seed, it, STREAM_BATCH);
        let mut draw = |run: &mut Run, hs: &[String]| -> Result<LabeledBatch> {
            let mut groups = Vec::with_capacity(hs.len());
            for h in hs {
                let (idx, labels) = run.sampler.hospital_batch(&mut rng, h, config.batch_per_class)?;
                groups.push(run.group(h, idx, labels));
            }
            Ok(LabeledBatch { groups })
        };
        let meta_train = draw(&mut run, &train_h)?;
        let meta_test = draw(&mut run, &test_h)?;
        let triplets = losses::sample_triplets(
            &pool_candidates(&meta_train, &meta_test),
            config.triplet_batch,
            rng.next_u64(),
        )?;

        let inner = inner_update(model_cfg, &run.params, &meta_train, config.alpha_inner, config.clip_threshold)?;
        let meta = meta_loss(model_cfg, &inner.adapted, &meta_train, &meta_test, &triplets, weights)?;
        meta_update(&mut run.params, &mut meta_opt, &inner.grads, &meta.grads)?;
        metric_update(&mut run.params, &mut metric_opt, &meta.pool_features, &triplets, config.margin)?;

        run.record(
            IterationLog {
                iteration: it,
                fold: plan.fold_id().to_string(),
                l_ce: inner.loss,
                l_align: meta.align,
                l_triplet: meta.triplet,
                l_meta: meta.total,
                pre_clip_grad_norm: inner.pre_clip_norm,
                seed: config.seed,
            },
            sink,
        )?;
        let params = run.params.clone();
        run.selector.observe(it, &params)?;
    }
    Ok(run.finish())
}

/// Pooled cross-entropy training with the same batch size, optimizer and
/// rate as the meta step. Alignment, triplet and meta losses are logged as 0.
pub fn train_baseline(
    plan: &FoldPlan,
    data: &PatchSet,
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    sink: LogSink,
) -> Result<TrainOutcome> {
    let mut run = Run::new(plan, data, model_cfg, config)?;
    let mut opt = Optimizer::adam(config.eta);
    let per_class = config.batch_per_class * plan.internal.len();
    for it in 0..config.max_iterations {
        let mut rng = episode_rng(config.seed, it, STREAM_BATCH);
        let (idx, labels) = run.sampler.pooled_batch(&mut rng, per_class);
        let batch = LabeledBatch {
            groups: vec![run.group("pooled", idx, labels)],
        };
        let (loss, grads) = ce_with_grads(model_cfg, &run.params, &batch)?;
        let idx = psi_theta(&run.params);
        opt.step(&mut run.params.values_mut(&idx), &grads)?;
        run.record(
            IterationLog {
                iteration: it,
                fold: plan.fold_id().to_string(),
                l_ce: loss,
                l_align: 0.0,
                l_triplet: 0.0,
                l_meta: 0.0,
                pre_clip_grad_norm: global_norm(&grads),
                seed: config.seed,
            },
            sink,
        )?;
        let params = run.params.clone();
        run.selector.observe(it, &params)?;
    }
    Ok(run.finish())
}

pub fn train(
    regime: Regime,
    plan: &FoldPlan,
    data: &PatchSet,
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    sink: LogSink,
) -> Result<TrainOutcome> {
    match regime {
        Regime::Masf => train_masf(plan, data, model_cfg, config, sink),
        Regime::Baseline => train_baseline(plan, data, model_cfg, config, sink),
    }
}

/// Patch indices of the held-out hospital scored for a fold.
pub fn holdout_indices(data: &PatchSet, plan: &FoldPlan, which: HoldoutSplit) -> Vec<usize> {
    data.records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.hospital == plan.held_out && (which == HoldoutSplit::All || r.split == Split::Test))
        .map(|(i, _)| i)
        .collect()
}

/// Slide-level accuracy of trained parameters on the held-out hospital.
pub fn evaluate_holdout(
    plan: &FoldPlan,
    data: &PatchSet,
    model_cfg: &ModelConfig,
    params: &ParamSet,
    regime: Regime,
    which: HoldoutSplit,
) -> Result<FoldReport> {
    let idx = holdout_indices(data, plan, which);
    let preds = predict_slides(model_cfg, params, data, &idx)?;
    Ok(FoldReport {
        held_out: plan.held_out.clone(),
        regime,
        slide_count: preds.len(),
        accuracy: slide_accuracy(&preds)?,
    })
}

/// Train every requested regime once per held-out hospital and score each
/// on its hold-out. Reports come back fold-major, regimes in the given order.
pub fn leave_one_hospital_out(
    data: &PatchSet,
    model_cfg: &ModelConfig,
    config: &TrainConfig,
    regimes: &[Regime],
    which: HoldoutSplit,
) -> Result<Vec<FoldReport>> {
    let hospitals = data.hospitals();
    if hospitals.len() < 3 {
        return Err(Error::Data(format!(
            "leave-one-hospital-out needs >= 3 hospitals, found {}",
            hospitals.len()
        )));
    }
    let mut reports = Vec::new();
    for h in &hospitals {
        let plan = FoldPlan::new(data, h)?;
        for &regime in regimes {
            let out = train(regime, &plan, data, model_cfg, config, &mut |_| Ok(()))?;
            reports.push(evaluate_holdout(&plan, data, model_cfg, &out.params, regime, which)?);
        }
    }
    Ok(reports)
}
