#![allow(dead_code)]

use hadg::losses;
use hadg::model::{self, ConvStage, ModelConfig, ParamSet};
use hadg::tensor::{Tape, Tensor, Var};

pub mod graphs;
pub mod reference;

use reference::Arr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small configurations (≤ 2,000 parameters) for gradient checks.
pub fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let channels = rng.random_range(1..=3);
    let side = rng.random_range(7..=10);
    ModelConfig {
        input: [channels, side, side],
        conv: vec![ConvStage {
            out_channels: rng.random_range(2..=4),
            kernel: 3,
            pool: 2,
        }],
        feature_dim: rng.random_range(4..=8),
        classes: 3,
        metric_widths: [rng.random_range(3..=6), rng.random_range(2..=4)],
    }
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, cfg: &ModelConfig) -> Tensor {
    let shape = vec![n, cfg.input[0], cfg.input[1], cfg.input[2]];
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Alignment,
    Triplet,
}

pub struct Problem {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub kind: LossKind,
    pub groups: Vec<(Tensor, Vec<usize>)>,
    pub triplets: Option<(Tensor, Tensor, Tensor)>,
}

impl Problem {
    pub fn random(seed: u64, kind: LossKind) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_config(&mut rng);
        let mut params = model::init_params(&cfg, seed).unwrap();
        // Zero biases put every dead ReLU exactly on its kink; jitter them.
        let biases: Vec<usize> =
            (0..params.len()).filter(|&i| params.entries()[i].name.ends_with(".bias")).collect();
        for t in params.values_mut(&biases) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let mut groups = Vec::new();
        for _ in 0..2 {
            let labels = vec![0, 1, 2, rng.random_range(0..3)];
            groups.push((random_images(&mut rng, 4, &cfg), labels));
        }
        let triplets = (kind == LossKind::Triplet).then(|| {
            (
                random_images(&mut rng, 3, &cfg),
                random_images(&mut rng, 3, &cfg),
                random_images(&mut rng, 3, &cfg),
            )
        });
        Problem { cfg, params, kind, groups, triplets }
    }

    /// Build the loss on `tape` with `params` bound as leaves.
    pub fn build(&self, tape: &mut Tape, params: &ParamSet) -> (Var, Vec<Var>) {
        let p = params.bind(tape);
        let cfg = &self.cfg;
        let loss = match self.kind {
            LossKind::CrossEntropy | LossKind::Alignment => {
                let mut logits = Vec::new();
                for (x, _) in &self.groups {
                    let x = tape.constant(x.clone());
                    let f = model::features(tape, cfg, &p, x).unwrap();
                    logits.push(model::classifier(tape, &p, f).unwrap());
                }
                if self.kind == LossKind::CrossEntropy {
                    let labels: Vec<&[usize]> = self.groups.iter().map(|g| g.1.as_slice()).collect();
                    losses::cross_entropy_tape(tape, &logits, &labels).unwrap()
                } else {
                    let a = losses::soft_confusion_tape(tape, "A", logits[0], &self.groups[0].1, 3, 2.0).unwrap();
                    let b = losses::soft_confusion_tape(tape, "B", logits[1], &self.groups[1].1, 3, 2.0).unwrap();
                    losses::alignment_total_tape(tape, &[a], &[b]).unwrap()
                }
            }
            LossKind::Triplet => {
                let (a, pz, n) = self.triplets.as_ref().unwrap();
                let mut emb = |x: &Tensor| {
                    let x = tape.constant(x.clone());
                    let f = model::features(tape, cfg, &p, x).unwrap();
                    model::metric_head(tape, &p, f).unwrap()
                };
                let (ea, ep, en) = (emb(a), emb(pz), emb(n));
                losses::triplet_tape(tape, ea, ep, en, TRIPLET_MARGIN).unwrap()
            }
        };
        (loss, p.vars().to_vec())
    }

    pub fn analytic(&self) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let (loss, vars) = self.build(&mut tape, &self.params);
        tape.gradients(loss, &vars).unwrap()
    }

    pub fn tape_loss(&self) -> f32 {
        let mut tape = Tape::new();
        let (loss, _) = self.build(&mut tape, &self.params);
        tape.value(loss).item().unwrap()
    }

    /// The same loss evaluated by the f64 reference.
    pub fn reference_loss(&self, p: &reference::Params) -> f64 {
        let cfg = &self.cfg;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Alignment => {
                let logits: Vec<(Arr, Vec<usize>)> = self
                    .groups
                    .iter()
                    .map(|(x, y)| {
                        let f = reference::features(cfg, p, &Arr::from_tensor(x));
                        (reference::logits(p, &f), y.clone())
                    })
                    .collect();
                if self.kind == LossKind::CrossEntropy {
                    reference::cross_entropy(&logits)
                } else {
                    let a = reference::soft_confusion(&logits[0].0, &logits[0].1, 3, 2.0);
                    let b = reference::soft_confusion(&logits[1].0, &logits[1].1, 3, 2.0);
                    reference::alignment_pair(&a, &b)
                }
            }
            LossKind::Triplet => {
                let (a, pz, n) = self.triplets.as_ref().unwrap();
                let emb = |x: &Tensor| reference::metric(p, &reference::features(cfg, p, &Arr::from_tensor(x)));
                reference::triplet(&emb(a), &emb(pz), &emb(n), TRIPLET_MARGIN as f64)
            }
        }
    }

    pub fn leaves_f64(&self) -> Vec<Arr> {
        self.params.entries().iter().map(|e| Arr::from_tensor(&e.value)).collect()
    }

    pub fn eval_leaves(&self, leaves: &[Arr]) -> f64 {
        let p: reference::Params = self
            .params
            .entries()
            .iter()
            .zip(leaves)
            .map(|(e, a)| (e.name.clone(), a.clone()))
            .collect();
        self.reference_loss(&p)
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub kinks_skipped: usize,
    pub worst_relative: f64,
    pub failures: Vec<String>,
}

pub const TRIPLET_MARGIN: f32 = 10.0;
pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;

fn central(f: &dyn Fn(&[Arr]) -> f64, leaves: &[Arr], leaf: usize, i: usize, h: f64) -> f64 {
    let mut l = leaves.to_vec();
    let x0 = l[leaf].data[i];
    l[leaf].data[i] = x0 + h;
    let plus = f(&l);
    l[leaf].data[i] = x0 - h;
    let minus = f(&l);
    (plus - minus) / (2.0 * h)
}

/// Sample `samples` gradient components whose magnitude is at least 1e-3 of
/// the largest analytic component and compare them with f64 central
/// differences at step 1e-3. Components whose stencil straddles a kink
/// (central differences at h and h/2 disagree) are skipped and redrawn.
pub fn check_gradients(
    f: &dyn Fn(&[Arr]) -> f64,
    leaves: &[Arr],
    analytic: &[Tensor],
    allowed: &[usize],
    samples: usize,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = allowed
        .iter()
        .flat_map(|&l| analytic[l].data().iter())
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let floor = (1e-3 * scale).max(1e-6);
    let candidates: Vec<(usize, usize)> = allowed
        .iter()
        .flat_map(|&l| {
            analytic[l]
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| (v.abs() as f64) >= floor && **v != 0.0)
                .map(move |(i, _)| (l, i))
        })
        .collect();
    let mut report = GradReport::default();
    if candidates.is_empty() {
        // Identically zero analytic gradient: the function must be flat too.
        for n in 0..samples {
            let l = allowed[n % allowed.len()];
            let i = rng.random_range(0..leaves[l].data.len());
            let fd = central(f, leaves, l, i, FD_STEP);
            let fd_half = central(f, leaves, l, i, FD_STEP / 2.0);
            if (fd - fd_half).abs() > 1e-4 * fd.abs().max(1e-6) {
                report.kinks_skipped += 1;
                continue;
            }
            if fd.abs() > 1e-5 {
                report.failures.push(format!("leaf {l}[{i}]: analytic 0 vs fd {fd:e}"));
            }
            report.checked += 1;
        }
        return report;
    }
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 20 {
        attempts += 1;
        let (l, i) = candidates[rng.random_range(0..candidates.len())];
        let fd = central(f, leaves, l, i, FD_STEP);
        let fd_half = central(f, leaves, l, i, FD_STEP / 2.0);
        if (fd - fd_half).abs() > 1e-4 * fd.abs().max(floor) {
            report.kinks_skipped += 1;
            continue;
        }
        let a = analytic[l].data()[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs());
        report.worst_relative = report.worst_relative.max(rel);
        if rel > FD_REL_TOL {
            report.failures.push(format!("leaf {l}[{i}]: analytic {a:e} vs fd {fd:e} (rel {rel:e})"));
        }
        report.checked += 1;
    }
    report
}
