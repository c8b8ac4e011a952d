//! The three-part network: feature extractor, classifier and metric head.
//!
//! The feature extractor is a stack of conv → ReLU → max-pool stages followed
//! by one fully-connected layer with ReLU. The classifier is a single linear
//! layer on the features; the metric head is two linear layers (ReLU between)
//! on the same features.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_dim, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Feature extractor parameters.
    Psi,
    /// Classifier parameters.
    Theta,
    /// Metric head parameters.
    Phi,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Psi => 0,
            Partition::Theta => 1,
            Partition::Phi => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Psi),
            1 => Some(Partition::Theta),
            2 => Some(Partition::Phi),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// (channels, rows, cols)
    pub input: [usize; 3],
    pub conv: Vec<ConvStage>,
    pub feature_dim: usize,
    pub classes: usize,
    pub metric_widths: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: [3, 64, 64],
            conv: vec![
                ConvStage {
                    out_channels: 8,
                    kernel: 3,
                    pool: 2,
                },
                ConvStage {
                    out_channels: 16,
                    kernel: 3,
                    pool: 2,
                },
            ],
            feature_dim: 64,
            classes: 3,
            metric_widths: [32, 16],
        }
    }
}

impl ModelConfig {
    /// Check every dimension and return the flattened width entering the
    /// feature layer.
    pub fn validate(&self) -> Result<usize> {
        let [mut ch, mut rows, mut cols] = self.input;
        if ch == 0 || rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("model input {:?} must be positive", self.input)));
        }
        for (i, stage) in self.conv.iter().enumerate() {
            if stage.out_channels == 0 || stage.kernel == 0 || stage.pool == 0 {
                return Err(Error::invalid(format!("conv stage {i} has a zero dimension")));
            }
            let r = conv_output_dim(rows, stage.kernel, 1).map(|r| r / stage.pool);
            let c = conv_output_dim(cols, stage.kernel, 1).map(|c| c / stage.pool);
            match (r, c) {
                (Some(r), Some(c)) if r > 0 && c > 0 => {
                    rows = r;
                    cols = c;
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "conv stage {i} collapses the {rows}x{cols} activation"
                    )))
                }
            }
            ch = stage.out_channels;
        }
        if self.feature_dim == 0 || self.classes < 2 || self.metric_widths.contains(&0) {
            return Err(Error::invalid(
                "feature_dim and metric widths must be positive, classes >= 2",
            ));
        }
        Ok(ch * rows * cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

/// Named parameter tensors, each tagged with exactly one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::invalid(format!("duplicate parameter name {}", e.name)));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Indices of the entries belonging to any of `parts`, in storage order.
    pub fn indices(&self, parts: &[Partition]) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| parts.contains(&e.partition))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn values(&self, indices: &[usize]) -> Vec<Tensor> {
        indices.iter().map(|&i| self.entries[i].value.clone()).collect()
    }

    /// Mutable references to the selected tensors, for optimizer steps.
    /// `indices` must be ascending, as returned by [`ParamSet::indices`].
    pub fn values_mut(&mut self, indices: &[usize]) -> Vec<&mut Tensor> {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| indices.contains(i))
            .map(|(_, e)| &mut e.value)
            .collect()
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        BoundParams { set: self, vars }
    }

    /// Register every tensor as a constant (no gradients).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect();
        BoundParams { set: self, vars }
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Vars at the given entry indices.
    pub fn select(&self, indices: &[usize]) -> Vec<Var> {
        indices.iter().map(|&i| self.vars[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Features,
    Logits,
    Metric,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Seeded initialization: weights uniform in ±√(6/fan-in), biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let flat = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut push = |name: String, partition, value| {
        entries.push(ParamEntry {
            name,
            partition,
            value,
        })
    };

    let mut channels = config.input[0];
    for (i, stage) in config.conv.iter().enumerate() {
        let shape = [stage.out_channels, channels, stage.kernel, stage.kernel];
        let fan_in = channels * stage.kernel * stage.kernel;
        push(format!("features.conv{i}.weight"), Partition::Psi, uniform(&mut rng, &shape, fan_in));
        push(format!("features.conv{i}.bias"), Partition::Psi, Tensor::zeros(&[stage.out_channels]));
        channels = stage.out_channels;
    }
    let linears = [
        ("features.fc", Partition::Psi, flat, config.feature_dim),
        ("classifier.fc", Partition::Theta, config.feature_dim, config.classes),
        ("metric.fc0", Partition::Phi, config.feature_dim, config.metric_widths[0]),
        ("metric.fc1", Partition::Phi, config.metric_widths[0], config.metric_widths[1]),
    ];
    for (name, part, fan_in, out) in linears {
        push(format!("{name}.weight"), part, uniform(&mut rng, &[fan_in, out], fan_in));
        push(format!("{name}.bias"), part, Tensor::zeros(&[out]));
    }
    ParamSet::new(entries)
}

fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Feature extractor on a (batch, channels, rows, cols) input.
pub fn features(tape: &mut Tape, config: &ModelConfig, p: &BoundParams, input: Var) -> Result<Var> {
    let shape = tape.value(input).shape();
    if shape.len() != 4 || shape[1..] != config.input {
        return Err(Error::Shape {
            op: "forward_pass",
            lhs: shape.to_vec(),
            rhs: config.input.to_vec(),
        });
    }
    let mut x = input;
    for (i, stage) in config.conv.iter().enumerate() {
        let w = p.var(&format!("features.conv{i}.weight"))?;
        let b = p.var(&format!("features.conv{i}.bias"))?;
        x = tape.conv2d(x, w, b, 1)?;
        x = tape.relu(x);
        x = tape.max_pool2d(x, stage.pool)?;
    }
    let x = tape.flatten(x)?;
    let x = linear(tape, p, "features.fc", x)?;
    Ok(tape.relu(x))
}

pub fn classifier(tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
    linear(tape, p, "classifier.fc", features)
}

/// Metric embeddings; not length-normalized.
pub fn metric_head(tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
    let h = linear(tape, p, "metric.fc0", features)?;
    let h = tape.relu(h);
    linear(tape, p, "metric.fc1", h)
}

/// Untaped forward pass to the requested stage.
pub fn forward_pass(config: &ModelConfig, params: &ParamSet, batch: &Tensor, stage: Stage) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let x = tape.constant(batch.clone());
    let f = features(&mut tape, config, &p, x)?;
    let out = match stage {
        Stage::Features => f,
        Stage::Logits => classifier(&mut tape, &p, f)?,
        Stage::Metric => metric_head(&mut tape, &p, f)?,
    };
    Ok(tape.value(out).clone())
}

/// Apply only the metric head to precomputed features.
pub fn apply_metric_head(params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let f = tape.constant(features.clone());
    let out = metric_head(&mut tape, &p, f)?;
    Ok(tape.value(out).clone())
}
