use super::Tensor;
use crate::error::{Error, Result};

/// Global L2 norm over a set of tensors, accumulated in f64.
pub fn global_norm(tensors: &[Tensor]) -> f64 {
    tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their global L2 norm does not exceed
/// `threshold`. Returns the norm before clipping.
///
/// Norms within one part in 10^6 of the threshold count as already clipped,
/// which keeps a second application an exact no-op.
pub fn clip_by_global_norm(grads: &mut [Tensor], threshold: f32) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = global_norm(grads);
    let limit = threshold as f64;
    if norm > limit * (1.0 + 1e-6) {
        let scale = (limit / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `p ← p − lr·g`
    Plain,
    /// Bias-corrected adaptive moments.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn plain(lr: f32) -> Self {
        Self::new(OptimizerKind::Plain, lr)
    }

    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one per parameter (empty before
    /// the first adaptive step).
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Plain => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != params.len()
                    || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(Error::invalid(
                        "optimizer: parameter layout changed between steps",
                    ));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
