//! Straight-loop f64 re-implementation of the forward computations, used as
//! the finite-difference oracle for the f32 tape.

use std::collections::BTreeMap;

use hadg::model::{ModelConfig, ParamSet};
use hadg::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Arr {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape, data }
    }

    pub fn from_tensor(t: &Tensor) -> Arr {
        Arr::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        if o.data.len() == 1 {
            return self.map(|v| f(v, o.data[0]));
        }
        assert_eq!(self.shape, o.shape);
        Arr::new(
            self.shape.clone(),
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn scalar(v: f64) -> Arr {
        Arr::new(vec![1], vec![v])
    }
}

pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize) -> Arr {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kr, kc) = (w.shape[0], w.shape[2], w.shape[3]);
    let (oh, ow) = ((h - kr) / stride + 1, (wd - kc) / stride + 1);
    let mut out = vec![0.0; n * o * oh * ow];
    for b_ in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.data[oc];
                    for ic in 0..c {
                        for ki in 0..kr {
                            for kj in 0..kc {
                                s += x.data[((b_ * c + ic) * h + i * stride + ki) * wd + j * stride + kj]
                                    * w.data[((oc * c + ic) * kr + ki) * kc + kj];
                            }
                        }
                    }
                    out[((b_ * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Arr::new(vec![n, o, oh, ow], out)
}

pub fn max_pool(x: &Arr, s: usize) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::new();
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for di in 0..s {
                    for dj in 0..s {
                        m = m.max(x.data[(p * h + i * s + di) * w + j * s + dj]);
                    }
                }
                out.push(m);
            }
        }
    }
    Arr::new(vec![n, c, oh, ow], out)
}

pub fn relu(x: &Arr) -> Arr {
    x.map(|v| v.max(0.0))
}

pub fn flatten(x: &Arr) -> Arr {
    let n = x.shape[0];
    Arr::new(vec![n, x.data.len() / n], x.data.clone())
}

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.data[i * k + p] * b.data[p * m + j]).sum();
        }
    }
    Arr::new(vec![n, m], out)
}

pub fn add_row(a: &Arr, b: &Arr) -> Arr {
    let m = b.data.len();
    Arr::new(
        a.shape.clone(),
        a.data.iter().enumerate().map(|(i, &v)| v + b.data[i % m]).collect(),
    )
}

pub fn softmax_rows(x: &Arr, tau: f64) -> Arr {
    let m = x.cols();
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| ((v - max) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Arr::new(x.shape.clone(), out)
}

pub fn log_softmax_rows(x: &Arr, tau: f64) -> Arr {
    softmax_rows(x, tau).map(f64::ln)
}

pub fn select_rows(x: &Arr, idx: &[usize]) -> Arr {
    let stride = x.data.len() / x.shape[0];
    let mut data = Vec::new();
    for &i in idx {
        data.extend_from_slice(&x.data[i * stride..(i + 1) * stride]);
    }
    let mut shape = x.shape.clone();
    shape[0] = idx.len();
    Arr::new(shape, data)
}

pub fn mean_rows(x: &Arr) -> Arr {
    let (n, m) = (x.shape[0], x.shape[1]);
    let mut acc = vec![0.0; m];
    for row in x.data.chunks(m) {
        for j in 0..m {
            acc[j] += row[j];
        }
    }
    Arr::new(vec![m], acc.iter().map(|v| v / n as f64).collect())
}

pub fn pick(x: &Arr, idx: &[usize]) -> Arr {
    let m = x.cols();
    Arr::new(vec![idx.len()], idx.iter().enumerate().map(|(r, &c)| x.data[r * m + c]).collect())
}

pub fn sq_dist(a: &Arr, b: &Arr) -> Arr {
    let d = a.cols();
    Arr::new(
        vec![a.rows()],
        a.data
            .chunks(d)
            .zip(b.data.chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect(),
    )
}

pub type Params = BTreeMap<String, Arr>;

pub fn params_f64(p: &ParamSet) -> Params {
    p.entries()
        .iter()
        .map(|e| (e.name.clone(), Arr::from_tensor(&e.value)))
        .collect()
}

fn linear(p: &Params, name: &str, x: &Arr) -> Arr {
    add_row(&matmul(x, &p[&format!("{name}.weight")]), &p[&format!("{name}.bias")])
}

pub fn features(cfg: &ModelConfig, p: &Params, x: &Arr) -> Arr {
    let mut h = x.clone();
    for (i, stage) in cfg.conv.iter().enumerate() {
        h = conv2d(&h, &p[&format!("features.conv{i}.weight")], &p[&format!("features.conv{i}.bias")], 1);
        h = max_pool(&relu(&h), stage.pool);
    }
    relu(&linear(p, "features.fc", &flatten(&h)))
}

pub fn logits(p: &Params, f: &Arr) -> Arr {
    linear(p, "classifier.fc", f)
}

pub fn metric(p: &Params, f: &Arr) -> Arr {
    linear(p, "metric.fc1", &relu(&linear(p, "metric.fc0", f)))
}

pub fn cross_entropy(groups: &[(Arr, Vec<usize>)]) -> f64 {
    let per: f64 = groups
        .iter()
        .map(|(l, y)| -pick(&log_softmax_rows(l, 1.0), y).mean())
        .sum();
    per / groups.len() as f64
}

pub fn soft_confusion(logits: &Arr, labels: &[usize], classes: usize, tau: f64) -> Vec<Vec<f64>> {
    let probs = softmax_rows(logits, tau);
    (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let m = mean_rows(&select_rows(&probs, &idx)).map(|v| v.max(1e-12));
            let z = m.sum();
            m.data.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

pub fn alignment_pair(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| 0.5 * (kl(p, q) + kl(q, p)))
        .sum::<f64>()
        / a.len() as f64
}

pub fn triplet(a: &Arr, p: &Arr, n: &Arr, margin: f64) -> f64 {
    let dap = sq_dist(a, p);
    let dan = sq_dist(a, n);
    dap.data
        .iter()
        .zip(&dan.data)
        .map(|(x, y)| (x - y + margin).max(0.0))
        .sum::<f64>()
        / dap.data.len() as f64
}
