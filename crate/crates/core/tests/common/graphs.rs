//! Random small computation graphs evaluated both on the tape (f32) and by
//! the f64 reference, for primitive-level gradient checks.

use hadg::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, Arr};

#[derive(Clone, Debug)]
pub enum Step {
    Linear { w: usize, b: usize },
    Relu,
    ScaledExp(f32),
    Softmax(f32),
    LogSoftmax(f32),
    MulLeaf(usize),
    AddLeaf(usize),
    SubLeaf(usize),
    DivLeaf(usize),
    MulScalarLeaf(usize),
    LogOnePlusSquare,
    NormalizeBySquares,
    SelectRows(Vec<usize>),
    ClampMin(f32),
}

#[derive(Clone, Debug)]
pub enum Reduce {
    Sum,
    Mean,
    MeanRowsSum,
    PickSum(Vec<usize>),
    SqDistMean(usize),
}

#[derive(Clone, Debug)]
pub struct Graph {
    pub leaves: Vec<Tensor>,
    pub conv: (usize, usize, usize, usize),
    pub stride: usize,
    pub pool: Option<usize>,
    pub relu_after_conv: bool,
    pub steps: Vec<Step>,
    pub reduce: Reduce,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

impl Graph {
    pub fn random(seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=3);
        let c = rng.random_range(1..=2);
        let side = rng.random_range(6..=9);
        let o = rng.random_range(2..=3);
        let k = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let mut leaves = vec![
            uniform(&mut rng, &[n, c, side, side], -1.0, 1.0),
            uniform(&mut rng, &[o, c, k, k], -0.5, 0.5),
            uniform(&mut rng, &[o], -0.1, 0.1),
        ];
        let conv_side = (side - k) / stride + 1;
        let pool = (conv_side >= 4 || seed.is_multiple_of(2)).then_some(2);
        let pooled = pool.map_or(conv_side, |p| conv_side / p);
        let mut rows = n;
        let mut cols = o * pooled * pooled;
        let mut steps = Vec::new();
        let count = rng.random_range(3..=6);
        for _ in 0..count {
            let pick = rng.random_range(0..14);
            let step = match pick {
                0 => {
                    let out = rng.random_range(2..=4);
                    leaves.push(uniform(&mut rng, &[cols, out], -0.7, 0.7));
                    leaves.push(uniform(&mut rng, &[out], -0.2, 0.2));
                    cols = out;
                    Step::Linear { w: leaves.len() - 2, b: leaves.len() - 1 }
                }
                1 => Step::Relu,
                2 => Step::ScaledExp(rng.random_range(0.1..0.4)),
                3 => Step::Softmax(rng.random_range(0.5..3.0)),
                4 => Step::LogSoftmax(rng.random_range(0.5..3.0)),
                5..=7 => {
                    leaves.push(uniform(&mut rng, &[rows, cols], -1.0, 1.0));
                    let id = leaves.len() - 1;
                    match pick {
                        5 => Step::MulLeaf(id),
                        6 => Step::AddLeaf(id),
                        _ => Step::SubLeaf(id),
                    }
                }
                8 => {
                    leaves.push(uniform(&mut rng, &[rows, cols], 1.0, 2.0));
                    Step::DivLeaf(leaves.len() - 1)
                }
                9 => {
                    leaves.push(uniform(&mut rng, &[1], 0.5, 1.5));
                    Step::MulScalarLeaf(leaves.len() - 1)
                }
                10 => Step::LogOnePlusSquare,
                11 => Step::NormalizeBySquares,
                12 => {
                    let k = rng.random_range(1..=rows + 1);
                    let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..rows)).collect();
                    rows = k;
                    Step::SelectRows(idx)
                }
                _ => Step::ClampMin(rng.random_range(-0.5..0.5)),
            };
            steps.push(step);
        }
        let reduce = match rng.random_range(0..5) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            2 => Reduce::MeanRowsSum,
            3 => Reduce::PickSum((0..rows).map(|_| rng.random_range(0..cols)).collect()),
            _ => {
                leaves.push(uniform(&mut rng, &[rows, cols], -1.0, 1.0));
                Reduce::SqDistMean(leaves.len() - 1)
            }
        };
        Graph {
            leaves,
            conv: (n, c, o, k),
            stride,
            pool,
            relu_after_conv: rng.random_bool(0.5),
            steps,
            reduce,
        }
    }

    /// Build on the tape; returns the scalar root and the leaf vars.
    pub fn build(&self, tape: &mut Tape) -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = self.leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut x = tape.conv2d(leaves[0], leaves[1], leaves[2], self.stride).unwrap();
        if self.relu_after_conv {
            x = tape.relu(x);
        }
        if let Some(p) = self.pool {
            x = tape.max_pool2d(x, p).unwrap();
        }
        x = tape.flatten(x).unwrap();
        for s in &self.steps {
            x = match s {
                Step::Linear { w, b } => {
                    let y = tape.matmul(x, leaves[*w]).unwrap();
                    tape.add_row(y, leaves[*b]).unwrap()
                }
                Step::Relu => tape.relu(x),
                Step::ScaledExp(f) => {
                    let y = tape.scale(x, *f);
                    tape.exp(y)
                }
                Step::Softmax(t) => tape.softmax(x, *t).unwrap(),
                Step::LogSoftmax(t) => tape.log_softmax(x, *t).unwrap(),
                Step::MulLeaf(i) | Step::MulScalarLeaf(i) => tape.mul(x, leaves[*i]).unwrap(),
                Step::AddLeaf(i) => tape.add(x, leaves[*i]).unwrap(),
                Step::SubLeaf(i) => tape.sub(x, leaves[*i]).unwrap(),
                Step::DivLeaf(i) => tape.div(x, leaves[*i]).unwrap(),
                Step::LogOnePlusSquare => {
                    let sq = tape.mul(x, x).unwrap();
                    let sh = tape.add_scalar(sq, 1.0);
                    tape.log(sh)
                }
                Step::NormalizeBySquares => {
                    let sq = tape.mul(x, x).unwrap();
                    let s = tape.sum(sq);
                    let d = tape.add_scalar(s, 1.0);
                    tape.div(x, d).unwrap()
                }
                Step::SelectRows(idx) => tape.select_rows(x, idx).unwrap(),
                Step::ClampMin(f) => tape.clamp_min(x, *f),
            };
        }
        let root = match &self.reduce {
            Reduce::Sum => tape.sum(x),
            Reduce::Mean => tape.mean(x),
            Reduce::MeanRowsSum => {
                let m = tape.mean_rows(x).unwrap();
                tape.sum(m)
            }
            Reduce::PickSum(idx) => {
                let p = tape.pick(x, idx).unwrap();
                tape.sum(p)
            }
            Reduce::SqDistMean(i) => {
                let d = tape.sq_dist(x, leaves[*i]).unwrap();
                tape.mean(d)
            }
        };
        (root, leaves)
    }

    pub fn reference(&self, leaves: &[Arr]) -> f64 {
        let mut x = r::conv2d(&leaves[0], &leaves[1], &leaves[2], self.stride);
        if self.relu_after_conv {
            x = r::relu(&x);
        }
        if let Some(p) = self.pool {
            x = r::max_pool(&x, p);
        }
        x = r::flatten(&x);
        for s in &self.steps {
            x = match s {
                Step::Linear { w, b } => r::add_row(&r::matmul(&x, &leaves[*w]), &leaves[*b]),
                Step::Relu => r::relu(&x),
                Step::ScaledExp(f) => x.map(|v| (v * *f as f64).exp()),
                Step::Softmax(t) => r::softmax_rows(&x, *t as f64),
                Step::LogSoftmax(t) => r::log_softmax_rows(&x, *t as f64),
                Step::MulLeaf(i) | Step::MulScalarLeaf(i) => x.zip(&leaves[*i], |a, b| a * b),
                Step::AddLeaf(i) => x.zip(&leaves[*i], |a, b| a + b),
                Step::SubLeaf(i) => x.zip(&leaves[*i], |a, b| a - b),
                Step::DivLeaf(i) => x.zip(&leaves[*i], |a, b| a / b),
                Step::LogOnePlusSquare => x.map(|v| (v * v + 1.0).ln()),
                Step::NormalizeBySquares => {
                    let d = x.data.iter().map(|v| v * v).sum::<f64>() + 1.0;
                    x.map(|v| v / d)
                }
                Step::SelectRows(idx) => r::select_rows(&x, idx),
                Step::ClampMin(f) => x.map(|v| v.max(*f as f64)),
            };
        }
        match &self.reduce {
            Reduce::Sum => x.sum(),
            Reduce::Mean => x.mean(),
            Reduce::MeanRowsSum => r::mean_rows(&x).sum(),
            Reduce::PickSum(idx) => r::pick(&x, idx).sum(),
            Reduce::SqDistMean(i) => r::sq_dist(&x, &leaves[*i]).mean(),
        }
    }
}
