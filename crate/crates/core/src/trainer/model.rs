//! Desk-scale models with analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `f(w) = 1/2 ||A w - b||^2` with a sparse random `A` and `b = A w*`.
    Quadratic {
        dim: usize,
        rows: usize,
        /// Nonzeros per row of `A`.
        row_nnz: usize,
        /// Euclidean norm of each row of `A`.
        row_norm: f64,
        /// Fraction of nonzero coordinates in the planted solution `w*`.
        optimum_density: f64,
        init_scale: f64,
    },
    /// Multinomial logistic regression on Gaussian clusters.
    Softmax {
        features: usize,
        classes: usize,
        train_samples: usize,
        eval_samples: usize,
        separation: f64,
        init_scale: f64,
    },
    /// One tanh hidden layer followed by softmax, same data as `Softmax`.
    Mlp {
        features: usize,
        hidden: usize,
        classes: usize,
        train_samples: usize,
        eval_samples: usize,
        separation: f64,
        init_scale: f64,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Softmax {
            features: 512,
            classes: 10,
            train_samples: 4096,
            eval_samples: 1024,
            separation: 1.5,
            init_scale: 0.01,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("task.{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            TaskConfig::Quadratic {
                dim,
                rows,
                row_nnz,
                row_norm,
                optimum_density,
                init_scale,
            } => {
                nonzero("dim", dim)?;
                nonzero("rows", rows)?;
                nonzero("row_nnz", row_nnz)?;
                if row_nnz > dim {
                    return Err(Error::config("task.row_nnz must not exceed task.dim"));
                }
                if !(row_norm > 0.0) {
                    return Err(Error::config("task.row_norm must be positive"));
                }
                if !(0.0..=1.0).contains(&optimum_density) {
                    return Err(Error::config("task.optimum_density must lie in [0, 1]"));
                }
                if !(init_scale >= 0.0) {
                    return Err(Error::config("task.init_scale must be non-negative"));
                }
            }
            TaskConfig::Softmax {
                features,
                classes,
                train_samples,
                eval_samples,
                ..
            }
            | TaskConfig::Mlp {
                features,
                classes,
                train_samples,
                eval_samples,
                ..
            } => {
                nonzero("features", features)?;
                nonzero("train_samples", train_samples)?;
                nonzero("eval_samples", eval_samples)?;
                if classes < 2 {
                    return Err(Error::config("task.classes must be at least 2"));
                }
                if let TaskConfig::Mlp { hidden, .. } = self {
                    nonzero("hidden", *hidden)?;
                }
            }
        }
        Ok(())
    }

    /// Parameter count of the model this config builds.
    pub fn dim(&self) -> usize {
        match *self {
            TaskConfig::Quadratic { dim, .. } => dim,
            TaskConfig::Softmax { features, classes, .. } => classes * features + classes,
            TaskConfig::Mlp {
                features,
                hidden,
                classes,
                ..
            } => hidden * features + hidden + classes * hidden + classes,
        }
    }
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone)]
struct Csr {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|j| self.vals[j] * x[self.col_idx[j]])
                    .sum()
            })
            .collect()
    }

    fn mul_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            for j in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[j]] += self.vals[j] * yr;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Csr,
    b: Vec<f64>,
    optimum: Vec<f64>,
}

impl Quadratic {
    fn generate(
        dim: usize,
        rows: usize,
        row_nnz: usize,
        row_norm: f64,
        optimum_density: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(rows * row_nnz);
        let mut vals = Vec::with_capacity(rows * row_nnz);
        row_ptr.push(0);
        for _ in 0..rows {
            let mut cols: Vec<usize> = sample(rng, dim, row_nnz).into_vec();
            cols.sort_unstable();
            let raw: Vec<f64> = cols.iter().map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (c, v) in cols.into_iter().zip(raw) {
                col_idx.push(c);
                vals.push(v / norm * row_norm);
            }
            row_ptr.push(col_idx.len());
        }
        let optimum: Vec<f64> = (0..dim)
            .map(|_| {
                if rng.random_bool(optimum_density) {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        let a = Csr {
            cols: dim,
            row_ptr,
            col_idx,
            vals,
        };
        let b = a.mul(&optimum);
        Self { a, b, optimum }
    }

    /// The planted solution `w*`, a global minimizer.
    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let r = self.residual(w);
        0.5 * r.iter().map(|v| v * v).sum::<f64>()
    }

    /// `A^T (A w - b)`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        self.a.mul_transpose(&self.residual(w))
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.a.mul(w);
        for (ri, bi) in r.iter_mut().zip(&self.b) {
            *ri -= bi;
        }
        r
    }

    /// Largest eigenvalue of `A^T A` by power iteration: the gradient's
    /// Lipschitz constant.
    pub fn lipschitz(&self, iters: usize) -> f64 {
        let mut v = vec![1.0 / (self.a.cols as f64).sqrt(); self.a.cols];
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = self.a.mul_transpose(&self.a.mul(&v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

/// Labelled Gaussian clusters shared by the classifier tasks.
#[derive(Debug, Clone)]
struct Clusters {
    features: usize,
    classes: usize,
    train_x: Vec<f64>,
    train_y: Vec<usize>,
    eval_x: Vec<f64>,
    eval_y: Vec<usize>,
}

impl Clusters {
    fn generate(
        features: usize,
        classes: usize,
        train: usize,
        eval: usize,
        separation: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = separation / (features as f64).sqrt();
        let means: Vec<f64> = (0..classes * features)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut draw = |n: usize| {
            let mut x = Vec::with_capacity(n * features);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..classes);
                y.push(c);
                for f in 0..features {
                    let noise: f64 = rng.sample(StandardNormal);
                    x.push(means[c * features + f] + noise / (features as f64).sqrt());
                }
            }
            (x, y)
        };
        let (train_x, train_y) = draw(train);
        let (eval_x, eval_y) = draw(eval);
        Self {
            features,
            classes,
            train_x,
            train_y,
            eval_x,
            eval_y,
        }
    }

    fn train_row(&self, i: usize) -> &[f64] {
        &self.train_x[i * self.features..(i + 1) * self.features]
    }

    fn eval_row(&self, i: usize) -> &[f64] {
        &self.eval_x[i * self.features..(i + 1) * self.features]
    }

    fn train_len(&self) -> usize {
        self.train_y.len()
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy of `probs_fn` over the eval split.
fn evaluate(data: &Clusters, mut probs_fn: impl FnMut(&[f64]) -> Vec<f64>) -> (f64, f64) {
    let n = data.eval_y.len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let p = probs_fn(data.eval_row(i));
        let y = data.eval_y[i];
        loss -= p[y].max(1e-300).ln();
        if argmax(&p) == y {
            correct += 1;
        }
    }
    (loss / n as f64, correct as f64 / n as f64)
}

#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    data: Clusters,
}

impl SoftmaxClassifier {
    fn probs(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (f, k) = (self.data.features, self.data.classes);
        let bias = &w[k * f..];
        let mut logits: Vec<f64> = (0..k)
            .map(|c| {
                let row = &w[c * f..(c + 1) * f];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c]
            })
            .collect();
        softmax_in_place(&mut logits);
        logits
    }

    fn gradient(&self, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let (f, k) = (self.data.features, self.data.classes);
        let mut g = vec![0.0; w.len()];
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            let x = self.data.train_row(i);
            let mut p = self.probs(w, x);
            p[self.data.train_y[i]] -= 1.0;
            for c in 0..k {
                let d = p[c] * inv;
                for (gj, xj) in g[c * f..(c + 1) * f].iter_mut().zip(x) {
                    *gj += d * xj;
                }
                g[k * f + c] += d;
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    data: Clusters,
    hidden: usize,
}

impl Mlp {
    // layout: W1 (h x f), b1 (h), W2 (k x h), b2 (k)
    fn offsets(&self) -> (usize, usize, usize) {
        let (f, h, k) = (self.data.features, self.hidden, self.data.classes);
        let b1 = h * f;
        let w2 = b1 + h;
        let b2 = w2 + k * h;
        debug_assert_eq!(b2 + k, h * f + h + k * h + k);
        (b1, w2, b2)
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (f, h, k) = (self.data.features, self.hidden, self.data.classes);
        let (b1, w2, b2) = self.offsets();
        let act: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w[j * f..(j + 1) * f];
                (row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[b1 + j]).tanh()
            })
            .collect();
        let mut out: Vec<f64> = (0..k)
            .map(|c| {
                let row = &w[w2 + c * h..w2 + (c + 1) * h];
                row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + w[b2 + c]
            })
            .collect();
        softmax_in_place(&mut out);
        (act, out)
    }

    fn gradient(&self, w: &[f64], batch: &[usize]) -> Vec<f64> {
        let (f, h, k) = (self.data.features, self.hidden, self.data.classes);
        let (b1, w2, b2) = self.offsets();
        let mut g = vec![0.0; w.len()];
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            let x = self.data.train_row(i);
            let (act, mut p) = self.forward(w, x);
            p[self.data.train_y[i]] -= 1.0;
            let mut dact = vec![0.0; h];
            for c in 0..k {
                let d = p[c] * inv;
                for j in 0..h {
                    g[w2 + c * h + j] += d * act[j];
                    dact[j] += d * w[w2 + c * h + j];
                }
                g[b2 + c] += d;
            }
            for j in 0..h {
                let dz = dact[j] * (1.0 - act[j] * act[j]);
                for (gj, xj) in g[j * f..(j + 1) * f].iter_mut().zip(x) {
                    *gj += dz * xj;
                }
                g[b1 + j] += dz;
            }
        }
        g
    }
}

/// A desk-scale stand-in for the training workload.
#[derive(Debug, Clone)]
pub enum ToyModel {
    Quadratic(Quadratic),
    Softmax(SoftmaxClassifier),
    Mlp(Mlp),
}

/// Built model plus its deterministic initial parameters.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub model: ToyModel,
    pub init_params: Vec<f64>,
    seed: u64,
    initial_loss: f64,
}

impl ModelInstance {
    pub fn build(cfg: &TaskConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, init_scale) = match *cfg {
            TaskConfig::Quadratic {
                dim,
                rows,
                row_nnz,
                row_norm,
                optimum_density,
                init_scale,
            } => (
                ToyModel::Quadratic(Quadratic::generate(dim, rows, row_nnz, row_norm, optimum_density, &mut rng)),
                init_scale,
            ),
            TaskConfig::Softmax {
                features,
                classes,
                train_samples,
                eval_samples,
                separation,
                init_scale,
            } => (
                ToyModel::Softmax(SoftmaxClassifier {
                    data: Clusters::generate(features, classes, train_samples, eval_samples, separation, &mut rng),
                }),
                init_scale,
            ),
            TaskConfig::Mlp {
                features,
                hidden,
                classes,
                train_samples,
                eval_samples,
                separation,
                init_scale,
            } => (
                ToyModel::Mlp(Mlp {
                    data: Clusters::generate(features, classes, train_samples, eval_samples, separation, &mut rng),
                    hidden,
                }),
                init_scale,
            ),
        };
        let init_params: Vec<f64> = (0..cfg.dim())
            .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut out = Self {
            model,
            init_params,
            seed,
            initial_loss: 0.0,
        };
        out.initial_loss = out.model.loss(&out.init_params);
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.init_params.len()
    }

    pub fn initial_loss(&self) -> f64 {
        self.initial_loss
    }

    /// Loss and accuracy at `w`. For the quadratic task accuracy is the
    /// fraction of the initial loss removed, clipped to `[0, 1]`.
    pub fn evaluate(&self, w: &[f64]) -> (f64, f64) {
        match &self.model {
            ToyModel::Quadratic(q) => {
                let loss = q.loss(w);
                let acc = if self.initial_loss > 0.0 {
                    (1.0 - loss / self.initial_loss).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                (loss, acc)
            }
            ToyModel::Softmax(m) => evaluate(&m.data, |x| m.probs(w, x)),
            ToyModel::Mlp(m) => evaluate(&m.data, |x| m.forward(w, x).1),
        }
    }

    /// Whether every worker computes the same gradient (full-batch tasks).
    /// Step size used when the config leaves it unset.
    pub fn default_lr(&self) -> f64 {
        match self.model {
            ToyModel::Quadratic(_) => 0.05,
            ToyModel::Softmax(_) | ToyModel::Mlp(_) => 0.1,
        }
    }

    pub fn full_batch(&self) -> bool {
        matches!(self.model, ToyModel::Quadratic(_))
    }

    /// Gradient computed by `worker` for step `batch_seed`. The quadratic task
    /// uses the full-batch analytic gradient; the classifiers draw a
    /// `batch`-sized minibatch from a stream keyed by (seed, worker, step).
    pub fn local_gradient(
        &self,
        w: &[f64],
        worker: usize,
        batch_seed: u64,
        batch: usize,
    ) -> Result<GradientVector> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: w.len(),
            });
        }
        let values = match &self.model {
            ToyModel::Quadratic(q) => q.gradient(w),
            ToyModel::Softmax(m) => m.gradient(w, &self.minibatch(m.data.train_len(), worker, batch_seed, batch)),
            ToyModel::Mlp(m) => m.gradient(w, &self.minibatch(m.data.train_len(), worker, batch_seed, batch)),
        };
        GradientVector::new(values, batch_seed)
    }

    fn minibatch(&self, n: usize, worker: usize, batch_seed: u64, batch: usize) -> Vec<usize> {
        let key = mix(mix(self.seed ^ 0x5eed, worker as u64), batch_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

impl ToyModel {
    pub fn loss(&self, w: &[f64]) -> f64 {
        match self {
            ToyModel::Quadratic(q) => q.loss(w),
            ToyModel::Softmax(m) => evaluate(&m.data, |x| m.probs(w, x)).0,
            ToyModel::Mlp(m) => evaluate(&m.data, |x| m.forward(w, x).1).0,
        }
    }
}

// splitmix64 finalizer over a combined key
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
