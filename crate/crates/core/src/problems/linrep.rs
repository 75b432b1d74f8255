//! Multi-task binary classification through a shared linear representation.
//!
//! The outer variable is a representation matrix mapping inputs to a lower
//! dimensional space; each task owns a two-logit linear head over that
//! space. The inner objective is the softmax cross-entropy on the task's
//! training split plus a ridge penalty on the head, which makes it strongly
//! convex; the outer objective is the cross-entropy on a validation split,
//! and the reporting loss uses a held-out test split.
//!
//! Tasks either come from seeded class-conditional Gaussians, whose mean
//! separation controls how easy a task is, or from an IDX image/label pair
//! on disk with one task per configured class pair.

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, check_task, MorbitError, Result};
use crate::linalg::{norm2, DenseMatrix};
use crate::oracles::{BatchHandle, BatchSize, ProblemOracles};
use crate::problems::idx::{parse_idx, IdxTensor};

/// Class-mean separation (in noise standard deviations) of an easy task.
pub const EASY_SEPARATION: f64 = 3.0;
/// Class-mean separation of a hard task.
pub const HARD_SEPARATION: f64 = 0.8;

/// Dimensions, regularization, and sampling defaults of a suite.
///
/// `desk` keeps dense inner solves cheap; `paper_scale` matches the original
/// 784-pixel experiment. The batch fields are the suggested solver batch
/// sizes for this family; the per-task counts size the synthetic splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRepSpec {
    pub input_dim: usize,
    pub rep_dim: usize,
    /// Ridge coefficient on the head; the inner Hessian is then bounded
    /// below by twice this value.
    pub l2_coeff: f64,
    pub g_batch: usize,
    pub f_batch: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
}

impl LinRepSpec {
    pub fn desk() -> Self {
        LinRepSpec {
            input_dim: 64,
            rep_dim: 16,
            l2_coeff: 0.0005,
            g_batch: 8,
            f_batch: 128,
            train_per_task: 256,
            val_per_task: 128,
            test_per_task: 256,
        }
    }

    pub fn paper_scale() -> Self {
        LinRepSpec {
            input_dim: 784,
            rep_dim: 100,
            ..LinRepSpec::desk()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.rep_dim == 0 {
            return Err(MorbitError::domain("dimensions must be positive"));
        }
        if !(self.l2_coeff.is_finite() && self.l2_coeff > 0.0) {
            return Err(MorbitError::NotStronglyConvex(
                "head ridge coefficient must be positive".into(),
            ));
        }
        if self.g_batch == 0 || self.f_batch == 0 {
            return Err(MorbitError::domain("batch sizes must be positive"));
        }
        Ok(())
    }
}

impl Default for LinRepSpec {
    fn default() -> Self {
        LinRepSpec::desk()
    }
}

/// One labelled split: `count` feature rows of `input_dim` entries each.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    features: Vec<f64>,
    labels: Vec<u8>,
    dim: usize,
}

impl Split {
    pub fn new(features: Vec<f64>, labels: Vec<u8>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(MorbitError::domain("split must contain at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(MorbitError::Shape {
                what: "split features",
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MorbitError::domain("labels must be 0 or 1"));
        }
        Ok(Split {
            features,
            labels,
            dim,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Train, validation, and held-out test data for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Where a suite's tasks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LinRepSource {
    /// Seeded class-conditional Gaussians: `n_easy` tasks at the easy mean
    /// separation followed by `n_hard` at the hard one.
    SyntheticGaussian {
        n_easy: usize,
        n_hard: usize,
        seed: u64,
    },
    /// An IDX image file plus label file; one binary task per class pair
    /// (first class of a pair becomes label 0). Samples of each pair are
    /// shuffled with the seed and split 60/20/20.
    IdxDataset {
        images: PathBuf,
        labels: PathBuf,
        pairs: Vec<(u8, u8)>,
        seed: u64,
    },
}

/// Builds the suite described by `spec` from the given source.
pub fn linrep_suite(spec: &LinRepSpec, source: &LinRepSource) -> Result<LinRepProblem> {
    spec.validate()?;
    match source {
        LinRepSource::SyntheticGaussian {
            n_easy,
            n_hard,
            seed,
        } => {
            if n_easy + n_hard == 0 {
                return Err(MorbitError::domain("suite needs at least one task"));
            }
            let mut tasks = Vec::with_capacity(n_easy + n_hard);
            for i in 0..n_easy + n_hard {
                let sep = if i < *n_easy {
                    EASY_SEPARATION
                } else {
                    HARD_SEPARATION
                };
                tasks.push(synthetic_task(spec, sep, stream_seed(*seed, i as u64))?);
            }
            LinRepProblem::from_datasets(spec.clone(), tasks, stream_seed(*seed, u64::MAX))
        }
        LinRepSource::IdxDataset {
            images,
            labels,
            pairs,
            seed,
        } => {
            if pairs.is_empty() {
                return Err(MorbitError::domain("at least one class pair is required"));
            }
            let (features, dim, label_bytes) = load_idx_pair(images, labels)?;
            if dim != spec.input_dim {
                return Err(MorbitError::Shape {
                    what: "image pixels per sample",
                    expected: spec.input_dim,
                    got: dim,
                });
            }
            let mut tasks = Vec::with_capacity(pairs.len());
            for (i, &(a, b)) in pairs.iter().enumerate() {
                tasks.push(pair_task(
                    spec,
                    &features,
                    &label_bytes,
                    a,
                    b,
                    stream_seed(*seed, i as u64),
                )?);
            }
            LinRepProblem::from_datasets(spec.clone(), tasks, stream_seed(*seed, u64::MAX))
        }
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(2).wrapping_add(1))
}

/// Two Gaussian classes at `±separation/2` along a task-specific unit
/// direction, unit isotropic noise, balanced labels.
fn synthetic_task(spec: &LinRepSpec, separation: f64, seed: u64) -> Result<TaskData> {
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut direction: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = norm2(&direction);
    for v in direction.iter_mut() {
        *v /= n;
    }
    let mut draw_split = |count: usize| -> Result<Split> {
        let mut features = Vec::with_capacity(count * d);
        let mut labels = Vec::with_capacity(count);
        for j in 0..count {
            let label = (j % 2) as u8;
            let shift = if label == 1 { 0.5 } else { -0.5 } * separation;
            for dir in &direction {
                features.push(shift * dir + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(label);
        }
        Split::new(features, labels, d)
    };
    Ok(TaskData {
        train: draw_split(spec.train_per_task)?,
        val: draw_split(spec.val_per_task)?,
        test: draw_split(spec.test_per_task)?,
    })
}

fn load_idx_pair(images: &PathBuf, labels: &PathBuf) -> Result<(Vec<f64>, usize, Vec<u8>)> {
    let imgs = match parse_idx(images)? {
        IdxTensor::Images {
            count,
            rows,
            cols,
            pixels,
        } => (pixels, rows * cols, count),
        IdxTensor::Labels(_) => {
            return Err(MorbitError::domain(
                "image path parsed as a label vector; the arguments may be swapped",
            ))
        }
    };
    let lbls = match parse_idx(labels)? {
        IdxTensor::Labels(l) => l,
        IdxTensor::Images { .. } => {
            return Err(MorbitError::domain(
                "label path parsed as an image tensor; the arguments may be swapped",
            ))
        }
    };
    if imgs.2 != lbls.len() {
        return Err(MorbitError::Shape {
            what: "image/label counts",
            expected: imgs.2,
            got: lbls.len(),
        });
    }
    Ok((imgs.0, imgs.1, lbls))
}

/// One binary task out of a labelled image set: samples of the two classes,
/// seeded shuffle, 60/20/20 split.
fn pair_task(
    spec: &LinRepSpec,
    features: &[f64],
    labels: &[u8],
    class_a: u8,
    class_b: u8,
    seed: u64,
) -> Result<TaskData> {
    if class_a == class_b {
        return Err(MorbitError::domain("class pair must name two classes"));
    }
    let d = spec.input_dim;
    let mut picked: Vec<(usize, u8)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            if l == class_a {
                Some((i, 0))
            } else if l == class_b {
                Some((i, 1))
            } else {
                None
            }
        })
        .collect();
    for (class, name) in [(0u8, class_a), (1u8, class_b)] {
        if !picked.iter().any(|&(_, l)| l == class) {
            return Err(MorbitError::domain(format!(
                "class {name} has no samples in the label file"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates
    for i in (1..picked.len()).rev() {
        picked.swap(i, rng.gen_range(0..=i));
    }
    let n = picked.len();
    let n_train = (n * 6 / 10).max(1);
    let n_val = (n * 2 / 10).max(1);
    if n_train + n_val >= n {
        return Err(MorbitError::domain(format!(
            "classes {class_a} and {class_b} have only {n} samples, too few to split"
        )));
    }
    let build = |range: &[(usize, u8)]| -> Result<Split> {
        let mut f = Vec::with_capacity(range.len() * d);
        let mut l = Vec::with_capacity(range.len());
        for &(idx, label) in range {
            f.extend_from_slice(&features[idx * d..(idx + 1) * d]);
            l.push(label);
        }
        Split::new(f, l, d)
    };
    Ok(TaskData {
        train: build(&picked[..n_train])?,
        val: build(&picked[n_train..n_train + n_val])?,
        test: build(&picked[n_train + n_val..])?,
    })
}

/// The assembled problem: shared representation, one logistic head per task.
#[derive(Debug, Clone)]
pub struct LinRepProblem {
    spec: LinRepSpec,
    tasks: Vec<TaskData>,
    init_seed: u64,
}

/// Per-sample forward state: projected features, softmax, and the
/// cross-entropy logit residual `p − onehot(label)`.
struct SampleEval {
    z: Vec<f64>,
    p: [f64; 2],
    q: [f64; 2],
    ce: f64,
}

impl LinRepProblem {
    /// Builds the problem from explicit per-task datasets.
    pub fn from_datasets(
        spec: LinRepSpec,
        tasks: Vec<TaskData>,
        init_seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if tasks.is_empty() {
            return Err(MorbitError::domain("suite needs at least one task"));
        }
        for (i, t) in tasks.iter().enumerate() {
            for split in [&t.train, &t.val, &t.test] {
                if split.dim != spec.input_dim {
                    return Err(MorbitError::Shape {
                        what: "task feature dimension",
                        expected: spec.input_dim,
                        got: split.dim,
                    }
                    .for_task(i));
                }
            }
        }
        Ok(LinRepProblem {
            spec,
            tasks,
            init_seed,
        })
    }

    pub fn spec(&self) -> &LinRepSpec {
        &self.spec
    }

    pub fn task_data(&self, task: usize) -> &TaskData {
        &self.tasks[task]
    }

    /// Splits used by the three oracle groups: inner oracles read the
    /// training split, outer oracles the validation split, the reporting
    /// loss the test split.
    fn split(&self, task: usize, which: SplitKind) -> &Split {
        let t = &self.tasks[task];
        match which {
            SplitKind::Train => &t.train,
            SplitKind::Val => &t.val,
            SplitKind::Test => &t.test,
        }
    }

    fn batch_rows(&self, task: usize, batch: &BatchHandle, which: SplitKind) -> Vec<usize> {
        let count = self.split(task, which).count();
        match batch.size {
            BatchSize::Full => (0..count).collect(),
            BatchSize::Size(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    batch.seed ^ (task as u64).wrapping_mul(0x9e37_79b9),
                );
                (0..m).map(|_| rng.gen_range(0..count)).collect()
            }
        }
    }

    fn eval_sample(&self, row: &[f64], x: &[f64], y: &[f64]) -> (Vec<f64>, [f64; 2]) {
        let r = self.spec.rep_dim;
        let mut z = vec![0.0; r];
        for (d, &feat) in row.iter().enumerate() {
            if feat != 0.0 {
                let xrow = &x[d * r..(d + 1) * r];
                for (zv, xv) in z.iter_mut().zip(xrow) {
                    *zv += feat * xv;
                }
            }
        }
        let mut logits = [0.0; 2];
        for (rr, &zv) in z.iter().enumerate() {
            logits[0] += zv * y[rr * 2];
            logits[1] += zv * y[rr * 2 + 1];
        }
        (z, logits)
    }

    fn eval_batch(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
        which: SplitKind,
    ) -> Result<Vec<SampleEval>> {
        check_task(task, self.tasks.len())?;
        check_len("representation", x, self.outer_dim())?;
        check_len("head", y, 2 * self.spec.rep_dim)?;
        let split = self.split(task, which);
        let rows = self.batch_rows(task, batch, which);
        let mut out = Vec::with_capacity(rows.len());
        for i in rows {
            let (z, logits) = self.eval_sample(split.row(i), x, y);
            let m = logits[0].max(logits[1]);
            let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
            let sum = e[0] + e[1];
            let p = [e[0] / sum, e[1] / sum];
            let label = split.labels[i] as usize;
            let ce = sum.ln() + m - logits[label];
            let mut q = p;
            q[label] -= 1.0;
            out.push(SampleEval { z, p, q, ce });
        }
        Ok(out)
    }

    fn mean_ce(evals: &[SampleEval]) -> f64 {
        evals.iter().map(|e| e.ce).sum::<f64>() / evals.len() as f64
    }

    /// Mean of `feat ⊗ weight(sample)` over the batch, flattened like `x`.
    fn accumulate_outer(
        &self,
        task: usize,
        batch_rows: &[usize],
        which: SplitKind,
        weights: &[Vec<f64>],
    ) -> Vec<f64> {
        let r = self.spec.rep_dim;
        let split = self.split(task, which);
        let m = batch_rows.len() as f64;
        let mut grad = vec![0.0; self.outer_dim()];
        for (&i, w) in batch_rows.iter().zip(weights) {
            let row = split.row(i);
            for (d, &feat) in row.iter().enumerate() {
                if feat != 0.0 {
                    let s = feat / m;
                    let grow = &mut grad[d * r..(d + 1) * r];
                    for (g, wv) in grow.iter_mut().zip(w) {
                        *g += s * wv;
                    }
                }
            }
        }
        grad
    }
}

#[derive(Clone, Copy)]
enum SplitKind {
    Train,
    Val,
    Test,
}

impl ProblemOracles for LinRepProblem {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn outer_dim(&self) -> usize {
        self.spec.input_dim * self.spec.rep_dim
    }

    fn inner_dim(&self, _task: usize) -> usize {
        2 * self.spec.rep_dim
    }

    fn f_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        Ok(Self::mean_ce(&self.eval_batch(
            task,
            x,
            y,
            batch,
            SplitKind::Val,
        )?))
    }

    fn grad_x_f(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let rows = self.batch_rows(task, batch, SplitKind::Val);
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Val)?;
        let r = self.spec.rep_dim;
        let weights: Vec<Vec<f64>> = evals
            .iter()
            .map(|e| {
                (0..r)
                    .map(|rr| y[rr * 2] * e.q[0] + y[rr * 2 + 1] * e.q[1])
                    .collect()
            })
            .collect();
        Ok(self.accumulate_outer(task, &rows, SplitKind::Val, &weights))
    }

    fn grad_y_f(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Val)?;
        let r = self.spec.rep_dim;
        let m = evals.len() as f64;
        let mut grad = vec![0.0; 2 * r];
        for e in &evals {
            for (rr, &zv) in e.z.iter().enumerate() {
                grad[rr * 2] += zv * e.q[0] / m;
                grad[rr * 2 + 1] += zv * e.q[1] / m;
            }
        }
        Ok(grad)
    }

    fn g_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Train)?;
        Ok(Self::mean_ce(&evals) + self.spec.l2_coeff * crate::linalg::norm2_sq(y))
    }

    fn grad_y_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Train)?;
        let r = self.spec.rep_dim;
        let m = evals.len() as f64;
        let mut grad = vec![0.0; 2 * r];
        for e in &evals {
            for (rr, &zv) in e.z.iter().enumerate() {
                grad[rr * 2] += zv * e.q[0] / m;
                grad[rr * 2 + 1] += zv * e.q[1] / m;
            }
        }
        for (g, yv) in grad.iter_mut().zip(y) {
            *g += 2.0 * self.spec.l2_coeff * yv;
        }
        Ok(grad)
    }

    fn hvp_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        check_len("head direction", v, 2 * self.spec.rep_dim)?;
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Train)?;
        let r = self.spec.rep_dim;
        let m = evals.len() as f64;
        let mut out = vec![0.0; 2 * r];
        for e in &evals {
            let mut u = [0.0; 2];
            for (rr, &zv) in e.z.iter().enumerate() {
                u[0] += zv * v[rr * 2];
                u[1] += zv * v[rr * 2 + 1];
            }
            let s = softmax_curvature(&e.p, &u);
            for (rr, &zv) in e.z.iter().enumerate() {
                out[rr * 2] += zv * s[0] / m;
                out[rr * 2 + 1] += zv * s[1] / m;
            }
        }
        for (o, vv) in out.iter_mut().zip(v) {
            *o += 2.0 * self.spec.l2_coeff * vv;
        }
        Ok(out)
    }

    fn hvp_xy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        v: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        check_len("head direction", v, 2 * self.spec.rep_dim)?;
        let rows = self.batch_rows(task, batch, SplitKind::Train);
        let evals = self.eval_batch(task, x, y, batch, SplitKind::Train)?;
        let r = self.spec.rep_dim;
        // d/dx [∇_y g · v]: the ridge term is x-free; each sample yields
        // feat ⊗ (y·(H_softmax·vᵀz) + v·q)
        let weights: Vec<Vec<f64>> = evals
            .iter()
            .map(|e| {
                let mut u = [0.0; 2];
                for (rr, &zv) in e.z.iter().enumerate() {
                    u[0] += zv * v[rr * 2];
                    u[1] += zv * v[rr * 2 + 1];
                }
                let s = softmax_curvature(&e.p, &u);
                (0..r)
                    .map(|rr| {
                        y[rr * 2] * s[0]
                            + y[rr * 2 + 1] * s[1]
                            + v[rr * 2] * e.q[0]
                            + v[rr * 2 + 1] * e.q[1]
                    })
                    .collect()
            })
            .collect();
        Ok(self.accumulate_outer(task, &rows, SplitKind::Train, &weights))
    }

    fn dense_hess_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Option<DenseMatrix> {
        let evals = self
            .eval_batch(task, x, y, batch, SplitKind::Train)
            .ok()?;
        let r = self.spec.rep_dim;
        let d = 2 * r;
        let m = evals.len() as f64;
        let mut h = DenseMatrix::zeros(d, d);
        for e in &evals {
            // 2×2 softmax Hessian: diag(p) − p pᵀ
            let hl = [
                [e.p[0] * (1.0 - e.p[0]), -e.p[0] * e.p[1]],
                [-e.p[0] * e.p[1], e.p[1] * (1.0 - e.p[1])],
            ];
            for r1 in 0..r {
                for c1 in 0..2 {
                    for r2 in 0..r {
                        for c2 in 0..2 {
                            let i = r1 * 2 + c1;
                            let j = r2 * 2 + c2;
                            h.set(i, j, h.get(i, j) + e.z[r1] * e.z[r2] * hl[c1][c2] / m);
                        }
                    }
                }
            }
        }
        for i in 0..d {
            h.set(i, i, h.get(i, i) + 2.0 * self.spec.l2_coeff);
        }
        Some(h)
    }

    fn true_loss(&self, task: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        let evals = self.eval_batch(
            task,
            x,
            y,
            &BatchHandle::full(task),
            SplitKind::Test,
        )?;
        Ok(Self::mean_ce(&evals))
    }

    fn default_x0(&self) -> Vec<f64> {
        // zero representation is a stationary saddle (all logits and head
        // gradients vanish), so start from a seeded scaled-uniform draw
        let (d, r) = (self.spec.input_dim, self.spec.rep_dim);
        let limit = (6.0 / (d + r) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        (0..d * r).map(|_| rng.gen_range(-limit..limit)).collect()
    }
}

/// `(diag(p) − p pᵀ) u` for a two-class softmax.
fn softmax_curvature(p: &[f64; 2], u: &[f64; 2]) -> [f64; 2] {
    let mix = p[0] * u[0] + p[1] * u[1];
    [p[0] * (u[0] - mix), p[1] * (u[1] - mix)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{oracle_consistency, CheckConfig};
    use approx::assert_relative_eq;

    fn small_spec() -> LinRepSpec {
        LinRepSpec {
            input_dim: 6,
            rep_dim: 3,
            l2_coeff: 0.0005,
            g_batch: 4,
            f_batch: 8,
            train_per_task: 40,
            val_per_task: 24,
            test_per_task: 24,
        }
    }

    fn synthetic(spec: &LinRepSpec, n_easy: usize, n_hard: usize, seed: u64) -> LinRepProblem {
        linrep_suite(
            spec,
            &LinRepSource::SyntheticGaussian {
                n_easy,
                n_hard,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_representation_gives_coin_flip_loss_for_any_head() {
        let p = synthetic(&small_spec(), 1, 1, 3);
        let x = vec![0.0; p.outer_dim()];
        for y in [vec![0.0; p.inner_dim(0)], vec![0.7; p.inner_dim(0)]] {
            let loss = p.f_value(0, &x, &y, &BatchHandle::full(0)).unwrap();
            assert_relative_eq!(loss, 2.0f64.ln(), max_relative = 1e-15);
        }
    }

    #[test]
    fn oracles_agree_with_finite_differences() {
        let p = synthetic(&small_spec(), 1, 1, 11);
        let report = oracle_consistency(&p, &CheckConfig::default()).unwrap();
        for row in &report.rows {
            assert!(
                row.passed(),
                "{} task {}: {:.3e} > {:.3e}",
                row.oracle,
                row.task,
                row.max_rel_err,
                row.tol
            );
        }
    }

    #[test]
    fn inner_curvature_is_bounded_below_by_the_ridge() {
        let p = synthetic(&small_spec(), 1, 0, 5);
        let x = p.default_x0();
        let y: Vec<f64> = (0..p.inner_dim(0)).map(|i| 0.2 * i as f64 - 0.5).collect();
        let batch = BatchHandle::full(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..p.inner_dim(0)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hv = p.hvp_yy_g(0, &x, &y, &v, &batch).unwrap();
            let rayleigh =
                crate::linalg::dot(&v, &hv) / crate::linalg::norm2_sq(&v);
            assert!(
                rayleigh >= 2.0 * 0.0005 - 1e-12,
                "rayleigh {rayleigh} below ridge floor"
            );
        }
        let dense = p.dense_hess_yy_g(0, &x, &y, &batch).unwrap();
        assert!(dense.cholesky().is_ok());
    }

    #[test]
    fn identical_datasets_give_identical_outer_values() {
        let spec = small_spec();
        let data = synthetic_task(&spec, EASY_SEPARATION, 77).unwrap();
        let p =
            LinRepProblem::from_datasets(spec, vec![data.clone(), data], 1).unwrap();
        let x = p.default_x0();
        let y = vec![0.3; p.inner_dim(0)];
        let a = p.f_value(0, &x, &y, &BatchHandle::full(0)).unwrap();
        let b = p.f_value(1, &x, &y, &BatchHandle::full(1)).unwrap();
        assert_eq!(a, b, "full batches over identical data must agree exactly");
    }

    #[test]
    fn minibatches_replay_and_splits_are_disjoint_sources() {
        let p = synthetic(&small_spec(), 1, 0, 21);
        let x = p.default_x0();
        // the head must separate the two logits or every loss is ln 2
        let y: Vec<f64> = (0..p.inner_dim(0)).map(|i| 0.07 * i as f64 - 0.2).collect();
        let h = BatchHandle {
            task: 0,
            seed: 4,
            size: BatchSize::Size(4),
        };
        assert_eq!(
            p.g_value(0, &x, &y, &h).unwrap(),
            p.g_value(0, &x, &y, &h).unwrap()
        );
        // same handle, but f reads validation data while g reads training
        // data, so the values must differ
        let f = p.f_value(0, &x, &y, &h).unwrap();
        let g = p.g_value(0, &x, &y, &h).unwrap();
        assert_ne!(f, g);
        let t = p.true_loss(0, &x, &y).unwrap();
        assert_ne!(f, t);
    }

    #[test]
    fn harder_separation_means_higher_optimal_test_loss() {
        let spec = LinRepSpec {
            input_dim: 24,
            rep_dim: 8,
            l2_coeff: 0.0005,
            g_batch: 8,
            f_batch: 32,
            train_per_task: 240,
            val_per_task: 120,
            test_per_task: 240,
        };
        let p = synthetic(&spec, 1, 1, 13);
        let x = p.default_x0();
        let mut losses = Vec::new();
        for task in 0..2 {
            let y = newton_fit(&p, task, &x);
            losses.push(p.true_loss(task, &x, &y).unwrap());
        }
        assert!(
            losses[0] + 0.05 < losses[1],
            "easy {:.3} must beat hard {:.3} clearly",
            losses[0],
            losses[1]
        );
    }

    fn newton_fit(p: &LinRepProblem, task: usize, x: &[f64]) -> Vec<f64> {
        let full = BatchHandle::full(task);
        let mut y = vec![0.0; p.inner_dim(task)];
        for _ in 0..60 {
            let g = p.grad_y_g(task, x, &y, &full).unwrap();
            if norm2(&g) < 1e-11 {
                break;
            }
            let h = p.dense_hess_yy_g(task, x, &y, &full).unwrap();
            let step = h.cholesky().unwrap().solve(&g);
            for (yv, sv) in y.iter_mut().zip(&step) {
                *yv -= sv;
            }
        }
        assert!(
            norm2(&p.grad_y_g(task, x, &y, &full).unwrap()) < 1e-8,
            "head fit did not converge"
        );
        y
    }

    #[test]
    fn idx_source_builds_tasks_with_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let d = 4usize;
        let n = 40usize;
        // two classes, 2×2 images whose pixel pattern encodes the class
        let mut img = IMAGES_MAGIC_BYTES(n as u32, 2, 2);
        let mut lab = LABELS_MAGIC_BYTES(n as u32);
        for i in 0..n {
            let class = (i % 2) as u8;
            lab.push(class);
            for px in 0..d {
                img.push(if (px % 2) as u8 == class { 200 } else { 20 });
            }
        }
        let images = dir.path().join("imgs.idx");
        let labels = dir.path().join("labs.idx");
        std::fs::write(&images, &img).unwrap();
        std::fs::write(&labels, &lab).unwrap();

        let spec = LinRepSpec {
            input_dim: d,
            rep_dim: 2,
            ..small_spec()
        };
        let source = LinRepSource::IdxDataset {
            images: images.clone(),
            labels: labels.clone(),
            pairs: vec![(0, 1)],
            seed: 8,
        };
        let p = linrep_suite(&spec, &source).unwrap();
        assert_eq!(p.n_tasks(), 1);
        let t = p.task_data(0);
        assert_eq!(t.train.count(), 24);
        assert_eq!(t.val.count(), 8);
        assert_eq!(t.test.count(), 8);
        // deterministic rebuild
        let q = linrep_suite(&spec, &source).unwrap();
        assert_eq!(p.task_data(0), q.task_data(0));
        // a pair naming an absent class has too few samples to split
        let bad = LinRepSource::IdxDataset {
            images,
            labels,
            pairs: vec![(0, 7)],
            seed: 8,
        };
        assert!(linrep_suite(&spec, &bad).is_err());
    }

    #[allow(non_snake_case)]
    fn IMAGES_MAGIC_BYTES(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = crate::problems::idx::IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b
    }

    #[allow(non_snake_case)]
    fn LABELS_MAGIC_BYTES(count: u32) -> Vec<u8> {
        let mut b = crate::problems::idx::LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend(count.to_be_bytes());
        b
    }

    #[test]
    fn construction_validation_rejects_degenerate_specs() {
        let mut spec = small_spec();
        spec.l2_coeff = 0.0;
        assert!(matches!(
            linrep_suite(
                &spec,
                &LinRepSource::SyntheticGaussian {
                    n_easy: 1,
                    n_hard: 0,
                    seed: 1
                }
            ),
            Err(MorbitError::NotStronglyConvex(_))
        ));
        assert!(Split::new(vec![0.0; 5], vec![0, 1], 3).is_err());
        assert!(Split::new(vec![0.0; 6], vec![0, 2], 3).is_err());
    }
}
