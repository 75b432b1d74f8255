//! Few-shot sinusoid regression with a shared rectifier-network embedding.
//!
//! Each task is a target curve `y = a·sin(freq·x − φ)` observed on
//! `x ∈ [−5, 5]`. All tasks share an embedding network (the solver's outer
//! variable, as one flat parameter vector); every task owns a linear head
//! over the embedding plus a bias (its inner variable). The inner objective
//! is the batch mean squared error plus a norm penalty on the head blocks,
//! which keeps the head subproblem strongly convex even when a batch has
//! fewer points than the head has parameters. The outer objective is the
//! plain mean squared error on its own batch.
//!
//! Minibatches draw fresh inputs uniformly from `[−5, 5]`; the full-batch
//! handle means the fixed equally spaced evaluation grid, so full-batch
//! values are deterministic and serve as the reporting loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, check_task, MorbitError, Result};
use crate::linalg::{dot, norm2, DenseMatrix};
use crate::oracles::{BatchHandle, BatchSize, ProblemOracles};

/// Amplitude range of an easy task.
pub const EASY_AMPLITUDE: (f64, f64) = (0.1, 1.05);
/// Amplitude range of a hard task.
pub const HARD_AMPLITUDE: (f64, f64) = (4.95, 5.0);
/// Admissible amplitude envelope for any task.
pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
/// Phase range.
pub const PHASE_RANGE: (f64, f64) = (0.0, std::f64::consts::PI);
/// Input interval tasks are sampled on.
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);

/// One regression task `y = a·sin(freq·x − φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
    pub frequency: f64,
}

impl SinusoidTask {
    pub fn target(&self, input: f64) -> f64 {
        self.amplitude * (self.frequency * input - self.phase).sin()
    }
}

/// Fully connected rectifier network mapping a scalar input to an embedding.
///
/// The flat parameter layout is, per layer, the weight matrix in row-major
/// order (rows = output units) followed by the bias vector. Hidden layers
/// apply the rectifier; the final layer is linear. With all-zero parameters
/// the output is identically zero for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    widths: Vec<usize>,
}

/// Per-sample activations kept for the backward pass.
///
/// `acts[0]` is the one-element input, `acts[L]` the embedding. Hidden
/// activations are post-rectifier, so `act > 0` recovers the rectifier mask.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn embedding(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input layer")
    }
}

impl MlpShape {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(MorbitError::domain(
                "embedding network needs at least an input and an output layer",
            ));
        }
        if widths[0] != 1 {
            return Err(MorbitError::domain("embedding network input must be scalar"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(MorbitError::domain("layer widths must be positive"));
        }
        Ok(MlpShape { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn embed_dim(&self) -> usize {
        *self.widths.last().expect("validated nonempty")
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// (weight offset, bias offset, fan-in, fan-out) for layer `l`.
    fn layer_span(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        let fan_in = self.widths[l];
        let fan_out = self.widths[l + 1];
        (off, off + fan_in * fan_out, fan_in, fan_out)
    }

    pub fn forward(&self, params: &[f64], input: f64) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, input)?.acts.pop().expect("nonempty"))
    }

    pub fn forward_cached(&self, params: &[f64], input: f64) -> Result<MlpCache> {
        check_len("embedding parameters", params, self.param_count())?;
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(vec![input]);
        for l in 0..layers {
            let (w_off, b_off, fan_in, fan_out) = self.layer_span(l);
            let z = {
                let prev = &acts[l];
                let mut z = Vec::with_capacity(fan_out);
                for o in 0..fan_out {
                    let row = &params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    z.push(dot(row, prev) + params[b_off + o]);
                }
                z
            };
            let mut z = z;
            if l + 1 < layers {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        Ok(MlpCache { acts })
    }

    /// Accumulates `scale · Jᵀ·cotangent` into `grad`, where `J` is the
    /// Jacobian of the embedding with respect to the parameters at the
    /// forward pass recorded in `cache`. The rectifier subgradient at zero
    /// is taken as zero.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        cotangent: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        check_len("embedding parameters", params, self.param_count())?;
        check_len("embedding gradient", grad, self.param_count())?;
        check_len("embedding cotangent", cotangent, self.embed_dim())?;
        let layers = self.layers();
        let mut delta: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        for l in (0..layers).rev() {
            let (w_off, b_off, fan_in, fan_out) = self.layer_span(l);
            let prev = &cache.acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(prev.iter()) {
                        *g += d * a;
                    }
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let mut next = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                        for (n, w) in next.iter_mut().zip(row.iter()) {
                            *n += w * d;
                        }
                    }
                }
                // rectifier mask: hidden activations are post-rectifier
                for (n, a) in next.iter_mut().zip(cache.acts[l].iter()) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// Seeded uniform Glorot initialization; biases start at zero.
    ///
    /// An all-zero start is degenerate for rectifier networks (no gradient
    /// reaches the hidden layers), so problem families use this as their
    /// default outer iterate.
    pub fn glorot_init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.param_count()];
        for l in 0..self.layers() {
            let (w_off, _, fan_in, fan_out) = self.layer_span(l);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params[w_off..w_off + fan_in * fan_out].iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        params
    }
}

/// Suite parameters; `new` fills the standard architecture and penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidConfig {
    pub n_easy: usize,
    pub n_hard: usize,
    /// Points per sampled minibatch (the "shots").
    pub shots: usize,
    /// Construction seed: drives task draws and the default outer init.
    pub seed: u64,
    /// Layer widths of the embedding network, input first.
    pub widths: Vec<usize>,
    /// Coefficient of the per-block head norm penalty inside the inner
    /// objective.
    pub weight_penalty: f64,
    /// Angular frequency shared by all drawn tasks. The task family is
    /// stated without a frequency range, so it defaults to 1.
    pub frequency: f64,
    /// Size of the equally spaced evaluation grid on the input interval.
    pub grid_points: usize,
}

impl SinusoidConfig {
    pub fn new(n_easy: usize, n_hard: usize, shots: usize, seed: u64) -> Self {
        SinusoidConfig {
            n_easy,
            n_hard,
            shots,
            seed,
            widths: vec![1, 80, 80, 10],
            weight_penalty: 0.01,
            frequency: 1.0,
            grid_points: 100,
        }
    }

    /// Draws the configured easy and hard tasks (easy first) and builds the
    /// problem. Task draws and the default init come from disjoint streams
    /// derived from the construction seed.
    pub fn build(&self) -> Result<SinusoidProblem> {
        if self.n_easy + self.n_hard == 0 {
            return Err(MorbitError::domain("suite needs at least one task"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 1));
        let mut tasks = Vec::with_capacity(self.n_easy + self.n_hard);
        for i in 0..self.n_easy + self.n_hard {
            let (lo, hi) = if i < self.n_easy {
                EASY_AMPLITUDE
            } else {
                HARD_AMPLITUDE
            };
            tasks.push(SinusoidTask {
                amplitude: rng.gen_range(lo..=hi),
                phase: rng.gen_range(PHASE_RANGE.0..=PHASE_RANGE.1),
                frequency: self.frequency,
            });
        }
        SinusoidProblem::from_tasks(tasks, self)
    }
}

/// Convenience builder with the standard architecture, penalty 0.01,
/// frequency 1, and a 100-point evaluation grid.
pub fn sinusoid_suite(
    n_easy: usize,
    n_hard: usize,
    shots: usize,
    seed: u64,
) -> Result<SinusoidProblem> {
    SinusoidConfig::new(n_easy, n_hard, shots, seed).build()
}

/// Multi-task sinusoid regression problem over a shared embedding network.
#[derive(Debug, Clone)]
pub struct SinusoidProblem {
    tasks: Vec<SinusoidTask>,
    mlp: MlpShape,
    weight_penalty: f64,
    grid: Vec<f64>,
    init_seed: u64,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

impl SinusoidProblem {
    /// Builds the problem from explicit tasks; architecture, penalty,
    /// frequency of drawn tasks, and grid come from `cfg` (its `n_easy`,
    /// `n_hard`, and `shots` counts are not consulted here).
    pub fn from_tasks(tasks: Vec<SinusoidTask>, cfg: &SinusoidConfig) -> Result<Self> {
        if tasks.is_empty() {
            return Err(MorbitError::domain("suite needs at least one task"));
        }
        for t in &tasks {
            if !(t.amplitude.is_finite() && t.phase.is_finite() && t.frequency.is_finite()) {
                return Err(MorbitError::domain("task parameters must be finite"));
            }
            if t.amplitude < AMPLITUDE_RANGE.0 || t.amplitude > AMPLITUDE_RANGE.1 {
                return Err(MorbitError::domain(format!(
                    "amplitude {} outside [{}, {}]",
                    t.amplitude, AMPLITUDE_RANGE.0, AMPLITUDE_RANGE.1
                )));
            }
            if t.phase < PHASE_RANGE.0 || t.phase > PHASE_RANGE.1 {
                return Err(MorbitError::domain(format!(
                    "phase {} outside [0, pi]",
                    t.phase
                )));
            }
            if t.frequency <= 0.0 {
                return Err(MorbitError::domain("frequency must be positive"));
            }
        }
        if !(cfg.weight_penalty.is_finite() && cfg.weight_penalty >= 0.0) {
            return Err(MorbitError::domain(
                "weight penalty must be finite and nonnegative",
            ));
        }
        if cfg.grid_points < 2 {
            return Err(MorbitError::domain("evaluation grid needs at least 2 points"));
        }
        if cfg.shots == 0 {
            return Err(MorbitError::domain("shots must be at least 1"));
        }
        let mlp = MlpShape::new(cfg.widths.clone())?;
        let (lo, hi) = INPUT_RANGE;
        let step = (hi - lo) / (cfg.grid_points - 1) as f64;
        let grid = (0..cfg.grid_points).map(|k| lo + step * k as f64).collect();
        Ok(SinusoidProblem {
            tasks,
            mlp,
            weight_penalty: cfg.weight_penalty,
            grid,
            init_seed: stream_seed(cfg.seed, 2),
        })
    }

    pub fn tasks(&self) -> &[SinusoidTask] {
        &self.tasks
    }

    pub fn mlp(&self) -> &MlpShape {
        &self.mlp
    }

    pub fn weight_penalty(&self) -> f64 {
        self.weight_penalty
    }

    /// The fixed evaluation grid backing full-batch oracles.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn head_dim(&self) -> usize {
        self.mlp.embed_dim() + 1
    }

    fn batch_inputs(&self, task: usize, batch: &BatchHandle) -> Vec<f64> {
        match batch.size {
            BatchSize::Full => self.grid.clone(),
            BatchSize::Size(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    batch.seed ^ (task as u64).wrapping_mul(0x9e37_79b9),
                );
                (0..m)
                    .map(|_| rng.gen_range(INPUT_RANGE.0..INPUT_RANGE.1))
                    .collect()
            }
        }
    }

    /// Forward passes and residuals `w·e_j + b − target_j` for one batch.
    fn eval_batch(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<BatchEval> {
        check_task(task, self.tasks.len())?;
        check_len("outer variable", x, self.mlp.param_count())?;
        check_len("inner variable", y, self.head_dim())?;
        let inputs = self.batch_inputs(task, batch);
        let t = &self.tasks[task];
        let ed = self.mlp.embed_dim();
        let (w, b) = (&y[..ed], y[ed]);
        let mut caches = Vec::with_capacity(inputs.len());
        let mut residuals = Vec::with_capacity(inputs.len());
        for &p in &inputs {
            let cache = self.mlp.forward_cached(x, p)?;
            residuals.push(dot(w, cache.embedding()) + b - t.target(p));
            caches.push(cache);
        }
        Ok(BatchEval { caches, residuals })
    }

    fn penalty_value(&self, y: &[f64]) -> f64 {
        let ed = self.mlp.embed_dim();
        self.weight_penalty * (norm2(&y[..ed]) + y[ed].abs())
    }

    /// Adds the penalty subgradient scaled by `eps` into `grad`.
    fn add_penalty_subgrad(&self, y: &[f64], eps: f64, grad: &mut [f64]) {
        let ed = self.mlp.embed_dim();
        let wn = norm2(&y[..ed]);
        if wn > 0.0 {
            for (g, w) in grad[..ed].iter_mut().zip(&y[..ed]) {
                *g += eps * w / wn;
            }
        }
        let b = y[ed];
        if b > 0.0 {
            grad[ed] += eps;
        } else if b < 0.0 {
            grad[ed] -= eps;
        }
    }

    /// Curvature of the weight-block norm penalty applied to `v`:
    /// `(ε/‖w‖)(v_w − ŵ(ŵ·v_w))` on the weight block, zero on the bias and
    /// at `w = 0`.
    fn add_penalty_curvature(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        let ed = self.mlp.embed_dim();
        let wn = norm2(&y[..ed]);
        if self.weight_penalty == 0.0 || wn == 0.0 {
            return;
        }
        let unit: Vec<f64> = y[..ed].iter().map(|w| w / wn).collect();
        let along = dot(&unit, &v[..ed]);
        let scale = self.weight_penalty / wn;
        for i in 0..ed {
            out[i] += scale * (v[i] - unit[i] * along);
        }
    }
}

struct BatchEval {
    caches: Vec<MlpCache>,
    residuals: Vec<f64>,
}

impl BatchEval {
    fn mse(&self) -> f64 {
        let m = self.residuals.len() as f64;
        self.residuals.iter().map(|r| r * r).sum::<f64>() / m
    }
}

impl ProblemOracles for SinusoidProblem {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn outer_dim(&self) -> usize {
        self.mlp.param_count()
    }

    fn inner_dim(&self, _task: usize) -> usize {
        self.head_dim()
    }

    fn f_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        Ok(self.eval_batch(task, x, y, batch)?.mse())
    }

    fn grad_x_f(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let eval = self.eval_batch(task, x, y, batch)?;
        let ed = self.mlp.embed_dim();
        let w = &y[..ed];
        let m = eval.residuals.len() as f64;
        let mut grad = vec![0.0; self.mlp.param_count()];
        for (cache, r) in eval.caches.iter().zip(&eval.residuals) {
            self.mlp.backward(x, cache, w, 2.0 * r / m, &mut grad)?;
        }
        Ok(grad)
    }

    fn grad_y_f(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let eval = self.eval_batch(task, x, y, batch)?;
        let ed = self.mlp.embed_dim();
        let m = eval.residuals.len() as f64;
        let mut grad = vec![0.0; self.head_dim()];
        for (cache, r) in eval.caches.iter().zip(&eval.residuals) {
            let s = 2.0 * r / m;
            for (g, e) in grad[..ed].iter_mut().zip(cache.embedding()) {
                *g += s * e;
            }
            grad[ed] += s;
        }
        Ok(grad)
    }

    fn g_value(&self, task: usize, x: &[f64], y: &[f64], batch: &BatchHandle) -> Result<f64> {
        Ok(self.eval_batch(task, x, y, batch)?.mse() + self.penalty_value(y))
    }

    fn grad_y_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Result<Vec<f64>> {
        let mut grad = self.grad_y_f(task, x, y, batch)?;
        self.add_penalty_subgrad(y, self.weight_penalty, &mut grad);
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
        check_len("inner direction", v, self.head_dim())?;
        let eval = self.eval_batch(task, x, y, batch)?;
        let ed = self.mlp.embed_dim();
        let m = eval.residuals.len() as f64;
        let mut out = vec![0.0; self.head_dim()];
        for cache in &eval.caches {
            let e = cache.embedding();
            let s = 2.0 * (dot(&v[..ed], e) + v[ed]) / m;
            for (o, ei) in out[..ed].iter_mut().zip(e) {
                *o += s * ei;
            }
            out[ed] += s;
        }
        self.add_penalty_curvature(y, v, &mut out);
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
        check_len("inner direction", v, self.head_dim())?;
        let eval = self.eval_batch(task, x, y, batch)?;
        let ed = self.mlp.embed_dim();
        let (w, vw, vb) = (&y[..ed], &v[..ed], v[ed]);
        let m = eval.residuals.len() as f64;
        let mut grad = vec![0.0; self.mlp.param_count()];
        // d/dx [∇_y g · v]: the penalty does not depend on x, and each
        // sample contributes (v_w·e_j + v_b)·w + r_j·v_w through Jᵀ
        let mut cot = vec![0.0; ed];
        for (cache, r) in eval.caches.iter().zip(&eval.residuals) {
            let e = cache.embedding();
            let a = dot(vw, e) + vb;
            for i in 0..ed {
                cot[i] = a * w[i] + r * vw[i];
            }
            self.mlp.backward(x, cache, &cot, 2.0 / m, &mut grad)?;
        }
        Ok(grad)
    }

    fn dense_hess_yy_g(
        &self,
        task: usize,
        x: &[f64],
        y: &[f64],
        batch: &BatchHandle,
    ) -> Option<DenseMatrix> {
        let eval = self.eval_batch(task, x, y, batch).ok()?;
        let ed = self.mlp.embed_dim();
        let d = self.head_dim();
        let m = eval.residuals.len() as f64;
        let mut h = DenseMatrix::zeros(d, d);
        for cache in &eval.caches {
            let e = cache.embedding();
            for i in 0..d {
                let ei = if i < ed { e[i] } else { 1.0 };
                for j in 0..d {
                    let ej = if j < ed { e[j] } else { 1.0 };
                    h.set(i, j, h.get(i, j) + 2.0 * ei * ej / m);
                }
            }
        }
        let wn = norm2(&y[..ed]);
        if self.weight_penalty > 0.0 && wn > 0.0 {
            let scale = self.weight_penalty / wn;
            for i in 0..ed {
                for j in 0..ed {
                    let proj = if i == j { 1.0 } else { 0.0 } - y[i] * y[j] / (wn * wn);
                    h.set(i, j, h.get(i, j) + scale * proj);
                }
            }
        }
        Some(h)
    }

    fn default_x0(&self) -> Vec<f64> {
        self.mlp.glorot_init(self.init_seed)
    }

    fn weight_penalty_subgrad(&self, _task: usize, y: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; y.len()];
        self.add_penalty_subgrad(y, 1.0, &mut grad);
        grad
    }

    fn inner_penalty_coeff(&self, _task: usize) -> f64 {
        self.weight_penalty
    }

    /// Blockwise shrinkage matching the penalty ||w||₂ + |b|: the weight
    /// block shrinks toward the origin, the bias soft-thresholds. The bias
    /// kink is what pins b at 0 whenever the data pull is weaker than the
    /// penalty, so the exact map here is what lets inner fits terminate.
    fn inner_penalty_prox(&self, _task: usize, y: &mut [f64], scale: f64) {
        let ed = self.mlp.embed_dim();
        let wn = norm2(&y[..ed]);
        let shrink = if wn <= scale { 0.0 } else { (wn - scale) / wn };
        for v in y[..ed].iter_mut() {
            *v *= shrink;
        }
        let b = y[ed];
        y[ed] = if b.abs() <= scale { 0.0 } else { b - scale * b.signum() };
    }
}
