//! Norm-constrained cross-entropy minimization over last-layer classifiers
//! W and features H, solved by projected gradient descent with backtracking.
//!
//! The program: minimize the sample-averaged cross-entropy of `W h_{k,i}`
//! against class k, subject to
//!
//! ```text
//! (1/K) Σ_k ‖w_k‖²            <= E_W
//! (1/K) Σ_k (1/n_k) Σ_i ‖h_{k,i}‖² <= E_H
//! ```
//!
//! The default state is class-reduced: one feature column per class with
//! multiplicity weight n_k, since within-class features coincide at any
//! minimizer. The full per-sample form is kept for the form-equivalence
//! oracle and the within-class variability metric.

use super::CollapseError;
use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Relative slack accepted when checking the norm constraints. Projection
/// only rescales beyond this slack, which keeps it bit-wise idempotent.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Problem instance: K classes in dimension p, the first `k_a` classes
/// majority with `n_a` samples each, the rest minority with `n_b` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPeeledProblem {
    pub k: usize,
    pub p: usize,
    #[serde(default)]
    pub k_a: usize,
    pub n_a: u64,
    pub n_b: u64,
    pub e_w: f64,
    pub e_h: f64,
}

impl LayerPeeledProblem {
    /// Balanced instance (no majority/minority distinction).
    pub fn balanced(k: usize, p: usize, e_w: f64, e_h: f64) -> Result<Self, CollapseError> {
        let problem = Self {
            k,
            p,
            k_a: 0,
            n_a: 1,
            n_b: 1,
            e_w,
            e_h,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), CollapseError> {
        if self.k < 2 {
            return Err(CollapseError::InvalidProblem("k must be at least 2".into()));
        }
        if self.p < self.k {
            return Err(CollapseError::InvalidProblem(format!(
                "p = {} must be at least k = {} (the equiangular geometry needs that many dimensions)",
                self.p, self.k
            )));
        }
        if self.k_a > self.k {
            return Err(CollapseError::InvalidProblem(format!(
                "k_a = {} exceeds k = {}",
                self.k_a, self.k
            )));
        }
        if self.n_b < 1 || self.n_a < self.n_b {
            return Err(CollapseError::InvalidProblem("need n_a >= n_b >= 1".into()));
        }
        if self.e_w.is_nan() || self.e_w <= 0.0 || self.e_h.is_nan() || self.e_h <= 0.0 {
            return Err(CollapseError::InvalidProblem(
                "norm budgets must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-class sample count.
    pub fn class_count(&self, class: usize) -> u64 {
        if class < self.k_a {
            self.n_a
        } else {
            self.n_b
        }
    }

    /// Total sample count N.
    pub fn total_samples(&self) -> u64 {
        self.k_a as u64 * self.n_a + (self.k - self.k_a) as u64 * self.n_b
    }

    pub fn minority_count(&self) -> usize {
        self.k - self.k_a
    }
}

/// Feature variable, either one column per class (weighted by n_k) or one
/// column per sample laid out class-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// p x K.
    ClassReduced(Array2<f64>),
    /// p x N, columns ordered class 0's samples, then class 1's, ...
    Full(Array2<f64>),
}

impl Features {
    fn matrix(&self) -> &Array2<f64> {
        match self {
            Features::ClassReduced(h) | Features::Full(h) => h,
        }
    }

    fn matrix_mut(&mut self) -> &mut Array2<f64> {
        match self {
            Features::ClassReduced(h) | Features::Full(h) => h,
        }
    }
}

/// A (W, H) iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPeeledState {
    /// K x p classifier matrix; row k is w_k.
    pub w: Array2<f64>,
    pub features: Features,
}

impl LayerPeeledState {
    /// Expand a class-reduced state to the full form by duplicating each
    /// class column n_k times.
    pub fn to_full(&self, problem: &LayerPeeledProblem) -> Result<Self, CollapseError> {
        let h = match &self.features {
            Features::Full(_) => return Ok(self.clone()),
            Features::ClassReduced(h) => h,
        };
        let n = problem.total_samples() as usize;
        let mut full = Array2::<f64>::zeros((problem.p, n));
        let mut col = 0;
        for class in 0..problem.k {
            for _ in 0..problem.class_count(class) {
                full.column_mut(col).assign(&h.column(class));
                col += 1;
            }
        }
        Ok(Self {
            w: self.w.clone(),
            features: Features::Full(full),
        })
    }
}

/// Cross-entropy of logits `z` against class `k`, computed through a
/// max-shifted log-sum-exp so large logits cannot overflow.
pub fn ce_loss(z: &[f64], k: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - z[k]
}

fn softmax_into(z: ArrayView1<f64>, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_shapes(
    problem: &LayerPeeledProblem,
    state: &LayerPeeledState,
) -> Result<(), CollapseError> {
    if state.w.nrows() != problem.k || state.w.ncols() != problem.p {
        return Err(CollapseError::Shape(format!(
            "W is {}x{}, expected {}x{}",
            state.w.nrows(),
            state.w.ncols(),
            problem.k,
            problem.p
        )));
    }
    let h = state.features.matrix();
    let expected_cols = match state.features {
        Features::ClassReduced(_) => problem.k,
        Features::Full(_) => problem.total_samples() as usize,
    };
    if h.nrows() != problem.p || h.ncols() != expected_cols {
        return Err(CollapseError::Shape(format!(
            "H is {}x{}, expected {}x{expected_cols}",
            h.nrows(),
            h.ncols(),
            problem.p
        )));
    }
    Ok(())
}

/// Average squared row norm of W.
fn w_load(w: &Array2<f64>) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>() / w.nrows() as f64
}

/// The feature-side constraint value `(1/K) Σ_k (1/n_k) Σ_i ‖h_{k,i}‖²`.
fn h_load(problem: &LayerPeeledProblem, features: &Features) -> f64 {
    match features {
        Features::ClassReduced(h) => {
            h.columns()
                .into_iter()
                .map(|c| c.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / problem.k as f64
        }
        Features::Full(h) => {
            let mut total = 0.0;
            let mut col = 0;
            for class in 0..problem.k {
                let nk = problem.class_count(class) as f64;
                let mut class_sum = 0.0;
                for _ in 0..problem.class_count(class) {
                    class_sum += h.column(col).iter().map(|v| v * v).sum::<f64>();
                    col += 1;
                }
                total += class_sum / nk;
            }
            total / problem.k as f64
        }
    }
}

/// Check the two norm constraints up to [`FEASIBILITY_SLACK`].
pub fn is_feasible(problem: &LayerPeeledProblem, state: &LayerPeeledState) -> bool {
    w_load(&state.w) <= problem.e_w * (1.0 + FEASIBILITY_SLACK)
        && h_load(problem, &state.features) <= problem.e_h * (1.0 + FEASIBILITY_SLACK)
}

/// Sample-averaged cross-entropy of the state. Errors if the state violates
/// the norm constraints beyond tolerance.
pub fn objective(
    problem: &LayerPeeledProblem,
    state: &LayerPeeledState,
) -> Result<f64, CollapseError> {
    check_shapes(problem, state)?;
    if !is_feasible(problem, state) {
        return Err(CollapseError::Infeasible(format!(
            "w load {:.6} (budget {}), h load {:.6} (budget {})",
            w_load(&state.w),
            problem.e_w,
            h_load(problem, &state.features),
            problem.e_h
        )));
    }
    Ok(objective_unchecked(problem, state))
}

fn objective_unchecked(problem: &LayerPeeledProblem, state: &LayerPeeledState) -> f64 {
    let n = problem.total_samples() as f64;
    let logits = state.w.dot(state.features.matrix());
    let mut total = 0.0;
    match state.features {
        Features::ClassReduced(_) => {
            for class in 0..problem.k {
                let z: Vec<f64> = logits.column(class).to_vec();
                total += problem.class_count(class) as f64 * ce_loss(&z, class);
            }
        }
        Features::Full(_) => {
            let mut col = 0;
            for class in 0..problem.k {
                for _ in 0..problem.class_count(class) {
                    let z: Vec<f64> = logits.column(col).to_vec();
                    total += ce_loss(&z, class);
                    col += 1;
                }
            }
        }
    }
    total / n
}

/// Analytic gradients of [`objective`] with respect to W and H, in the same
/// layout as the state.
pub fn gradients(
    problem: &LayerPeeledProblem,
    state: &LayerPeeledState,
) -> Result<(Array2<f64>, Array2<f64>), CollapseError> {
    check_shapes(problem, state)?;
    let n = problem.total_samples() as f64;
    let h = state.features.matrix();
    let logits = state.w.dot(h);
    let mut grad_w = Array2::<f64>::zeros(state.w.dim());
    let mut grad_h = Array2::<f64>::zeros(h.dim());
    let k = problem.k;
    let mut residual = vec![0.0; k];

    let mut accumulate = |col: usize,
                          class: usize,
                          weight: f64,
                          grad_w: &mut Array2<f64>,
                          grad_h: &mut Array2<f64>| {
        softmax_into(logits.column(col), &mut residual);
        residual[class] -= 1.0;
        // dL/dW += weight * residual ⊗ h_col ; dL/dh_col = weight * Wᵀ residual
        for row in 0..k {
            let r = weight * residual[row];
            if r == 0.0 {
                continue;
            }
            for dim in 0..problem.p {
                grad_w[[row, dim]] += r * h[[dim, col]];
                grad_h[[dim, col]] += r * state.w[[row, dim]];
            }
        }
    };

    match state.features {
        Features::ClassReduced(_) => {
            for class in 0..k {
                let weight = problem.class_count(class) as f64 / n;
                accumulate(class, class, weight, &mut grad_w, &mut grad_h);
            }
        }
        Features::Full(_) => {
            let mut col = 0;
            for class in 0..k {
                for _ in 0..problem.class_count(class) {
                    accumulate(col, class, 1.0 / n, &mut grad_w, &mut grad_h);
                    col += 1;
                }
            }
        }
    }
    Ok((grad_w, grad_h))
}

/// Metric projection onto the feasible set: uniform rescaling of W (and of
/// H) whenever its average-norm load exceeds the budget. Feasible states
/// are returned unchanged, so the projection is idempotent bit-wise.
pub fn project(
    problem: &LayerPeeledProblem,
    mut state: LayerPeeledState,
    e_w: f64,
    e_h: f64,
) -> LayerPeeledState {
    let wl = w_load(&state.w);
    if wl > e_w * (1.0 + FEASIBILITY_SLACK) {
        let scale = (e_w / wl).sqrt();
        state.w.mapv_inplace(|v| v * scale);
    }
    let hl = h_load(problem, &state.features);
    if hl > e_h * (1.0 + FEASIBILITY_SLACK) {
        let scale = (e_h / hl).sqrt();
        state.features.matrix_mut().mapv_inplace(|v| v * scale);
    }
    state
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOpts {
    /// Initial trial step; backtracking halves it until the objective does
    /// not increase.
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Converged when the objective decreased by less than this over
    /// `window` iterations.
    pub tol: f64,
    pub window: usize,
    pub restarts: usize,
}

impl Default for SolveOpts {
    fn default() -> Self {
        Self {
            lr: 2.0,
            iters: 20_000,
            seed: 0,
            tol: 1e-12,
            window: 50,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub state: LayerPeeledState,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Euclidean norm of the last gradient, reported when not converged.
    pub final_grad_norm: f64,
    /// Objective value after each accepted step (index 0 is the initial
    /// point). Non-increasing by construction of the backtracking accept.
    pub objective_trace: Vec<f64>,
}

/// Projected gradient descent from seeded Gaussian inits, best of
/// `restarts` runs. Deterministic given (problem, opts). A run that stalls
/// without meeting the tolerance is still returned, flagged via
/// `converged = false`.
pub fn solve_layer_peeled(
    problem: &LayerPeeledProblem,
    opts: &SolveOpts,
) -> Result<SolveOutcome, CollapseError> {
    problem.validate()?;
    let mut best: Option<SolveOutcome> = None;
    for restart in 0..opts.restarts.max(1) {
        let outcome = solve_once(problem, opts, opts.seed.wrapping_add(restart as u64))?;
        if best
            .as_ref()
            .is_none_or(|b| outcome.objective < b.objective)
        {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn solve_once(
    problem: &LayerPeeledProblem,
    opts: &SolveOpts,
    seed: u64,
) -> Result<SolveOutcome, CollapseError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Gaussian init scaled to half of each norm budget.
    let mut w = Array2::<f64>::zeros((problem.k, problem.p));
    w.mapv_inplace(|_| standard_normal(&mut rng));
    let scale_w = (0.5 * problem.e_w / w_load(&w)).sqrt();
    w.mapv_inplace(|v| v * scale_w);
    let mut h = Array2::<f64>::zeros((problem.p, problem.k));
    h.mapv_inplace(|_| standard_normal(&mut rng));
    let features = Features::ClassReduced(h);
    let hl = h_load(problem, &features);
    let mut state = LayerPeeledState { w, features };
    let scale_h = (0.5 * problem.e_h / hl).sqrt();
    state.features.matrix_mut().mapv_inplace(|v| v * scale_h);

    let mut value = objective_unchecked(problem, &state);
    let mut history = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::NAN;
    for iter in 0..opts.iters {
        iterations = iter + 1;
        let (gw, gh) = gradients(problem, &state)?;
        grad_norm =
            (gw.iter().map(|v| v * v).sum::<f64>() + gh.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let mut step = opts.lr;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate_w = &state.w - &(step * &gw);
            let candidate_h = state.features.matrix() - &(step * &gh);
            let candidate = project(
                problem,
                LayerPeeledState {
                    w: candidate_w,
                    features: Features::ClassReduced(candidate_h),
                },
                problem.e_w,
                problem.e_h,
            );
            let candidate_value = objective_unchecked(problem, &candidate);
            if candidate_value <= value {
                state = candidate;
                value = candidate_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction at any step size: stationary under
            // projection.
            converged = true;
            break;
        }
        history.push(value);
        if history.len() > opts.window {
            let past = history[history.len() - 1 - opts.window];
            if past - value < opts.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(SolveOutcome {
        state,
        objective: value,
        converged,
        iterations,
        final_grad_norm: grad_norm,
        objective_trace: history,
    })
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Geometry of a classifier matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// K x K cosine matrix of W's rows (unit diagonal).
    pub pairwise_cosines: Vec<Vec<f64>>,
    /// max over k != k' of |cos(w_k, w_k') + 1/(K-1)|.
    pub etf_deviation: f64,
    /// Mean cosine over minority-class pairs; present when at least two
    /// minority classes exist.
    pub minority_mean_cosine: Option<f64>,
    /// Largest ‖w_k - w_k'‖ over minority pairs.
    pub minority_max_pair_distance: Option<f64>,
    /// Average squared distance of features from their class mean
    /// (full-form states only).
    pub within_class_variability: Option<f64>,
}

/// Compute pairwise classifier cosines, the equiangular-frame deviation,
/// and minority-pair statistics for classes `k_a..`.
#[allow(clippy::needless_range_loop)]
pub fn collapse_metrics(
    state: &LayerPeeledState,
    k_a: usize,
) -> Result<CollapseMetrics, CollapseError> {
    let w = &state.w;
    let k = w.nrows();
    let norms: Vec<f64> = (0..k)
        .map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(CollapseError::ZeroNormRow { row });
    }
    let mut cosines = vec![vec![0.0; k]; k];
    for a in 0..k {
        cosines[a][a] = 1.0;
        for b in (a + 1)..k {
            let dot: f64 = w.row(a).iter().zip(w.row(b)).map(|(x, y)| x * y).sum();
            let c = dot / (norms[a] * norms[b]);
            cosines[a][b] = c;
            cosines[b][a] = c;
        }
    }
    let target = -1.0 / (k as f64 - 1.0);
    let mut etf_deviation = 0.0f64;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                etf_deviation = etf_deviation.max((cosines[a][b] - target).abs());
            }
        }
    }
    let minority = k.saturating_sub(k_a);
    let (minority_mean_cosine, minority_max_pair_distance) = if minority >= 2 {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut max_dist = 0.0f64;
        for a in k_a..k {
            for b in (a + 1)..k {
                sum += cosines[a][b];
                count += 1;
                let dist: f64 = w
                    .row(a)
                    .iter()
                    .zip(w.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                max_dist = max_dist.max(dist);
            }
        }
        (Some(sum / count as f64), Some(max_dist))
    } else {
        (None, None)
    };
    Ok(CollapseMetrics {
        pairwise_cosines: cosines,
        etf_deviation,
        minority_mean_cosine,
        minority_max_pair_distance,
        // Needs class boundaries; filled in by collapse_metrics_full.
        within_class_variability: None,
    })
}

/// [`collapse_metrics`] plus the within-class variability of a full-form
/// state: the average squared distance of each feature column from its
/// class mean.
pub fn collapse_metrics_full(
    problem: &LayerPeeledProblem,
    state: &LayerPeeledState,
) -> Result<CollapseMetrics, CollapseError> {
    let mut metrics = collapse_metrics(state, problem.k_a)?;
    if let Features::Full(h) = &state.features {
        let mut total = 0.0;
        let mut col = 0;
        for class in 0..problem.k {
            let nk = problem.class_count(class) as usize;
            let cols: Vec<usize> = (col..col + nk).collect();
            let mut mean = vec![0.0; problem.p];
            for &c in &cols {
                for (m, v) in mean.iter_mut().zip(h.column(c)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= nk as f64;
            }
            for &c in &cols {
                total += h
                    .column(c)
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>();
            }
            col += nk;
        }
        metrics.within_class_variability = Some(total / problem.total_samples() as f64);
    }
    Ok(metrics)
}

/// One row of an imbalance sweep.
#[derive(Debug)]
pub struct SweepRow {
    pub ratio: f64,
    pub n_a: u64,
    pub result: Result<(SolveOutcome, CollapseMetrics), CollapseError>,
}

/// Solve the problem at each majority/minority ratio, keeping `n_b` fixed
/// and setting `n_a = round(ratio * n_b)`. Per-ratio failures are recorded
/// and the sweep continues.
pub fn imbalance_sweep(
    base: &LayerPeeledProblem,
    ratios: &[f64],
    opts: &SolveOpts,
) -> Vec<SweepRow> {
    ratios
        .iter()
        .map(|&ratio| {
            let n_a = (ratio * base.n_b as f64).round().max(1.0) as u64;
            let problem = LayerPeeledProblem {
                n_a,
                ..base.clone()
            };
            let result = solve_layer_peeled(&problem, opts).and_then(|outcome| {
                let metrics = collapse_metrics(&outcome.state, problem.k_a)?;
                Ok((outcome, metrics))
            });
            SweepRow { ratio, n_a, result }
        })
        .collect()
}
