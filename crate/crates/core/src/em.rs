//! Mean-field EM for the undirected priors (PCA, LDA, LPP).
//!
//! The MRF prior over all latents is replaced by a product of per-sample
//! Gaussians `N(m_i, Sigma)` whose means aggregate the neighbours' expected
//! values. Each iteration recomputes the mean field from the previous
//! posterior means, runs an exact E-step for the resulting factorized model
//! and then the closed-form M-step for `W`, `sigma_x^2` (and optionally
//! `sigma_n^2`). Everything is O(TNF) per iteration.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CapaError, Result};
use crate::model::{DataMatrix, LatentMoments, ModelKind, ModelParams, SolverKind};
use crate::priors::{class_members, knn_graph, lambda_schedule, NeighbourhoodKind, NeighbourhoodSpec};
use crate::threads::e_step_threads;

/// Per-sample mean-field means and the shared diagonal variance.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    /// N×T; column i is m_i.
    pub m: DMatrix<f64>,
    /// Diagonal of Sigma.
    pub sigma: DVector<f64>,
    /// Diagonal of Sigma_hat = Sigma / sigma_x^2.
    pub sigma_hat: DVector<f64>,
}

impl MeanFieldState {
    pub fn new(m: DMatrix<f64>, sigma: DVector<f64>, sigma_x2: f64) -> Result<Self> {
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(CapaError::Parameter(
                "mean-field variance entries must be positive".into(),
            ));
        }
        if sigma_x2 <= 0.0 {
            return Err(CapaError::Parameter(format!(
                "sigma_x2 must be positive, got {sigma_x2}"
            )));
        }
        let sigma_hat = &sigma / sigma_x2;
        Ok(MeanFieldState { m, sigma, sigma_hat })
    }
}

/// Which side of the printed LDA mean-field formula gets the lambda-weighted
/// coefficient. `Printed` follows the paper's display (Lambda_alpha on the
/// global leave-one-out mean); `Swapped` attaches it to the class mean, which
/// matches how the prior couples within-class nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LdaMeanField {
    #[default]
    Printed,
    Swapped,
}

/// Resolved latent neighbourhood used by the mean-field updates.
#[derive(Debug, Clone)]
pub enum LatentNeighbourhood {
    /// Every other sample (PCA).
    Full,
    /// Same-class samples, excluding self (LDA).
    Classes {
        class_of: Vec<usize>,
        members: Vec<Vec<usize>>,
    },
    /// Graph neighbours (LPP).
    Neighbours(Vec<Vec<usize>>),
}

impl LatentNeighbourhood {
    /// Builds the neighbourhood the prior induces over the latents.
    pub fn resolve(data: &DataMatrix, spec: &NeighbourhoodSpec) -> Result<Self> {
        match &spec.kind {
            NeighbourhoodKind::Full => Ok(LatentNeighbourhood::Full),
            NeighbourhoodKind::WithinClass => {
                let labels = data.labels().ok_or_else(|| {
                    CapaError::Config("within-class neighbourhood requires labels".into())
                })?;
                Ok(LatentNeighbourhood::Classes {
                    class_of: labels.to_vec(),
                    members: class_members(labels),
                })
            }
            NeighbourhoodKind::Knn { k, weights } => {
                let graph = knn_graph(data, *k, *weights, spec.symmetrize)?;
                if let Some(i) = graph.neighbours.iter().position(|n| n.is_empty()) {
                    return Err(CapaError::Config(format!(
                        "sample {i} has no neighbours; the LPP mean field needs every \
                         neighbourhood nonempty"
                    )));
                }
                Ok(LatentNeighbourhood::Neighbours(graph.neighbours))
            }
            NeighbourhoodKind::TemporalChain => Err(CapaError::Config(
                "the chain prior is solved exactly; use the SFA EM".into(),
            )),
        }
    }
}

/// Mean-field means `m_i` from the previous posterior means.
///
/// * PCA: `m_i = Lambda mu_{-i}` with the leave-one-out mean `mu_{-i}`.
/// * LDA: `Lambda_alpha mu_{-i} + Lambda_beta mu_{C_i}` (see [`LdaMeanField`]).
/// * LPP: `Lambda_alpha mu_{N_i}` over the graph neighbourhood.
///
/// All leave-one-out means use the O(NT) identity
/// `mu_{-i} = (T mu - E[y_i]) / (T-1)`.
pub fn mean_field_means(
    kind: ModelKind,
    expected: &DMatrix<f64>,
    hood: &LatentNeighbourhood,
    lambda: &DVector<f64>,
    lda_form: LdaMeanField,
) -> DMatrix<f64> {
    let n = expected.nrows();
    let t = expected.ncols();
    let coeff_alpha = DVector::from_fn(n, |i, _| {
        let om = 1.0 - lambda[i];
        lambda[i] / (lambda[i] + om * om)
    });
    let coeff_beta = DVector::from_fn(n, |i, _| {
        let om = 1.0 - lambda[i];
        om * om / (lambda[i] + om * om)
    });

    let mut m = DMatrix::zeros(n, t);
    match (kind, hood) {
        (ModelKind::Pca, LatentNeighbourhood::Full) => {
            let total = row_totals(expected);
            for i in 0..t {
                for r in 0..n {
                    let loo = (total[r] - expected[(r, i)]) / (t - 1) as f64;
                    m[(r, i)] = lambda[r] * loo;
                }
            }
        }
        (ModelKind::Lda, LatentNeighbourhood::Classes { class_of, members }) => {
            let total = row_totals(expected);
            let mut class_totals = vec![DVector::zeros(n); members.len()];
            for (c, idx) in members.iter().enumerate() {
                for &i in idx {
                    class_totals[c] += expected.column(i);
                }
            }
            let (g_coeff, c_coeff) = match lda_form {
                LdaMeanField::Printed => (&coeff_alpha, &coeff_beta),
                LdaMeanField::Swapped => (&coeff_beta, &coeff_alpha),
            };
            for i in 0..t {
                let c = class_of[i];
                let size = members[c].len();
                for r in 0..n {
                    let loo = (total[r] - expected[(r, i)]) / (t - 1) as f64;
                    // singleton classes have an empty within-class term
                    let class_mean = if size > 1 {
                        (class_totals[c][r] - expected[(r, i)]) / (size - 1) as f64
                    } else {
                        0.0
                    };
                    m[(r, i)] = g_coeff[r] * loo + c_coeff[r] * class_mean;
                }
            }
        }
        (ModelKind::Lpp, LatentNeighbourhood::Neighbours(lists)) => {
            for i in 0..t {
                let list = &lists[i];
                let inv = 1.0 / list.len() as f64;
                for r in 0..n {
                    let mut s = 0.0;
                    for &j in list {
                        s += expected[(r, j)];
                    }
                    m[(r, i)] = coeff_alpha[r] * s * inv;
                }
            }
        }
        _ => unreachable!("neighbourhood resolved for a different model kind"),
    }
    m
}

fn row_totals(expected: &DMatrix<f64>) -> DVector<f64> {
    let n = expected.nrows();
    let mut total = DVector::zeros(n);
    for j in 0..expected.ncols() {
        total += expected.column(j);
    }
    total
}

/// Diagonal of the mean-field variance Sigma.
///
/// PCA keeps the raw prior variances; LDA and LPP share the rescaled form
/// `sigma_n^2 / (lambda_n + (1 - lambda_n)^2)`. (SFA never goes through the
/// mean field; its EM is exact.)
pub fn mean_field_variance(
    kind: ModelKind,
    lambda: &DVector<f64>,
    sigma2: &DVector<f64>,
) -> DVector<f64> {
    match kind {
        ModelKind::Pca | ModelKind::Sfa => sigma2.clone(),
        ModelKind::Lda | ModelKind::Lpp => DVector::from_fn(sigma2.len(), |i, _| {
            let om = 1.0 - lambda[i];
            sigma2[i] / (lambda[i] + om * om)
        }),
    }
}

/// Exact E-step of the factorized model: posterior moments of each latent.
///
/// `E[y_i] = (W^T W + Sigma_hat^{-1})^{-1} (W^T x_i + Sigma_hat^{-1} m_i)` and
/// `E[y_i y_i^T] = sigma_x^2 (W^T W + Sigma_hat^{-1})^{-1} + E[y_i] E[y_i]^T`.
/// The posterior covariance is sample-independent and computed once.
pub fn e_step(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    mf: &MeanFieldState,
) -> Result<LatentMoments> {
    let n = w.ncols();
    let t = x.ncols();
    if w.nrows() != x.nrows() {
        return Err(CapaError::Dimension(format!(
            "W is {}x{} but data is {}x{}",
            w.nrows(),
            n,
            x.nrows(),
            t
        )));
    }
    if sigma_x2 <= 0.0 || !sigma_x2.is_finite() {
        return Err(CapaError::Parameter(format!(
            "sigma_x2 must be positive and finite, got {sigma_x2}"
        )));
    }
    if w.iter().any(|v| !v.is_finite()) || mf.m.iter().any(|v| !v.is_finite()) {
        return Err(CapaError::Numeric("non-finite W or mean field".into()));
    }

    let inv_sigma_hat = DVector::from_fn(n, |i, _| 1.0 / mf.sigma_hat[i]);
    let mut a = w.transpose() * w;
    for i in 0..n {
        a[(i, i)] += inv_sigma_hat[i];
    }
    let chol = Cholesky::new(a)
        .ok_or_else(|| CapaError::Numeric("posterior precision lost positive definiteness".into()))?;
    let shared_cov = {
        let mut c = chol.inverse() * sigma_x2;
        let nn = c.nrows();
        for i in 0..nn {
            for j in (i + 1)..nn {
                let v = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    };

    // rhs column i: W^T x_i + Sigma_hat^{-1} m_i
    let threads = e_step_threads();
    let mean = if threads > 1 && t >= 64 {
        parallel_posterior_means(x, w, &inv_sigma_hat, &mf.m, &chol, t)
    } else {
        let mut rhs = w.transpose() * x;
        for i in 0..t {
            for r in 0..n {
                rhs[(r, i)] += inv_sigma_hat[r] * mf.m[(r, i)];
            }
        }
        chol.solve(&rhs)
    };

    let mut second_moment = Vec::with_capacity(t);
    for i in 0..t {
        let mu = mean.column(i);
        second_moment.push(&shared_cov + &mu * mu.transpose());
    }
    Ok(LatentMoments {
        mean,
        second_moment,
    })
}

/// Column-chunked parallel path. Each sample column is computed independently
/// with the same operations as the sequential path, so outputs match exactly.
fn parallel_posterior_means(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    inv_sigma_hat: &DVector<f64>,
    m: &DMatrix<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    t: usize,
) -> DMatrix<f64> {
    use rayon::prelude::*;
    let n = w.ncols();
    let chunk = 256;
    let starts: Vec<usize> = (0..t).step_by(chunk).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let len = chunk.min(t - s);
            let xb = x.columns(s, len);
            let mut rhs = w.transpose() * xb;
            for i in 0..len {
                for r in 0..n {
                    rhs[(r, i)] += inv_sigma_hat[r] * m[(r, s + i)];
                }
            }
            chol.solve(&rhs)
        })
        .collect();
    let mut mean = DMatrix::zeros(n, t);
    for (&s, block) in starts.iter().zip(&blocks) {
        mean.columns_mut(s, block.ncols()).copy_from(block);
    }
    mean
}

/// M-step for the observation parameters.
///
/// `W = (sum_i x_i E[y_i]^T)(sum_i E[y_i y_i^T])^{-1}` and the residual-form
/// noise update. Reductions run in a fixed sample order.
pub fn m_step_theta(x: &DMatrix<f64>, moments: &LatentMoments) -> Result<(DMatrix<f64>, f64)> {
    let f = x.nrows();
    let t = x.ncols();
    let sxy = x * moments.mean.transpose(); // F×N
    let syy = moments.second_moment_sum();
    let chol = Cholesky::new(syy.clone())
        .ok_or_else(|| CapaError::Singular("second-moment sum is singular".into()))?;
    let w = chol.solve(&sxy.transpose()).transpose(); // F×N

    let wt_x = w.transpose() * x;
    let mut cross = 0.0;
    for (a, b) in wt_x.iter().zip(moments.mean.iter()) {
        cross += a * b;
    }
    let wtw = w.transpose() * &w;
    let trace_term = (&syy * &wtw).trace();
    let mut sigma_x2 = (x.norm_squared() - 2.0 * cross + trace_term) / (f * t) as f64;
    if sigma_x2 < -1e-10 {
        return Err(CapaError::Numeric(format!(
            "noise variance update produced {sigma_x2}"
        )));
    }
    if sigma_x2 < 0.0 {
        sigma_x2 = 0.0;
    }
    Ok((w, sigma_x2))
}

/// M-step for the per-dimension prior variances (Eq.-29 form):
/// `sigma_n^2 = (zeta/T) sum_i (E[y_{n,i}^2] - 2 E[y_{n,i}] m_{n,i} + m_{n,i}^2)`
/// with `zeta = 1` for PCA and `lambda_n + (1-lambda_n)^2` for LDA/LPP.
pub fn m_step_sigma_n(
    moments: &LatentMoments,
    m: &DMatrix<f64>,
    lambda: &DVector<f64>,
    kind: ModelKind,
) -> DVector<f64> {
    let n = moments.latent_dim();
    let t = moments.num_samples();
    let mut sums: DVector<f64> = DVector::zeros(n);
    for i in 0..t {
        let smi = &moments.second_moment[i];
        for r in 0..n {
            let ey = moments.mean[(r, i)];
            let mi = m[(r, i)];
            sums[r] += smi[(r, r)] - 2.0 * ey * mi + mi * mi;
        }
    }
    DVector::from_fn(n, |r, _| {
        let zeta: f64 = match kind {
            ModelKind::Pca => 1.0,
            ModelKind::Lda | ModelKind::Lpp => {
                let om = 1.0 - lambda[r];
                lambda[r] + om * om
            }
            ModelKind::Sfa => 1.0,
        };
        (zeta / t as f64 * sums[r]).max(1e-12_f64)
    })
}

/// Whether the per-dimension prior variances stay on the
/// `sigma^2 = 1 - lambda^2` schedule or are re-estimated each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaPolicy {
    #[default]
    Fixed,
    FreeSigma,
}

/// Options shared by the EM fits.
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative objective-change threshold; must be positive.
    pub tol: f64,
    pub seed: u64,
    pub lambda_policy: LambdaPolicy,
    pub lda_mean_field: LdaMeanField,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-8,
            seed: 0,
            lambda_policy: LambdaPolicy::Fixed,
            lda_mean_field: LdaMeanField::Printed,
        }
    }
}

/// Why the EM loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Tolerance,
    MaxIter,
}

/// Objective trace of an EM fit.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub iterations: usize,
    /// One value per iteration: the surrogate free energy for the mean-field
    /// fits, the exact marginal log-likelihood for the SFA chain fit. Either
    /// way the trace is non-decreasing within [`OBJECTIVE_SLACK`].
    pub objective: Vec<f64>,
    pub converged: bool,
    pub reason: StopReason,
    pub notes: Vec<String>,
}

/// Relative slack allowed before an objective decrease counts against the
/// monotonicity of the trace.
pub const OBJECTIVE_SLACK: f64 = 1e-9;

const SIGMA_FLOOR: f64 = 1e-12;

/// Mean-field EM fit for PCA, LDA or LPP.
///
/// Per iteration: mean-field means from the previous posterior means (zeros
/// at iteration 1), mean-field variance, exact E-step, M-step for `W` and
/// `sigma_x^2`, and optionally the `sigma_n^2` update. Lambda stays on the
/// schedule throughout. Deterministic given the seed.
pub fn em_fit(
    data: &DataMatrix,
    kind: ModelKind,
    spec: &NeighbourhoodSpec,
    n: usize,
    opts: &EmOptions,
) -> Result<(ModelParams, EmTrace)> {
    if kind == ModelKind::Sfa {
        return Err(CapaError::Config(
            "SFA is solved by the exact chain EM (sfa_em_fit)".into(),
        ));
    }
    let f = data.feature_dim();
    let t = data.num_samples();
    if n == 0 || n > f {
        return Err(CapaError::Dimension(format!(
            "latent dimension {n} must be in 1..={f}"
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(CapaError::Parameter(format!(
            "tol must be positive, got {}",
            opts.tol
        )));
    }
    if spec.model_kind() != kind {
        return Err(CapaError::Config(format!(
            "neighbourhood {:?} does not match model kind {:?}",
            spec.kind, kind
        )));
    }
    let hood = LatentNeighbourhood::resolve(data, spec)?;
    let (lambda, mut sigma2) = lambda_schedule(n);
    let x = data.values();

    let (mut w, mut sigma_x2) = init_theta(x, n, opts.seed);
    let mut sigma = mean_field_variance(kind, &lambda, &sigma2);
    let mut notes = Vec::new();
    let mut objective: Vec<f64> = Vec::with_capacity(opts.max_iter);
    let mut prev_mean: Option<DMatrix<f64>> = None;
    let mut decreases = 0usize;
    let mut converged = false;

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let m = match &prev_mean {
            None => DMatrix::zeros(n, t),
            Some(ey) => mean_field_means(kind, ey, &hood, &lambda, opts.lda_mean_field),
        };
        let mf = MeanFieldState::new(m, sigma.clone(), sigma_x2)?;
        let moments = e_step(x, &w, sigma_x2, &mf)?;
        let (w_new, sx2_new) = m_step_theta(x, &moments)?;
        w = w_new;
        sigma_x2 = sx2_new;
        if sigma_x2 < SIGMA_FLOOR {
            notes.push(format!(
                "iteration {iterations}: sigma_x2 clamped to {SIGMA_FLOOR}"
            ));
            sigma_x2 = SIGMA_FLOOR;
        }
        if opts.lambda_policy == LambdaPolicy::FreeSigma {
            sigma2 = m_step_sigma_n(&moments, &mf.m, &lambda, kind);
            sigma = mean_field_variance(kind, &lambda, &sigma2);
        }

        let obj = free_energy(x, &w, sigma_x2, &moments, &mf.m, &sigma);
        if let Some(&prev) = objective.last() {
            let slack = OBJECTIVE_SLACK * prev.abs();
            if obj < prev - slack {
                decreases += 1;
                if decreases >= 3 {
                    objective.push(obj);
                    let trace = EmTrace {
                        iterations,
                        objective,
                        converged: false,
                        reason: StopReason::MaxIter,
                        notes,
                    };
                    return Err(CapaError::Divergence {
                        reason: format!(
                            "objective decreased beyond slack for 3 consecutive iterations \
                             (last {prev} -> {obj})"
                        ),
                        trace: Box::new(trace),
                    });
                }
            } else {
                decreases = 0;
            }
            if (obj - prev).abs() <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        objective.push(obj);
        if converged {
            break;
        }
        prev_mean = Some(moments.mean);
    }

    let params = ModelParams {
        kind,
        solver: SolverKind::Em,
        w,
        sigma_x2,
        lambda,
        sigma2,
        data_mean: data.mean().clone(),
    };
    let trace = EmTrace {
        iterations,
        objective,
        converged,
        reason: if converged {
            StopReason::Tolerance
        } else {
            StopReason::MaxIter
        },
        notes,
    };
    Ok((params, trace))
}

/// Scale-matched random start: W entries are standard normal draws scaled by
/// (overall data std)/sqrt(N); sigma_x^2 starts at half the mean per-dimension
/// variance.
pub(crate) fn init_theta(x: &DMatrix<f64>, n: usize, seed: u64) -> (DMatrix<f64>, f64) {
    let f = x.nrows();
    let t = x.ncols();
    let mean_var = x.norm_squared() / (f * t) as f64;
    let scale = mean_var.sqrt() / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(f, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    (w, (0.5 * mean_var).max(SIGMA_FLOOR))
}

/// EM objective: the free energy of the mean-field surrogate, i.e. the
/// expected complete-data log-likelihood (Gaussian observation term plus the
/// `N(m_i, Sigma)` prior term, in expectation under the current posterior)
/// plus the posterior entropy. Both the E-step and the M-step increase this
/// quantity for a fixed mean field, which is what makes the trace a usable
/// monotonicity diagnostic; the bare expected complete-data log-likelihood is
/// not monotone under EM.
fn free_energy(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    moments: &LatentMoments,
    m: &DMatrix<f64>,
    sigma: &DVector<f64>,
) -> f64 {
    let f = x.nrows() as f64;
    let t = x.ncols() as f64;
    let n = moments.latent_dim();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let wt_x = w.transpose() * x;
    let mut cross = 0.0;
    for (a, b) in wt_x.iter().zip(moments.mean.iter()) {
        cross += a * b;
    }
    let syy = moments.second_moment_sum();
    let wtw = w.transpose() * w;
    let resid = x.norm_squared() - 2.0 * cross + (&syy * &wtw).trace();
    let data_term = -0.5 * t * f * (ln_2pi + sigma_x2.ln()) - 0.5 * resid / sigma_x2;

    let mut prior_quad = 0.0;
    let mut prior_log = 0.0;
    for r in 0..n {
        let mut s = syy[(r, r)];
        for i in 0..moments.num_samples() {
            let ey = moments.mean[(r, i)];
            let mi = m[(r, i)];
            s += -2.0 * ey * mi + mi * mi;
        }
        prior_quad += s / sigma[r];
        prior_log += sigma[r].ln();
    }
    let prior_term = -0.5 * t * (n as f64 * ln_2pi + prior_log) - 0.5 * prior_quad;

    // Posterior entropy; the covariance is shared across samples.
    let mu0 = moments.mean.column(0);
    let mut cov = &moments.second_moment[0] - &mu0 * mu0.transpose();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let logdet = match Cholesky::new(cov) {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    };
    let entropy = 0.5 * t * (n as f64 * (1.0 + ln_2pi) + logdet);
    data_term + prior_term + entropy
}
