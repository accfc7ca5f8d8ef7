//! SFA as a directed linear Markov chain.
//!
//! The chain prior has no loops, so unlike the other models its EM needs no
//! mean-field approximation: a Kalman forward pass plus Rauch-Tung-Striebel
//! smoothing gives the exact posterior marginals and pairwise cross-moments.
//! The update step reuses the shared M-step for `W` and `sigma_x^2` and adds
//! the diagonal-transition update for lambda with `sigma^2 = 1 - lambda^2`.
//!
//! State model: `y_t = diag(lambda) y_{t-1} + w_t`, `w_t ~ N(0, diag(sigma^2))`,
//! `y_1 ~ N(0, I)` (the stationary marginal under the scale policy), observed
//! through `x_t = W y_t + e_t`, `e_t ~ N(0, sigma_x^2 I)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::em::{EmOptions, EmTrace, StopReason, OBJECTIVE_SLACK};
use crate::error::{CapaError, Result};
use crate::ml::{ml_fit, MlFit};
use crate::model::{DataMatrix, LatentMoments, ModelKind, ModelParams, SolverKind};
use crate::priors::{lambda_schedule, NeighbourhoodSpec};

/// Smoothed posterior moments of the latent chain.
#[derive(Debug, Clone)]
pub struct ChainMoments {
    /// N×T smoothed means.
    pub mean: DMatrix<f64>,
    /// T smoothed covariances.
    pub cov: Vec<DMatrix<f64>>,
    /// T-1 full second cross-moments; entry t is `E[y_{t+2} y_{t+1}^T]`
    /// in 1-based time, i.e. `cross_cov[t] = Cov(y_{t+1}, y_t | X) + mean product`.
    pub cross_cov: Vec<DMatrix<f64>>,
}

impl ChainMoments {
    /// Marginal per-sample moments in the shared [`LatentMoments`] form.
    pub fn marginal_moments(&self) -> LatentMoments {
        let t = self.mean.ncols();
        let mut second = Vec::with_capacity(t);
        for i in 0..t {
            let mu = self.mean.column(i);
            second.push(&self.cov[i] + &mu * mu.transpose());
        }
        LatentMoments {
            mean: self.mean.clone(),
            second_moment: second,
        }
    }

    pub fn min_cov_eigenvalue(&self) -> f64 {
        self.cov
            .iter()
            .map(|c| c.clone().symmetric_eigen().eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

fn spd_inverse(a: &DMatrix<f64>, what: &str, t: usize) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or_else(|| {
        CapaError::Numeric(format!("{what} covariance not positive definite at t = {t}"))
    })?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

struct FilterPass {
    filtered_mean: Vec<DVector<f64>>,
    filtered_cov: Vec<DMatrix<f64>>,
    predicted_mean: Vec<DVector<f64>>,
    predicted_cov: Vec<DMatrix<f64>>,
    loglik: f64,
}

/// Forward Kalman pass in information form: the update inverts the N×N
/// posterior precision instead of the F×F innovation covariance, keeping the
/// sweep O(T (N^3 + N F)). The marginal log-likelihood is accumulated through
/// the matrix-determinant lemma for the same reason.
fn forward_filter(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    lambda: &DVector<f64>,
    sigma2: &DVector<f64>,
    sigma1: &DVector<f64>,
) -> Result<FilterPass> {
    let n = w.ncols();
    let f = w.nrows();
    let t = x.ncols();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let gram = {
        let mut g = w.transpose() * w;
        symmetrize(&mut g);
        g
    };
    let wt_x = w.transpose() * x;

    let mut filtered_mean = Vec::with_capacity(t);
    let mut filtered_cov = Vec::with_capacity(t);
    let mut predicted_mean = Vec::with_capacity(t);
    let mut predicted_cov = Vec::with_capacity(t);
    let mut loglik = 0.0;

    for step in 0..t {
        let (mu_pred, p_pred) = if step == 0 {
            (DVector::zeros(n), DMatrix::from_diagonal(sigma1))
        } else {
            let prev_mu: &DVector<f64> = &filtered_mean[step - 1];
            let prev_p: &DMatrix<f64> = &filtered_cov[step - 1];
            let mu = DVector::from_fn(n, |i, _| lambda[i] * prev_mu[i]);
            let mut p = DMatrix::from_fn(n, n, |i, j| lambda[i] * prev_p[(i, j)] * lambda[j]);
            for i in 0..n {
                p[(i, i)] += sigma2[i];
            }
            (mu, p)
        };

        let p_pred_inv = spd_inverse(&p_pred, "predicted", step + 1)?;

        // marginal likelihood of x_t | x_{1..t-1} via Woodbury + determinant lemma
        let innovation = x.column(step) - w * &mu_pred;
        let cap = {
            let mut c = &p_pred_inv + &gram / sigma_x2;
            symmetrize(&mut c);
            c
        };
        let cap_chol = Cholesky::new(cap.clone())
            .ok_or_else(|| CapaError::Numeric(format!("filter lost PD at t = {}", step + 1)))?;
        let wt_v = w.transpose() * &innovation;
        let solved = cap_chol.solve(&(&wt_v / sigma_x2));
        let quad = innovation.norm_squared() / sigma_x2 - (wt_v.transpose() * &solved)[0] / sigma_x2;
        // log det(sigma_x^2 I + W P W^T) = F log sigma_x^2 + log det(P) + log det(cap)
        let logdet_cap = 2.0 * cap_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet_p = {
            let p_chol = Cholesky::new(p_pred.clone())
                .ok_or_else(|| CapaError::Numeric(format!("filter lost PD at t = {}", step + 1)))?;
            2.0 * p_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        };
        loglik += -0.5 * (f as f64 * (ln_2pi + sigma_x2.ln()) + logdet_p + logdet_cap + quad);

        // posterior update in information form
        let p_filt = {
            let mut p = cap_chol.inverse();
            symmetrize(&mut p);
            p
        };
        let rhs = &p_pred_inv * &mu_pred + wt_x.column(step) / sigma_x2;
        let mu_filt = cap_chol.solve(&rhs);
        if mu_filt.iter().any(|v| !v.is_finite()) || p_filt.iter().any(|v| !v.is_finite()) {
            return Err(CapaError::Numeric(format!(
                "non-finite filter state at t = {}",
                step + 1
            )));
        }

        predicted_mean.push(mu_pred);
        predicted_cov.push(p_pred);
        filtered_mean.push(mu_filt);
        filtered_cov.push(p_filt);
    }
    Ok(FilterPass {
        filtered_mean,
        filtered_cov,
        predicted_mean,
        predicted_cov,
        loglik,
    })
}

fn rts_smooth(pass: &FilterPass, lambda: &DVector<f64>) -> Result<ChainMoments> {
    let t = pass.filtered_mean.len();
    let n = lambda.len();
    let mut mean_cols = vec![DVector::zeros(n); t];
    let mut cov = vec![DMatrix::zeros(n, n); t];
    let mut cross = vec![DMatrix::zeros(n, n); t.saturating_sub(1)];

    mean_cols[t - 1] = pass.filtered_mean[t - 1].clone();
    cov[t - 1] = pass.filtered_cov[t - 1].clone();

    for step in (0..t - 1).rev() {
        // J = P_f Lambda^T P_pred[step+1]^{-1}
        let p_pred_inv = spd_inverse(&pass.predicted_cov[step + 1], "predicted", step + 2)?;
        let mut pf_lambda = pass.filtered_cov[step].clone();
        for j in 0..n {
            for i in 0..n {
                pf_lambda[(i, j)] *= lambda[j];
            }
        }
        let j_gain = &pf_lambda * &p_pred_inv;

        mean_cols[step] = &pass.filtered_mean[step]
            + &j_gain * (&mean_cols[step + 1] - &pass.predicted_mean[step + 1]);
        let mut c = &pass.filtered_cov[step]
            + &j_gain * (&cov[step + 1] - &pass.predicted_cov[step + 1]) * j_gain.transpose();
        symmetrize(&mut c);
        cov[step] = c;

        // Cov(y_{t+1}, y_t | X) = P_s[t+1] J_t^T; add the mean product for the
        // full second cross-moment.
        let cross_cov = &cov[step + 1] * j_gain.transpose();
        cross[step] = cross_cov + &mean_cols[step + 1] * mean_cols[step].transpose();
    }

    let mut mean = DMatrix::zeros(n, t);
    for (i, col) in mean_cols.iter().enumerate() {
        mean.set_column(i, col);
    }
    Ok(ChainMoments {
        mean,
        cov,
        cross_cov: cross,
    })
}

/// Exact posterior marginals and pairwise cross-moments of the latent chain,
/// via forward filtering and RTS smoothing. The initial-state variance is
/// fixed at 1, the stationary marginal under `sigma^2 = 1 - lambda^2`.
pub fn chain_smooth(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    lambda: &DVector<f64>,
    sigma2: &DVector<f64>,
) -> Result<ChainMoments> {
    let (moments, _) = chain_smooth_with_loglik(x, w, sigma_x2, lambda, sigma2)?;
    Ok(moments)
}

/// As [`chain_smooth`], additionally returning the exact marginal
/// log-likelihood accumulated by the forward pass.
pub fn chain_smooth_with_loglik(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    lambda: &DVector<f64>,
    sigma2: &DVector<f64>,
) -> Result<(ChainMoments, f64)> {
    let n = w.ncols();
    if x.nrows() != w.nrows() {
        return Err(CapaError::Dimension(format!(
            "W is {}x{} but data is {}x{}",
            w.nrows(),
            n,
            x.nrows(),
            x.ncols()
        )));
    }
    if lambda.len() != n || sigma2.len() != n {
        return Err(CapaError::Dimension(
            "lambda/sigma2 length must equal the latent dimension".into(),
        ));
    }
    if sigma_x2 <= 0.0 || !sigma_x2.is_finite() {
        return Err(CapaError::Parameter(format!(
            "sigma_x2 must be positive, got {sigma_x2}"
        )));
    }
    if x.ncols() == 0 {
        return Err(CapaError::Dimension("data has no samples".into()));
    }
    let sigma1 = DVector::from_element(n, 1.0);
    let pass = forward_filter(x, w, sigma_x2, lambda, sigma2, &sigma1)?;
    let loglik = pass.loglik;
    let moments = rts_smooth(&pass, lambda)?;
    Ok((moments, loglik))
}

/// Closed-form SFA: delegates to the ML solver with the chain prior; rows come
/// back slowest first.
pub fn sfa_ml_fit(data: &DataMatrix, n: usize) -> Result<MlFit> {
    if !data.is_sequence() {
        return Err(CapaError::Config("SFA requires sequence data".into()));
    }
    if data.num_samples() < 3 {
        return Err(CapaError::Dimension(format!(
            "SFA needs T >= 3, got {}",
            data.num_samples()
        )));
    }
    ml_fit(data, ModelKind::Sfa, &NeighbourhoodSpec::temporal_chain(), n)
}

const LAMBDA_CLAMP: f64 = 1e-6;

/// Maximizes the expected transition log-likelihood of one latent dimension
/// under the `sigma^2 = 1 - lambda^2` tie:
///
/// `Q(l) = -(tau/2) ln(1 - l^2) - (A - 2lB + l^2 C) / (2 (1 - l^2))`
///
/// with `A = sum E[y_t^2]`, `B = sum E[y_t y_{t-1}]`, `C = sum E[y_{t-1}^2]`
/// over the `tau = T - 1` transitions. Stationary points are real roots of
/// `tau l^3 - B l^2 + (A + C - tau) l - B = 0`; the previous lambda and the
/// clamp endpoints are kept as candidates so the update never descends.
fn constrained_lambda_update(a: f64, b: f64, c: f64, tau: f64, lambda_old: f64) -> f64 {
    let q = |l: f64| -> f64 {
        let om = 1.0 - l * l;
        -0.5 * tau * om.ln() - (a - 2.0 * l * b + l * l * c) / (2.0 * om)
    };
    let lo = LAMBDA_CLAMP;
    let hi = 1.0 - LAMBDA_CLAMP;
    let mut candidates = vec![lo, hi, lambda_old.clamp(lo, hi)];

    // companion-matrix roots of the monic cubic
    let ca = -b / tau;
    let cb = (a + c - tau) / tau;
    let cc = -b / tau;
    let companion = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 0.0, -cc, 1.0, 0.0, -cb, 0.0, 1.0, -ca],
    );
    for root in companion.complex_eigenvalues().iter() {
        if root.im.abs() < 1e-9 {
            let l = root.re;
            if l > -1.0 && l < 1.0 {
                candidates.push(l.clamp(lo, hi));
            }
        }
    }
    let mut best = candidates[0];
    let mut best_q = q(best);
    for &cand in &candidates[1..] {
        let val = q(cand);
        if val > best_q {
            best_q = val;
            best = cand;
        }
    }
    best
}

/// Exact EM for SFA.
///
/// Iterates smoothing, the shared M-step for `(W, sigma_x^2)` and the
/// diagonal-transition update
/// `lambda_n = sum_t E[y_{n,t} y_{n,t-1}] / sum_t E[y_{n,t-1}^2]`
/// (clamped into (0, 1)) with `sigma_n^2 = 1 - lambda_n^2`. The recorded
/// objective is the exact marginal log-likelihood, which EM ascent makes
/// non-decreasing. At the end, latent dimensions are sorted by lambda
/// descending (slowest first).
pub fn sfa_em_fit(
    data: &DataMatrix,
    n: usize,
    opts: &EmOptions,
) -> Result<(ModelParams, EmTrace)> {
    if !data.is_sequence() {
        return Err(CapaError::Config("SFA requires sequence data".into()));
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
    let x = data.values();
    let (mut w, mut sigma_x2) = crate::em::init_theta(x, n, opts.seed);
    let (mut lambda, mut sigma2) = lambda_schedule(n);

    let mut objective: Vec<f64> = Vec::with_capacity(opts.max_iter);
    let mut notes = Vec::new();
    let mut decreases = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let (moments, loglik) = chain_smooth_with_loglik(x, &w, sigma_x2, &lambda, &sigma2)?;

        if let Some(&prev) = objective.last() {
            let slack = OBJECTIVE_SLACK * prev.abs();
            if loglik < prev - slack {
                decreases += 1;
                if decreases >= 3 {
                    objective.push(loglik);
                    let trace = EmTrace {
                        iterations,
                        objective,
                        converged: false,
                        reason: StopReason::MaxIter,
                        notes,
                    };
                    return Err(CapaError::Divergence {
                        reason: format!(
                            "marginal log-likelihood decreased beyond slack for 3 consecutive \
                             iterations (last {prev} -> {loglik})"
                        ),
                        trace: Box::new(trace),
                    });
                }
            } else {
                decreases = 0;
            }
            if (loglik - prev).abs() <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        objective.push(loglik);
        if converged || iterations == opts.max_iter {
            break;
        }

        // M-step: shared theta update on the chain marginals.
        let marginals = moments.marginal_moments();
        let (w_new, sx2_new) = crate::em::m_step_theta(x, &marginals)?;
        w = w_new;
        sigma_x2 = sx2_new.max(1e-12);

        // Diagonal transition update from the pairwise moments, maximizing the
        // expected transition log-likelihood under the sigma^2 = 1 - lambda^2
        // tie. (The unconstrained ratio B/C paired with the tie is not an
        // ascent step and can drive the likelihood down.)
        for r in 0..n {
            let mut a = 0.0;
            let mut b = 0.0;
            let mut c = 0.0;
            for step in 0..t - 1 {
                a += moments.cov[step + 1][(r, r)] + moments.mean[(r, step + 1)].powi(2);
                b += moments.cross_cov[step][(r, r)];
                c += moments.cov[step][(r, r)] + moments.mean[(r, step)].powi(2);
            }
            let l = constrained_lambda_update(a, b, c, (t - 1) as f64, lambda[r]);
            lambda[r] = l;
            sigma2[r] = 1.0 - l * l;
        }
    }

    // Slowest dimension first; ties get a deterministic nudge so the strict
    // ordering invariant of ModelParams holds.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lambda[b].partial_cmp(&lambda[a]).unwrap().then(a.cmp(&b)));
    let mut w_sorted = DMatrix::zeros(f, n);
    let mut lambda_sorted = DVector::zeros(n);
    let mut sigma2_sorted = DVector::zeros(n);
    for (new_idx, &old_idx) in order.iter().enumerate() {
        w_sorted.set_column(new_idx, &w.column(old_idx));
        lambda_sorted[new_idx] = lambda[old_idx];
        sigma2_sorted[new_idx] = sigma2[old_idx];
    }
    for i in 1..n {
        if lambda_sorted[i] >= lambda_sorted[i - 1] {
            lambda_sorted[i] = lambda_sorted[i - 1] - 1e-12;
            sigma2_sorted[i] = 1.0 - lambda_sorted[i] * lambda_sorted[i];
            notes.push(format!("tied lambda at dimension {i} nudged for strict ordering"));
        }
    }

    let params = ModelParams {
        kind: ModelKind::Sfa,
        solver: SolverKind::Em,
        w: w_sorted,
        sigma_x2,
        lambda: lambda_sorted,
        sigma2: sigma2_sorted,
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

/// Mean squared first difference of each row; the quantity SFA minimizes.
pub fn slowness(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows();
    let t = y.ncols();
    DVector::from_fn(n, |r, _| {
        if t < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for j in 1..t {
            let d = y[(r, j)] - y[(r, j - 1)];
            s += d * d;
        }
        s / (t - 1) as f64
    })
}
