//! Closed-form maximum-likelihood solver.
//!
//! The ML stationarity condition makes W the matrix that simultaneously
//! diagonalises the pair `(X B1 X^T, X B2 X^T)`, i.e. a generalized
//! eigenproblem. The solve whitens the second matrix with a Cholesky factor
//! and runs a symmetric eigendecomposition in the whitened space, which keeps
//! everything symmetric throughout.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{CapaError, Result};
use crate::model::{DataMatrix, ModelKind, ModelParams, SolverKind};
use crate::priors::{build_prior_operators, lambda_schedule, NeighbourhoodSpec, PriorOperators};

/// The pair of F×F scatter matrices entering the stationarity condition.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    /// X B1 X^T
    pub a1: DMatrix<f64>,
    /// X B2 X^T
    pub a2: DMatrix<f64>,
    pub kind: ModelKind,
}

/// Row ordering of the returned directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenOrder {
    /// Ascending generalized eigenvalue of `A1 w = mu A2 w` (LDA/LPP/SFA).
    AscendingGeneralized,
    /// Descending Rayleigh quotient of A1 (the PCA case, solved against A2 = I).
    DescendingA1,
}

/// Output of [`simultaneous_diagonalize`].
#[derive(Debug, Clone)]
pub struct SimDiag {
    /// N×F; rows are generalized eigenvectors normalized so `W A2 W^T = I`.
    pub w: DMatrix<f64>,
    /// Generalized eigenvalues in row order.
    pub eigenvalues: DVector<f64>,
    /// Whether A2 needed ridge regularization before factoring.
    pub regularization_applied: bool,
}

/// Result of an ML fit.
#[derive(Debug, Clone)]
pub struct MlFit {
    pub params: ModelParams,
    pub eigenvalues: DVector<f64>,
    pub regularization_applied: bool,
    pub warnings: Vec<String>,
}

/// Forms the scatter pair `(X B1 X^T, X B2 X^T)` through the structured
/// operator products and symmetrizes the results.
pub fn scatter_pair(data: &DataMatrix, ops: &PriorOperators) -> ScatterPair {
    let x = data.values();
    let mut a1 = ops.b1.xbxt(x);
    let mut a2 = ops.b2.xbxt(x);
    symmetrize(&mut a1);
    symmetrize(&mut a2);
    ScatterPair {
        a1,
        a2,
        kind: ops.kind,
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

fn check_symmetric(a: &DMatrix<f64>, name: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(CapaError::Dimension(format!(
            "{name} is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-8 * scale {
                return Err(CapaError::Parameter(format!("{name} is not symmetric")));
            }
        }
    }
    Ok(())
}

const COND_MAX: f64 = 1e12;
const RIDGE_EPS: f64 = 1e-10;

/// Solves the generalized symmetric eigenproblem `A1 w = mu A2 w` and returns
/// the N leading rows per `order`.
///
/// A2 must be positive definite up to the ridge repair: when its condition
/// number exceeds 1e12, `eps * tr(A2)/F * I` is added once and the
/// `regularization_applied` flag is set. Rows satisfy `w^T A2 w = 1` and the
/// sign convention that each row's largest-magnitude entry is positive.
pub fn simultaneous_diagonalize(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    n: usize,
    order: EigenOrder,
) -> Result<SimDiag> {
    check_symmetric(a1, "A1")?;
    check_symmetric(a2, "A2")?;
    let f = a1.nrows();
    if a2.nrows() != f {
        return Err(CapaError::Dimension(format!(
            "A1 is {f}x{f} but A2 is {}x{}",
            a2.nrows(),
            a2.ncols()
        )));
    }
    if n > f {
        return Err(CapaError::Dimension(format!(
            "requested {n} directions from a {f}-dimensional pair"
        )));
    }

    let eig2 = a2.clone().symmetric_eigen();
    let max_ev = eig2.eigenvalues.max();
    let min_ev = eig2.eigenvalues.min();
    let mut a2_work = a2.clone();
    let mut regularized = false;
    if !(min_ev > 0.0 && max_ev / min_ev <= COND_MAX) {
        let ridge = RIDGE_EPS * a2.trace() / f as f64;
        for i in 0..f {
            a2_work[(i, i)] += ridge;
        }
        regularized = true;
    }

    let chol = Cholesky::new(a2_work).ok_or_else(|| {
        let effective_rank = eig2
            .eigenvalues
            .iter()
            .filter(|&&ev| ev > max_ev.max(0.0) * 1e-12)
            .count();
        CapaError::Singular(format!(
            "A2 is rank-deficient beyond repair (effective rank {effective_rank} of {f})"
        ))
    })?;

    // Whiten: C = L^{-1} A1 L^{-T}, then a symmetric eigendecomposition.
    let l = chol.l();
    let z = l
        .solve_lower_triangular(a1)
        .ok_or_else(|| CapaError::Singular("Cholesky factor is singular".into()))?;
    let zt = z.transpose();
    let c_t = l
        .solve_lower_triangular(&zt)
        .ok_or_else(|| CapaError::Singular("Cholesky factor is singular".into()))?;
    let mut c = c_t.transpose();
    symmetrize(&mut c);
    let eig = c.symmetric_eigen();

    // Back-transform: V = L^{-T} Q gives v^T A2 v = 1 columnwise.
    let v = l
        .transpose()
        .solve_upper_triangular(&eig.eigenvectors)
        .ok_or_else(|| CapaError::Singular("Cholesky factor is singular".into()))?;

    let mut idx: Vec<usize> = (0..f).collect();
    match order {
        EigenOrder::AscendingGeneralized => idx.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .unwrap()
                .then(a.cmp(&b))
        }),
        EigenOrder::DescendingA1 => idx.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap()
                .then(a.cmp(&b))
        }),
    }

    let mut w = DMatrix::zeros(n, f);
    let mut eigenvalues = DVector::zeros(n);
    for (row, &col) in idx.iter().take(n).enumerate() {
        eigenvalues[row] = eig.eigenvalues[col];
        let mut direction = v.column(col).clone_owned();
        fix_sign(&mut direction);
        w.row_mut(row).copy_from(&direction.transpose());
    }
    Ok(SimDiag {
        w,
        eigenvalues,
        regularization_applied: regularized,
    })
}

/// Flips the vector so its largest-magnitude entry (lowest index on ties) is
/// positive.
fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v *= -1.0;
    }
}

/// Closed-form fit: builds the prior's scatter pair and solves the
/// model-specific eigenproblem.
///
/// * PCA: top-N eigenvectors of `S = (1/T) X X^T`, unit-norm rows.
/// * LDA: N smallest generalized eigenpairs of `(S_w, S)`.
/// * LPP: N smallest of `(X L X^T, X D X^T)`.
/// * SFA: N smallest of `(X K X^T, S)`, i.e. slowest directions first.
///
/// Normalizing against `S` (instead of `X X^T`) makes the fitted latents
/// unit-covariance for LDA/SFA under the `sigma^2 = 1 - lambda^2` policy.
pub fn ml_fit(
    data: &DataMatrix,
    kind: ModelKind,
    spec: &NeighbourhoodSpec,
    n: usize,
) -> Result<MlFit> {
    let f = data.feature_dim();
    let t = data.num_samples();
    if n == 0 || n > f {
        return Err(CapaError::Dimension(format!(
            "latent dimension {n} must be in 1..={f}"
        )));
    }
    let (lambda, sigma2) = lambda_schedule(n);
    let ops = build_prior_operators(kind, data, spec, &lambda, &sigma2)?;
    let pair = scatter_pair(data, &ops);

    let tf = t as f64;
    let mut solved = match kind {
        ModelKind::Pca => {
            let s = &pair.a1 / tf;
            let identity = DMatrix::identity(f, f);
            simultaneous_diagonalize(&s, &identity, n, EigenOrder::DescendingA1)?
        }
        _ => simultaneous_diagonalize(&pair.a1, &pair.a2, n, EigenOrder::AscendingGeneralized)?,
    };
    // The solve normalizes rows against X X^T; the scale policy wants the
    // latents unit-covariance against S = (1/T) X X^T, hence the sqrt(T).
    if matches!(kind, ModelKind::Lda | ModelKind::Sfa) {
        solved.w *= tf.sqrt();
    }

    let sigma_x2 = residual_variance(data.values(), &solved.w);
    let params = ModelParams {
        kind,
        solver: SolverKind::Ml,
        w: solved.w,
        sigma_x2,
        lambda,
        sigma2,
        data_mean: data.mean().clone(),
    };
    Ok(MlFit {
        params,
        eigenvalues: solved.eigenvalues,
        regularization_applied: solved.regularization_applied,
        warnings: ops.warnings,
    })
}

/// Mean residual variance of the rank-N reconstruction: project X onto the
/// orthonormalized row span of W and measure what is left. Stored so EM warm
/// starts have a noise scale to begin from.
fn residual_variance(x: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let f = x.nrows();
    let t = x.ncols();
    let svd = w.transpose().clone_owned().svd(true, false);
    let u = svd.u.expect("svd requested u");
    let max_sv = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > max_sv * 1e-12)
        .count();
    let basis = u.columns(0, rank);
    let projected = &basis * (basis.transpose() * x);
    let residual = x - projected;
    residual.norm_squared() / (f * t) as f64
}
