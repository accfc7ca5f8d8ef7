//! Shared data model: observations, fitted parameters and posterior moments.

use nalgebra::{DMatrix, DVector};

use crate::em::mean_field_variance;
use crate::error::{CapaError, Result};

/// Which latent neighbourhood the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pca,
    Lda,
    Lpp,
    Sfa,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Pca => "pca",
            ModelKind::Lda => "lda",
            ModelKind::Lpp => "lpp",
            ModelKind::Sfa => "sfa",
        }
    }
}

/// How the parameters were obtained; determines the shape convention of `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Closed-form fit; `w` is N×F and its rows are projection directions.
    Ml,
    /// EM fit; `w` is the F×N loading of the generative model.
    Em,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Ml => "ml",
            SolverKind::Em => "em",
        }
    }
}

/// A centered F×T observation matrix (one column per sample) together with
/// the subtracted mean, optional class labels and a time-series flag.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    mean: DVector<f64>,
    labels: Option<Vec<usize>>,
    is_sequence: bool,
}

impl DataMatrix {
    /// Centers a raw F×T matrix by subtracting its column mean.
    ///
    /// Idempotent: centering already-centered data leaves it unchanged
    /// (exactly when the residual mean is exactly zero, otherwise up to
    /// floating point).
    pub fn center(raw: &DMatrix<f64>) -> Result<Self> {
        if raw.nrows() == 0 || raw.ncols() < 2 {
            return Err(CapaError::Dimension(format!(
                "centering needs F >= 1 and T >= 2, got {}x{}",
                raw.nrows(),
                raw.ncols()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(CapaError::Numeric("input contains non-finite values".into()));
        }
        let t = raw.ncols() as f64;
        let mean = raw.column_sum() / t;
        let mut values = raw.clone();
        for mut col in values.column_iter_mut() {
            col -= &mean;
        }
        Ok(DataMatrix {
            values,
            mean,
            labels: None,
            is_sequence: false,
        })
    }

    /// Centers `raw` with an externally supplied mean (e.g. a fitted model's
    /// stored mean when projecting new data).
    pub fn center_with_mean(raw: &DMatrix<f64>, mean: &DVector<f64>) -> Result<Self> {
        if raw.nrows() != mean.len() {
            return Err(CapaError::Dimension(format!(
                "data has {} rows but mean has length {}",
                raw.nrows(),
                mean.len()
            )));
        }
        if raw.ncols() == 0 {
            return Err(CapaError::Dimension("data has no samples".into()));
        }
        let mut values = raw.clone();
        for mut col in values.column_iter_mut() {
            col -= mean;
        }
        Ok(DataMatrix {
            values,
            mean: mean.clone(),
            labels: None,
            is_sequence: false,
        })
    }

    /// Attaches class labels. Every id in `0..K-1` must occur at least once,
    /// where `K` is the largest id plus one.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_samples() {
            return Err(CapaError::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                self.num_samples()
            )));
        }
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        if k == 0 {
            return Err(CapaError::Parameter("label vector is empty".into()));
        }
        let mut seen = vec![false; k];
        for &c in &labels {
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(CapaError::Parameter(format!(
                "class id {missing} has no samples (ids must cover 0..{})",
                k - 1
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Marks the columns as consecutive samples of a time series.
    pub fn into_sequence(mut self) -> Self {
        self.is_sequence = true;
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_sequence(&self) -> bool {
        self.is_sequence
    }

    /// Observed dimension F.
    pub fn feature_dim(&self) -> usize {
        self.values.nrows()
    }

    /// Sample count T.
    pub fn num_samples(&self) -> usize {
        self.values.ncols()
    }

    /// Number of classes (largest label + 1), when labels are present.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |&m| m + 1))
    }
}

/// Full parameter set of a fitted model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub solver: SolverKind,
    /// ML: N×F with rows as directions. EM: F×N loading.
    pub w: DMatrix<f64>,
    /// Observation noise variance.
    pub sigma_x2: f64,
    /// Per-dimension coupling coefficients, strictly decreasing in (0, 1).
    pub lambda: DVector<f64>,
    /// Per-dimension prior variances; `1 - lambda^2` under the default scale policy.
    pub sigma2: DVector<f64>,
    /// Column mean subtracted from the training data.
    pub data_mean: DVector<f64>,
}

impl ModelParams {
    pub fn latent_dim(&self) -> usize {
        match self.solver {
            SolverKind::Ml => self.w.nrows(),
            SolverKind::Em => self.w.ncols(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.solver {
            SolverKind::Ml => self.w.ncols(),
            SolverKind::Em => self.w.nrows(),
        }
    }

    /// Checks the structural invariants: lambda strictly decreasing in (0,1),
    /// sigma2 positive, consistent lengths and full-rank `w`.
    pub fn validate(&self) -> Result<()> {
        let n = self.latent_dim();
        let f = self.feature_dim();
        if self.lambda.len() != n || self.sigma2.len() != n {
            return Err(CapaError::Dimension(format!(
                "lambda/sigma2 have lengths {}/{} for latent dimension {n}",
                self.lambda.len(),
                self.sigma2.len()
            )));
        }
        if self.data_mean.len() != f {
            return Err(CapaError::Dimension(format!(
                "data_mean has length {} for feature dimension {f}",
                self.data_mean.len()
            )));
        }
        for i in 0..n {
            let l = self.lambda[i];
            if !(0.0 < l && l < 1.0) {
                return Err(CapaError::Parameter(format!(
                    "lambda[{i}] = {l} is outside (0, 1)"
                )));
            }
            if self.sigma2[i] <= 0.0 {
                return Err(CapaError::Parameter(format!(
                    "sigma2[{i}] = {} is not positive",
                    self.sigma2[i]
                )));
            }
            if i > 0 && self.lambda[i] >= self.lambda[i - 1] {
                return Err(CapaError::Parameter(
                    "lambda must be strictly decreasing".into(),
                ));
            }
        }
        if self.sigma_x2 < 0.0 || !self.sigma_x2.is_finite() {
            return Err(CapaError::Parameter(format!(
                "sigma_x2 = {} is invalid",
                self.sigma_x2
            )));
        }
        let svd = self.w.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > max_sv * 1e-12)
            .count();
        if rank < n.min(f) {
            return Err(CapaError::Singular(format!(
                "W has rank {rank}, expected {}",
                n.min(f)
            )));
        }
        Ok(())
    }
}

/// Per-sample posterior moments of the latent variables.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    /// N×T; column i is E[y_i].
    pub mean: DMatrix<f64>,
    /// T symmetric N×N matrices; entry i is E[y_i y_i^T].
    pub second_moment: Vec<DMatrix<f64>>,
}

impl LatentMoments {
    pub fn latent_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.mean.ncols()
    }

    /// Sum of the per-sample second moments, accumulated in sample order.
    pub fn second_moment_sum(&self) -> DMatrix<f64> {
        let n = self.latent_dim();
        let mut sum = DMatrix::zeros(n, n);
        for s in &self.second_moment {
            sum += s;
        }
        sum
    }

    /// Smallest eigenvalue of any per-sample posterior covariance
    /// `E[y y^T] - E[y]E[y]^T`; the PSD invariant requires this `>= -1e-10`.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        let mut min_eig = f64::INFINITY;
        for (i, s) in self.second_moment.iter().enumerate() {
            let m = self.mean.column(i);
            let cov = s - &m * m.transpose();
            let eig = cov.symmetric_eigen();
            min_eig = min_eig.min(eig.eigenvalues.min());
        }
        min_eig
    }
}

/// Projects centered data into the latent space.
///
/// For ML parameters this is the linear map `W x`. For EM parameters it is the
/// posterior mean with the mean-field term dropped (`m_i = 0`), the
/// out-of-sample rule: `(W^T W + Sigma_hat^{-1})^{-1} W^T x`.
pub fn project(params: &ModelParams, data: &DataMatrix) -> Result<DMatrix<f64>> {
    let f = params.feature_dim();
    if data.feature_dim() != f {
        return Err(CapaError::Dimension(format!(
            "model expects {}x? data, got {}x{}",
            f,
            data.feature_dim(),
            data.num_samples()
        )));
    }
    match params.solver {
        SolverKind::Ml => Ok(&params.w * data.values()),
        SolverKind::Em => {
            if params.sigma_x2 <= 0.0 {
                return Err(CapaError::Parameter(
                    "EM projection needs sigma_x2 > 0".into(),
                ));
            }
            let n = params.latent_dim();
            // SFA has no per-sample mean-field variance; a lone out-of-sample
            // point sees the stationary marginal, which is unit variance under
            // the sigma^2 = 1 - lambda^2 scale policy.
            let sigma = match params.kind {
                ModelKind::Sfa => DVector::from_element(n, 1.0),
                kind => mean_field_variance(kind, &params.lambda, &params.sigma2),
            };
            let mut a = params.w.transpose() * &params.w;
            for i in 0..n {
                a[(i, i)] += params.sigma_x2 / sigma[i];
            }
            let chol = nalgebra::Cholesky::new(a).ok_or_else(|| {
                CapaError::Singular("posterior precision is not positive definite".into())
            })?;
            let rhs = params.w.transpose() * data.values();
            Ok(chol.solve(&rhs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn center_subtracts_column_mean() {
        let raw = dmatrix![1.0, 3.0; 2.0, 2.0];
        let data = DataMatrix::center(&raw).unwrap();
        assert_eq!(data.values(), &dmatrix![-1.0, 1.0; 0.0, 0.0]);
        assert_eq!(data.mean(), &dvector![2.0, 2.0]);
    }

    #[test]
    fn center_is_idempotent_on_zero_mean_input() {
        let raw = dmatrix![-1.0, 1.0; 3.0, -3.0];
        let once = DataMatrix::center(&raw).unwrap();
        assert_eq!(once.values(), &raw);
        assert_eq!(once.mean(), &dvector![0.0, 0.0]);
        let twice = DataMatrix::center(once.values()).unwrap();
        assert_eq!(twice.values(), once.values());
    }

    #[test]
    fn center_rejects_empty_and_single_sample() {
        assert!(DataMatrix::center(&DMatrix::<f64>::zeros(0, 5)).is_err());
        assert!(DataMatrix::center(&DMatrix::<f64>::zeros(3, 1)).is_err());
    }

    #[test]
    fn centered_rows_sum_to_zero() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = DMatrix::from_fn(5, 100, |_, _| rng.random::<f64>() * 10.0 - 3.0);
        let data = DataMatrix::center(&raw).unwrap();
        for r in 0..5 {
            let row_sum: f64 = data.values().row(r).iter().sum();
            assert!(row_sum.abs() < 1e-9, "row {r} sums to {row_sum}");
        }
    }

    #[test]
    fn labels_must_cover_all_classes() {
        let raw = dmatrix![1.0, 2.0, 3.0, 4.0];
        let data = DataMatrix::center(&raw).unwrap();
        assert!(data.clone().with_labels(vec![0, 0, 2, 2]).is_err());
        let ok = data.with_labels(vec![0, 1, 1, 0]).unwrap();
        assert_eq!(ok.num_classes(), Some(2));
    }

    fn ml_params(w: DMatrix<f64>) -> ModelParams {
        let n = w.nrows();
        let f = w.ncols();
        let (lambda, sigma2) = crate::priors::lambda_schedule(n);
        ModelParams {
            kind: ModelKind::Pca,
            solver: SolverKind::Ml,
            w,
            sigma_x2: 0.0,
            lambda,
            sigma2,
            data_mean: DVector::zeros(f),
        }
    }

    #[test]
    fn ml_identity_projection_returns_centered_data() {
        let raw = dmatrix![1.0, 3.0, 5.0; 0.0, 1.0, -1.0];
        let data = DataMatrix::center(&raw).unwrap();
        let params = ml_params(DMatrix::identity(2, 2));
        let y = project(&params, &data).unwrap();
        assert_eq!(&y, data.values());
    }

    #[test]
    fn project_rejects_dimension_mismatch() {
        let raw = dmatrix![1.0, 3.0, 5.0; 0.0, 1.0, -1.0; 2.0, 2.0, 2.0];
        let data = DataMatrix::center(&raw).unwrap();
        let params = ml_params(DMatrix::identity(2, 2));
        let err = project(&params, &data).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "message: {msg}");
    }

    fn em_params_scalar(w: f64, sigma_x2: f64) -> ModelParams {
        ModelParams {
            kind: ModelKind::Pca,
            solver: SolverKind::Em,
            w: dmatrix![w],
            sigma_x2,
            lambda: dvector![0.5],
            sigma2: dvector![1.0],
            data_mean: dvector![0.0],
        }
    }

    #[test]
    fn em_scalar_projection_matches_hand_posterior() {
        // W = 2, sigma_x2 = 1, Sigma = sigma2 = 1 so Sigma_hat = 1; x = 3:
        // E[y] = (W^2 + 1)^{-1} W x = 6 / 5 = 1.2, confirmed by exact 1-D
        // Gaussian conditioning of N(0,1) prior with N(2y,1) likelihood.
        let params = em_params_scalar(2.0, 1.0);
        let data =
            DataMatrix::center_with_mean(&dmatrix![3.0], &dvector![0.0]).unwrap();
        let y = project(&params, &data).unwrap();
        assert_relative_eq!(y[(0, 0)], 1.2, epsilon = 1e-12);
    }

    #[test]
    fn em_projection_vanishes_as_noise_dominates() {
        let params = em_params_scalar(2.0, 1e12);
        let data =
            DataMatrix::center_with_mean(&dmatrix![3.0], &dvector![0.0]).unwrap();
        let y = project(&params, &data).unwrap();
        assert!(y[(0, 0)].abs() < 1e-9, "got {}", y[(0, 0)]);
    }

    #[test]
    fn validate_rejects_bad_lambda() {
        let mut p = ml_params(DMatrix::identity(2, 2));
        assert!(p.validate().is_ok());
        p.lambda[0] = 0.2; // not decreasing vs lambda[1] = 1/3
        assert!(p.validate().is_err());
    }
}
