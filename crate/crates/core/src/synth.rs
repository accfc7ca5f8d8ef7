//! Synthetic data generators, brute-force oracles and evaluation metrics.
//!
//! Everything here is a pure function of its parameters and seed; generators
//! are bit-reproducible across runs. The dense Gaussian oracle builds the full
//! joint posterior of small instances by brute force and is the independent
//! check for the smoothing and E-step code paths.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CapaError, Result};
use crate::model::LatentMoments;
use crate::priors::PriorOperators;

/// A generated dataset: raw (pre-centering) observations, optional labels,
/// optional ground-truth latents and a descriptor that fully determines the
/// contents.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// F×T raw data.
    pub data: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub ground_truth: Option<DMatrix<f64>>,
    pub descriptor: String,
}

/// Swiss roll: `u ~ U[1.5pi, 4.5pi]`, `h ~ U[0, 21]`, point
/// `(u cos u, h, u sin u)` plus isotropic Gaussian noise. Ground truth is the
/// `(u, h)` parametrization.
pub fn make_swiss_roll(t: usize, noise_sd: f64, seed: u64) -> Result<SyntheticDataset> {
    if t < 10 {
        return Err(CapaError::Parameter(format!("swiss roll needs T >= 10, got {t}")));
    }
    if noise_sd < 0.0 {
        return Err(CapaError::Parameter("noise_sd must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = DMatrix::zeros(3, t);
    let mut truth = DMatrix::zeros(2, t);
    let u_lo = 1.5 * std::f64::consts::PI;
    let u_hi = 4.5 * std::f64::consts::PI;
    for i in 0..t {
        let u = u_lo + (u_hi - u_lo) * rng.random::<f64>();
        let h = 21.0 * rng.random::<f64>();
        let point = [u * u.cos(), h, u * u.sin()];
        for (r, &p) in point.iter().enumerate() {
            data[(r, i)] = p + noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        truth[(0, i)] = u;
        truth[(1, i)] = h;
    }
    Ok(SyntheticDataset {
        data,
        labels: None,
        ground_truth: Some(truth),
        descriptor: format!("swiss_roll(samples={t},noise_sd={noise_sd},seed={seed})"),
    })
}

/// Gaussian clusters with means on a regular simplex: class c sits at
/// `(separation/sqrt(2)) e_c`, so every pair of class means is `separation`
/// apart; samples add isotropic noise of scale `within_sd`.
pub fn make_gaussian_clusters(
    k: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    within_sd: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k < 2 {
        return Err(CapaError::Parameter(format!("need K >= 2 classes, got {k}")));
    }
    if dim < k {
        return Err(CapaError::Parameter(format!(
            "simplex embedding needs dim >= K, got dim = {dim}, K = {k}"
        )));
    }
    if per_class == 0 {
        return Err(CapaError::Parameter("per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = k * per_class;
    let mut data = DMatrix::zeros(dim, t);
    let mut labels = Vec::with_capacity(t);
    let scale = separation / 2.0f64.sqrt();
    for c in 0..k {
        for s in 0..per_class {
            let col = c * per_class + s;
            for r in 0..dim {
                let mean = if r == c { scale } else { 0.0 };
                data[(r, col)] = mean + within_sd * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    Ok(SyntheticDataset {
        data,
        labels: Some(labels),
        ground_truth: None,
        descriptor: format!(
            "gaussian_clusters(classes={k},per_class={per_class},dim={dim},\
             separation={separation},within_sd={within_sd},seed={seed})"
        ),
    })
}

/// Samples the SFA generative model: stationary AR(1) latents with
/// `sigma^2 = 1 - lambda^2`, mixed by a random invertible matrix, plus
/// observation noise. Ground truth is the latent chains.
///
/// `lambdas` may include 0 (white-noise latents) but must stay below 1.
pub fn make_slow_signals(
    n_slow: usize,
    t: usize,
    lambdas: &[f64],
    noise_sd: f64,
    mixing_seed: u64,
) -> Result<SyntheticDataset> {
    if lambdas.len() != n_slow {
        return Err(CapaError::Dimension(format!(
            "{} lambdas for {n_slow} latent dimensions",
            lambdas.len()
        )));
    }
    if t < 2 {
        return Err(CapaError::Parameter("need T >= 2".into()));
    }
    for (i, &l) in lambdas.iter().enumerate() {
        if !(0.0..1.0).contains(&l) {
            return Err(CapaError::Parameter(format!(
                "lambda[{i}] = {l} must lie in [0, 1)"
            )));
        }
    }
    if noise_sd < 0.0 {
        return Err(CapaError::Parameter("noise_sd must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed);

    // Mixing matrix first; redrawn (deterministically) if ill-conditioned.
    let mut mixing = DMatrix::zeros(n_slow, n_slow);
    for _attempt in 0..100 {
        mixing = DMatrix::from_fn(n_slow, n_slow, |_, _| rng.sample::<f64, _>(StandardNormal));
        let svd = mixing.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin > 0.0 && smax / smin < 1e6 {
            break;
        }
    }

    // Latent chains, dimension-major.
    let mut latents = DMatrix::zeros(n_slow, t);
    for r in 0..n_slow {
        let l = lambdas[r];
        let innov_sd = (1.0 - l * l).sqrt();
        latents[(r, 0)] = rng.sample::<f64, _>(StandardNormal);
        for i in 1..t {
            latents[(r, i)] =
                l * latents[(r, i - 1)] + innov_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut data = &mixing * &latents;
    if noise_sd > 0.0 {
        for v in data.iter_mut() {
            *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let lambda_list = lambdas
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",");
    Ok(SyntheticDataset {
        data,
        labels: None,
        ground_truth: Some(latents),
        descriptor: format!(
            "slow_signals(n={n_slow},samples={t},lambdas=[{lambda_list}],\
             noise_sd={noise_sd},seed={mixing_seed})"
        ),
    })
}

/// Principal angles (radians, ascending) between the row spans of two
/// matrices. Errors if either input is row-rank deficient.
pub fn subspace_angles(w1: &DMatrix<f64>, w2: &DMatrix<f64>) -> Result<DVector<f64>> {
    if w1.ncols() != w2.ncols() {
        return Err(CapaError::Dimension(format!(
            "row spans live in different spaces: {} vs {} columns",
            w1.ncols(),
            w2.ncols()
        )));
    }
    let q1 = orthonormal_rowspan_basis(w1)?;
    let q2 = orthonormal_rowspan_basis(w2)?;
    let m = q1.transpose() * q2;
    let svd = m.svd(false, false);
    let mut cosines: Vec<f64> = svd.singular_values.iter().copied().collect();
    cosines.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = w1.nrows().min(w2.nrows());
    Ok(DVector::from_fn(k, |i, _| cosines[i].clamp(-1.0, 1.0).acos()))
}

fn orthonormal_rowspan_basis(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = w.nrows();
    let svd = w.transpose().clone_owned().svd(true, false);
    let u = svd.u.expect("svd with u requested");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-12 && s > 0.0)
        .count();
    if rank < rows {
        return Err(CapaError::Parameter(format!(
            "matrix has row rank {rank}, expected {rows}"
        )));
    }
    Ok(u.columns(0, rows).clone_owned())
}

/// Nearest-class-mean training errors of labeled points in a latent space
/// (columns of `y`).
pub fn nearest_mean_errors(y: &DMatrix<f64>, labels: &[usize]) -> usize {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let n = y.nrows();
    let mut means = vec![DVector::zeros(n); k];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        means[c] += y.column(i);
        counts[c] += 1;
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        if count > 0 {
            *mean /= count as f64;
        }
    }
    let mut errors = 0;
    for (i, &c) in labels.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (cls, mean) in means.iter().enumerate() {
            let d = (y.column(i) - mean).norm_squared();
            if d < best_d {
                best_d = d;
                best = cls;
            }
        }
        if best != c {
            errors += 1;
        }
    }
    errors
}

/// Prior specification accepted by the dense oracle.
pub enum OraclePrior<'a> {
    /// An MRF prior given by its operator pairs.
    Mrf(&'a PriorOperators),
    /// The directed chain of the SFA model.
    Chain {
        lambda: &'a DVector<f64>,
        sigma2: &'a DVector<f64>,
        sigma1: &'a DVector<f64>,
    },
}

/// Exact joint posterior of all latents, computed densely.
#[derive(Debug, Clone)]
pub struct DenseGaussianPosterior {
    /// N×T posterior means.
    pub mean: DMatrix<f64>,
    /// (N·T)×(N·T) joint covariance, sample-major blocks.
    pub covariance: DMatrix<f64>,
}

impl DenseGaussianPosterior {
    pub fn marginal_moments(&self) -> LatentMoments {
        let n = self.mean.nrows();
        let t = self.mean.ncols();
        let mut second = Vec::with_capacity(t);
        for i in 0..t {
            let block = self.covariance.view((i * n, i * n), (n, n)).clone_owned();
            let mu = self.mean.column(i);
            second.push(block + &mu * mu.transpose());
        }
        LatentMoments {
            mean: self.mean.clone(),
            second_moment: second,
        }
    }

    /// Full second cross-moment `E[y_{t+2} y_{t+1}^T]` (0-based `step`).
    pub fn cross_moment(&self, step: usize) -> DMatrix<f64> {
        let n = self.mean.nrows();
        let block = self
            .covariance
            .view(((step + 1) * n, step * n), (n, n))
            .clone_owned();
        block + self.mean.column(step + 1) * self.mean.column(step).transpose()
    }
}

const ORACLE_MAX: usize = 64;

/// Builds the full (N·T)-dimensional joint Gaussian of latents given data and
/// conditions exactly.
///
/// The prior precision is `B1 ⊗ Λ1 + B2 ⊗ Λ2` for the MRF priors (sample-major
/// ordering), or the tridiagonal chain precision for the SFA prior; the
/// observation model contributes `I_T ⊗ (W^T W / sigma_x^2)`.
pub fn dense_gaussian_oracle(
    prior: &OraclePrior,
    w: &DMatrix<f64>,
    sigma_x2: f64,
    x: &DMatrix<f64>,
) -> Result<DenseGaussianPosterior> {
    let n = w.ncols();
    let t = x.ncols();
    if n * t > ORACLE_MAX {
        return Err(CapaError::Parameter(format!(
            "dense oracle capped at N*T <= {ORACLE_MAX}, got {}",
            n * t
        )));
    }
    if w.nrows() != x.nrows() {
        return Err(CapaError::Dimension(format!(
            "W is {}x{} but data is {}x{}",
            w.nrows(),
            n,
            x.nrows(),
            t
        )));
    }
    if sigma_x2 <= 0.0 {
        return Err(CapaError::Parameter("sigma_x2 must be positive".into()));
    }

    let dim = n * t;
    let mut precision = DMatrix::zeros(dim, dim);
    match prior {
        OraclePrior::Mrf(ops) => {
            let b1 = ops.b1.to_dense(t);
            let b2 = ops.b2.to_dense(t);
            for i in 0..t {
                for j in 0..t {
                    for r in 0..n {
                        precision[(i * n + r, j * n + r)] =
                            b1[(i, j)] * ops.lambda1[r] + b2[(i, j)] * ops.lambda2[r];
                    }
                }
            }
        }
        OraclePrior::Chain {
            lambda,
            sigma2,
            sigma1,
        } => {
            for r in 0..n {
                let l = lambda[r];
                let s2 = sigma2[r];
                for i in 0..t {
                    let mut d = if i == 0 { 1.0 / sigma1[r] } else { 1.0 / s2 };
                    if i + 1 < t {
                        d += l * l / s2;
                    }
                    precision[(i * n + r, i * n + r)] = d;
                    if i + 1 < t {
                        precision[(i * n + r, (i + 1) * n + r)] = -l / s2;
                        precision[((i + 1) * n + r, i * n + r)] = -l / s2;
                    }
                }
            }
        }
    }

    // Observation term and linear coefficients.
    let gram = w.transpose() * w / sigma_x2;
    let wt_x = w.transpose() * x / sigma_x2;
    let mut b = DVector::zeros(dim);
    for i in 0..t {
        for r in 0..n {
            for c in 0..n {
                precision[(i * n + r, i * n + c)] += gram[(r, c)];
            }
            b[i * n + r] = wt_x[(r, i)];
        }
    }

    let eig = precision.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(CapaError::Numeric(format!(
            "posterior precision is not positive definite (min eigenvalue {min_eig})"
        )));
    }
    let chol = Cholesky::new(precision)
        .ok_or_else(|| CapaError::Numeric("posterior precision failed to factor".into()))?;
    let mu = chol.solve(&b);
    let covariance = chol.inverse();

    let mut mean = DMatrix::zeros(n, t);
    for i in 0..t {
        for r in 0..n {
            mean[(r, i)] = mu[i * n + r];
        }
    }
    Ok(DenseGaussianPosterior { mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{e_step, MeanFieldState};
    use crate::model::{DataMatrix, ModelKind};
    use crate::priors::{build_prior_operators, lambda_schedule, BOperator, NeighbourhoodSpec};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn swiss_roll_satisfies_parametrization_without_noise() {
        let ds = make_swiss_roll(200, 0.0, 3).unwrap();
        let truth = ds.ground_truth.as_ref().unwrap();
        for i in 0..200 {
            let u = truth[(0, i)];
            let x = ds.data[(0, i)];
            let z = ds.data[(2, i)];
            assert_relative_eq!(x * x + z * z, u * u, epsilon = 1e-9 * u * u);
            assert_relative_eq!(ds.data[(1, i)], truth[(1, i)]);
        }
    }

    #[test]
    fn swiss_roll_radii_in_range_with_noise() {
        let noise = 0.05;
        let ds = make_swiss_roll(1500, noise, 0).unwrap();
        assert_eq!(ds.data.shape(), (3, 1500));
        let lo = 1.5 * std::f64::consts::PI - 3.0 * noise;
        let hi = 4.5 * std::f64::consts::PI + 3.0 * noise;
        for i in 0..1500 {
            let r = (ds.data[(0, i)].powi(2) + ds.data[(2, i)].powi(2)).sqrt();
            assert!(r > lo && r < hi, "radius {r} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = make_swiss_roll(50, 0.1, 9).unwrap();
        let b = make_swiss_roll(50, 0.1, 9).unwrap();
        assert_eq!(a.data, b.data);
        let c = make_gaussian_clusters(3, 10, 4, 2.0, 0.5, 9).unwrap();
        let d = make_gaussian_clusters(3, 10, 4, 2.0, 0.5, 9).unwrap();
        assert_eq!(c.data, d.data);
        assert_eq!(c.labels, d.labels);
        let e = make_slow_signals(2, 100, &[0.9, 0.2], 0.1, 9).unwrap();
        let f = make_slow_signals(2, 100, &[0.9, 0.2], 0.1, 9).unwrap();
        assert_eq!(e.data, f.data);
    }

    #[test]
    fn zero_separation_collapses_cluster_means() {
        let ds = make_gaussian_clusters(3, 200, 4, 0.0, 1.0, 1).unwrap();
        let data = DataMatrix::center(&ds.data)
            .unwrap()
            .with_labels(ds.labels.unwrap())
            .unwrap();
        let fit = crate::ml::ml_fit(&data, ModelKind::Lda, &NeighbourhoodSpec::within_class(), 2)
            .unwrap();
        // S_w ~ S, so the generalized eigenvalues of (S_w, S) sit near 1.
        for ev in fit.eigenvalues.iter() {
            assert!((ev - 1.0).abs() < 0.15, "eigenvalue {ev}");
        }
    }

    #[test]
    fn separated_clusters_classify_without_error() {
        let ds = make_gaussian_clusters(3, 60, 5, 10.0, 1.0, 2).unwrap();
        let data = DataMatrix::center(&ds.data)
            .unwrap()
            .with_labels(ds.labels.clone().unwrap())
            .unwrap();
        let fit = crate::ml::ml_fit(&data, ModelKind::Lda, &NeighbourhoodSpec::within_class(), 2)
            .unwrap();
        let y = &fit.params.w * data.values();
        assert_eq!(nearest_mean_errors(&y, data.labels().unwrap()), 0);
    }

    #[test]
    fn slow_signal_statistics_match_the_ar_model() {
        let lambdas = [0.99, 0.5, 0.0];
        let ds = make_slow_signals(3, 5000, &lambdas, 0.0, 5).unwrap();
        let latents = ds.ground_truth.unwrap();
        for (r, &lam) in lambdas.iter().enumerate() {
            let y = latents.row(r);
            let t = y.len();
            let mean = y.iter().sum::<f64>() / t as f64;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
            // At lambda = 0.99 the effective sample size (~ T(1-l)/(1+l)) is
            // far too small to pin the variance; check it where it can hold.
            if lam < 0.9 {
                assert!((var - 1.0).abs() < 0.05, "dim {r}: variance {var}");
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 1..t {
                num += (y[i] - mean) * (y[i - 1] - mean);
                den += (y[i - 1] - mean) * (y[i - 1] - mean);
            }
            let rho = num / den;
            let tol = if lam > 0.0 { 0.03 } else { 3.0 / (t as f64).sqrt() };
            assert!((rho - lam).abs() < tol, "dim {r}: autocorrelation {rho}");
        }
    }

    #[test]
    fn subspace_angles_basics() {
        let w = nalgebra::dmatrix![1.0, 0.0, 0.5; 0.0, 1.0, -0.25];
        let angles = subspace_angles(&w, &w).unwrap();
        assert!(angles.max() < 1e-12);

        let e1 = nalgebra::dmatrix![1.0, 0.0];
        let e2 = nalgebra::dmatrix![0.0, 1.0];
        let angles = subspace_angles(&e1, &e2).unwrap();
        assert_relative_eq!(angles[0], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn subspace_angles_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = DMatrix::from_fn(3, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        // random 3x3 rotation from QR of a random matrix
        let q = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal))
            .qr()
            .q();
        let rotated = &q * &w;
        let angles = subspace_angles(&w, &rotated).unwrap();
        assert!(angles.max() < 1e-10, "angles {angles:?}");
    }

    #[test]
    fn subspace_angles_rejects_rank_deficient_input() {
        let w = nalgebra::dmatrix![1.0, 0.0; 2.0, 0.0];
        assert!(subspace_angles(&w, &w).is_err());
    }

    #[test]
    fn oracle_factorizes_for_decoupled_priors() {
        // lambda = 0 makes the PCA prior i.i.d.: the oracle must agree with
        // the factorized E-step at m = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = DMatrix::from_fn(3, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma2 = dvector![0.8, 1.3];
        let ops = PriorOperators {
            b1: BOperator::Identity,
            b2: BOperator::NegativeCentering,
            lambda1: sigma2.map(|s| 1.0 / s),
            lambda2: DVector::zeros(2),
            kind: ModelKind::Pca,
            num_samples: 6,
            warnings: vec![],
        };
        let oracle = dense_gaussian_oracle(&OraclePrior::Mrf(&ops), &w, 0.7, &x).unwrap();
        let mf = MeanFieldState::new(DMatrix::zeros(2, 6), sigma2, 0.7).unwrap();
        let fact = e_step(&x, &w, 0.7, &mf).unwrap();
        assert_relative_eq!(oracle.mean, fact.mean, epsilon = 1e-10);
        let moments = oracle.marginal_moments();
        for i in 0..6 {
            assert_relative_eq!(
                &moments.second_moment[i],
                &fact.second_moment[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn oracle_pca_posterior_solves_normal_equations() {
        // N = 1, T = 3 PCA prior: assemble the 3x3 posterior system by hand.
        let x = nalgebra::dmatrix![1.0, -0.5, 0.25];
        let w = nalgebra::dmatrix![1.5];
        let sigma_x2 = 0.5;
        let (lambda, sigma2) = lambda_schedule(1);
        let data = DataMatrix::center_with_mean(&x, &dvector![0.0]).unwrap();
        let ops = build_prior_operators(
            ModelKind::Pca,
            &data,
            &NeighbourhoodSpec::full(),
            &lambda,
            &sigma2,
        )
        .unwrap();
        let oracle = dense_gaussian_oracle(&OraclePrior::Mrf(&ops), &w, sigma_x2, &x).unwrap();

        let l1 = (lambda[0] * lambda[0] + 1.0) / sigma2[0];
        let l2 = 2.0 * lambda[0] / sigma2[0];
        let mut a = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let b1 = if i == j { 1.0 } else { 0.0 };
                let b2 = -1.0 / 3.0;
                a[(i, j)] = b1 * l1 + b2 * l2;
                if i == j {
                    a[(i, j)] += w[(0, 0)] * w[(0, 0)] / sigma_x2;
                }
            }
        }
        let rhs = DVector::from_fn(3, |i, _| w[(0, 0)] * x[(0, i)] / sigma_x2);
        let solved = a.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert_relative_eq!(oracle.mean[(0, i)], solved[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn oracle_prior_precision_positive_definite_for_shipped_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let raw = DMatrix::from_fn(3, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let (lambda, sigma2) = lambda_schedule(2);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));

        let pca = DataMatrix::center(&raw).unwrap();
        let lda = DataMatrix::center(&raw).unwrap().with_labels(labels).unwrap();
        let lpp = DataMatrix::center(&raw).unwrap();
        let cases = [
            (ModelKind::Pca, NeighbourhoodSpec::full(), &pca),
            (ModelKind::Lda, NeighbourhoodSpec::within_class(), &lda),
            (ModelKind::Lpp, NeighbourhoodSpec::knn(3), &lpp),
        ];
        for (kind, spec, data) in cases {
            let ops = build_prior_operators(kind, data, &spec, &lambda, &sigma2).unwrap();
            let out = dense_gaussian_oracle(&OraclePrior::Mrf(&ops), &w, 0.4, data.values());
            assert!(out.is_ok(), "{kind:?}: {:?}", out.err());
        }
    }

    #[test]
    fn oracle_respects_size_cap() {
        let x = DMatrix::zeros(2, 40);
        let w = DMatrix::identity(2, 2);
        let lambda = dvector![0.5, 0.25];
        let sigma2 = dvector![0.75, 0.9375];
        let sigma1 = dvector![1.0, 1.0];
        let err = dense_gaussian_oracle(
            &OraclePrior::Chain {
                lambda: &lambda,
                sigma2: &sigma2,
                sigma1: &sigma1,
            },
            &w,
            1.0,
            &x,
        )
        .unwrap_err();
        assert!(matches!(err, CapaError::Parameter(_)));
    }
}
