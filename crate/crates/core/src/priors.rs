//! Latent-neighbourhood priors.
//!
//! Every model in the family is an MRF prior of the form
//! `P(Y) ∝ exp{-1/2 (tr[Λ1 Y B1 Y^T] + tr[Λ2 Y B2 Y^T])}`; the choice of the
//! T×T pair `(B1, B2)` and the diagonal N×N pair `(Λ1, Λ2)` is all that
//! distinguishes PCA, LDA, LPP and SFA. The `B` operators are kept in
//! structured form so that the scatter products `X B X^T` never materialize a
//! dense T×T matrix unless the graph itself is dense (LPP).

use nalgebra::{DMatrix, DVector};

use crate::error::{CapaError, Result};
use crate::model::{DataMatrix, ModelKind};

/// Heat-kernel bandwidth: fixed, or the median pairwise squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeatKernelGamma {
    Fixed(f64),
    Auto,
}

/// Edge weights of the k-NN graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KnnWeights {
    Constant,
    HeatKernel(HeatKernelGamma),
}

/// How directed k-NN selections become an undirected graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetrize {
    /// Edge if either endpoint selects the other (default).
    Union,
    /// Edge only if both endpoints select each other; may isolate samples.
    Mutual,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NeighbourhoodKind {
    /// Every latent node coupled to every other (PCA).
    Full,
    /// Coupling restricted to same-class nodes; labels come from the data (LDA).
    WithinClass,
    /// k-nearest-neighbour graph in observation space (LPP).
    Knn { k: usize, weights: KnnWeights },
    /// First-order temporal chain (SFA).
    TemporalChain,
}

/// Neighbourhood system defining the latent prior.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourhoodSpec {
    pub kind: NeighbourhoodKind,
    pub symmetrize: Symmetrize,
}

impl NeighbourhoodSpec {
    pub fn full() -> Self {
        NeighbourhoodSpec {
            kind: NeighbourhoodKind::Full,
            symmetrize: Symmetrize::Union,
        }
    }

    pub fn within_class() -> Self {
        NeighbourhoodSpec {
            kind: NeighbourhoodKind::WithinClass,
            symmetrize: Symmetrize::Union,
        }
    }

    pub fn knn(k: usize) -> Self {
        NeighbourhoodSpec {
            kind: NeighbourhoodKind::Knn {
                k,
                weights: KnnWeights::Constant,
            },
            symmetrize: Symmetrize::Union,
        }
    }

    pub fn knn_with(k: usize, weights: KnnWeights, symmetrize: Symmetrize) -> Self {
        NeighbourhoodSpec {
            kind: NeighbourhoodKind::Knn { k, weights },
            symmetrize,
        }
    }

    pub fn temporal_chain() -> Self {
        NeighbourhoodSpec {
            kind: NeighbourhoodKind::TemporalChain,
            symmetrize: Symmetrize::Union,
        }
    }

    /// The model kind this neighbourhood instantiates.
    pub fn model_kind(&self) -> ModelKind {
        match self.kind {
            NeighbourhoodKind::Full => ModelKind::Pca,
            NeighbourhoodKind::WithinClass => ModelKind::Lda,
            NeighbourhoodKind::Knn { .. } => ModelKind::Lpp,
            NeighbourhoodKind::TemporalChain => ModelKind::Sfa,
        }
    }
}

/// One of the T×T operators appearing in the prior, stored structurally.
#[derive(Debug, Clone)]
pub enum BOperator {
    /// I
    Identity,
    /// M = -(1/T) 1 1^T
    NegativeCentering,
    /// M_t = I - M = I + (1/T) 1 1^T
    CenteredGram,
    /// M_c = I - blockdiag(1/|C_c| 1 1^T); `classes[c]` lists the samples of class c.
    WithinClass { classes: Vec<Vec<usize>> },
    /// K = P P^T, the tridiagonal second-difference operator of the chain.
    SecondDifference,
    /// Dense symmetric matrix (the graph Laplacian L).
    Dense(DMatrix<f64>),
    /// Diagonal matrix (the degree matrix D).
    Diagonal(DVector<f64>),
}

impl BOperator {
    /// Materializes the operator as a dense T×T matrix.
    pub fn to_dense(&self, t: usize) -> DMatrix<f64> {
        match self {
            BOperator::Identity => DMatrix::identity(t, t),
            BOperator::NegativeCentering => DMatrix::from_element(t, t, -1.0 / t as f64),
            BOperator::CenteredGram => {
                let mut m = DMatrix::from_element(t, t, 1.0 / t as f64);
                for i in 0..t {
                    m[(i, i)] += 1.0;
                }
                m
            }
            BOperator::WithinClass { classes } => {
                let mut m = DMatrix::identity(t, t);
                for members in classes {
                    let w = 1.0 / members.len() as f64;
                    for &i in members {
                        for &j in members {
                            m[(i, j)] -= w;
                        }
                    }
                }
                m
            }
            BOperator::SecondDifference => {
                let mut m = DMatrix::zeros(t, t);
                for i in 0..t {
                    let mut d = 0.0;
                    if i > 0 {
                        d += 1.0;
                        m[(i, i - 1)] = -1.0;
                    }
                    if i + 1 < t {
                        d += 1.0;
                        m[(i, i + 1)] = -1.0;
                    }
                    m[(i, i)] = d;
                }
                m
            }
            BOperator::Dense(m) => m.clone(),
            BOperator::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    /// Computes `X B X^T` without materializing `B` when a structured form
    /// exists.
    pub fn xbxt(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let t = x.ncols();
        match self {
            BOperator::Identity => x * x.transpose(),
            BOperator::NegativeCentering => {
                let s = x.column_sum();
                -(1.0 / t as f64) * &s * s.transpose()
            }
            BOperator::CenteredGram => {
                let s = x.column_sum();
                x * x.transpose() + (1.0 / t as f64) * &s * s.transpose()
            }
            BOperator::WithinClass { classes } => {
                let mut a = x * x.transpose();
                for members in classes {
                    let mut s = DVector::zeros(x.nrows());
                    for &i in members {
                        s += x.column(i);
                    }
                    a -= (1.0 / members.len() as f64) * &s * s.transpose();
                }
                a
            }
            BOperator::SecondDifference => {
                if t < 2 {
                    return DMatrix::zeros(x.nrows(), x.nrows());
                }
                let mut xd = DMatrix::zeros(x.nrows(), t - 1);
                for j in 0..t - 1 {
                    let d = x.column(j + 1) - x.column(j);
                    xd.set_column(j, &d);
                }
                &xd * xd.transpose()
            }
            BOperator::Dense(b) => x * b * x.transpose(),
            BOperator::Diagonal(d) => {
                let mut xs = x.clone();
                for (j, mut col) in xs.column_iter_mut().enumerate() {
                    col *= d[j];
                }
                &xs * x.transpose()
            }
        }
    }
}

/// The operator pairs `(B1, B2)` and `(Λ1, Λ2)` (diagonals only) defining one
/// prior, plus any construction warnings.
#[derive(Debug, Clone)]
pub struct PriorOperators {
    pub b1: BOperator,
    pub b2: BOperator,
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    pub kind: ModelKind,
    pub num_samples: usize,
    pub warnings: Vec<String>,
}

/// A k-NN graph: weighted adjacency, degrees and Laplacian `L = D - W`.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub adjacency: DMatrix<f64>,
    pub degrees: DVector<f64>,
    pub laplacian: DMatrix<f64>,
    /// Symmetrized neighbour lists, ascending sample index.
    pub neighbours: Vec<Vec<usize>>,
}

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.ncols();
    let mut d2 = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in (i + 1)..t {
            let d = (x.column(i) - x.column(j)).norm_squared();
            d2[(i, j)] = d;
            d2[(j, i)] = d;
        }
    }
    d2
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn resolve_gamma(d2: &DMatrix<f64>, gamma: HeatKernelGamma) -> Result<f64> {
    let g = match gamma {
        HeatKernelGamma::Fixed(g) => g,
        HeatKernelGamma::Auto => {
            let t = d2.nrows();
            let mut pair_d2 = Vec::with_capacity(t * (t - 1) / 2);
            for i in 0..t {
                for j in (i + 1)..t {
                    pair_d2.push(d2[(i, j)]);
                }
            }
            median(pair_d2)
        }
    };
    if g <= 0.0 || !g.is_finite() {
        return Err(CapaError::Parameter(format!(
            "heat-kernel gamma must be positive, got {g}"
        )));
    }
    Ok(g)
}

/// Full T×T heat-kernel weight matrix `w_ij = exp(-||x_i - x_j||^2 / gamma)`.
///
/// With `Auto`, gamma is the median of all pairwise squared distances.
pub fn heat_kernel_weights(data: &DataMatrix, gamma: HeatKernelGamma) -> Result<DMatrix<f64>> {
    let t = data.num_samples();
    if t < 2 {
        return Err(CapaError::Dimension("need at least 2 samples".into()));
    }
    let d2 = squared_distances(data.values());
    let g = resolve_gamma(&d2, gamma)?;
    Ok(d2.map(|d| (-d / g).exp()))
}

/// Builds the k-NN graph of the samples and its Laplacian.
///
/// Nearest neighbours are chosen by Euclidean distance with ties resolved by
/// ascending sample index.
pub fn knn_graph(
    data: &DataMatrix,
    k: usize,
    weights: KnnWeights,
    symmetrize: Symmetrize,
) -> Result<KnnGraph> {
    let t = data.num_samples();
    if k == 0 || k >= t {
        return Err(CapaError::Parameter(format!(
            "k must satisfy 1 <= k < T, got k = {k}, T = {t}"
        )));
    }
    let d2 = squared_distances(data.values());
    let gamma = match weights {
        KnnWeights::HeatKernel(g) => Some(resolve_gamma(&d2, g)?),
        KnnWeights::Constant => None,
    };

    // Directed selection: the k nearest other samples of each node.
    let mut selects = vec![vec![false; t]; t];
    for i in 0..t {
        let mut order: Vec<usize> = (0..t).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            d2[(i, a)]
                .partial_cmp(&d2[(i, b)])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            selects[i][j] = true;
        }
    }

    let mut adjacency = DMatrix::zeros(t, t);
    let mut neighbours = vec![Vec::new(); t];
    for i in 0..t {
        for j in (i + 1)..t {
            let edge = match symmetrize {
                Symmetrize::Union => selects[i][j] || selects[j][i],
                Symmetrize::Mutual => selects[i][j] && selects[j][i],
            };
            if edge {
                let w = match gamma {
                    Some(g) => (-d2[(i, j)] / g).exp(),
                    None => 1.0,
                };
                adjacency[(i, j)] = w;
                adjacency[(j, i)] = w;
                neighbours[i].push(j);
                neighbours[j].push(i);
            }
        }
    }
    for list in &mut neighbours {
        list.sort_unstable();
    }

    let degrees = DVector::from_fn(t, |i, _| adjacency.row(i).iter().sum::<f64>());
    let mut laplacian = -adjacency.clone();
    for i in 0..t {
        laplacian[(i, i)] = degrees[i];
    }
    Ok(KnnGraph {
        adjacency,
        degrees,
        laplacian,
        neighbours,
    })
}

/// The default coupling schedule: `lambda_n = 1 - n/(N+1)` for n = 1..N and
/// `sigma_n^2 = 1 - lambda_n^2`.
///
/// Strictly decreasing with equal gaps, all inside (0, 1); the ML directions
/// do not depend on the exact values as long as they are distinct.
pub fn lambda_schedule(n: usize) -> (DVector<f64>, DVector<f64>) {
    let lambda = DVector::from_fn(n, |i, _| 1.0 - (i + 1) as f64 / (n + 1) as f64);
    let sigma2 = lambda.map(|l| 1.0 - l * l);
    (lambda, sigma2)
}

fn validate_lambda_sigma(lambda: &DVector<f64>, sigma2: &DVector<f64>) -> Result<()> {
    if lambda.len() != sigma2.len() {
        return Err(CapaError::Dimension(format!(
            "lambda has length {}, sigma2 has length {}",
            lambda.len(),
            sigma2.len()
        )));
    }
    for i in 0..lambda.len() {
        if !(0.0 < lambda[i] && lambda[i] < 1.0) {
            return Err(CapaError::Parameter(format!(
                "lambda[{i}] = {} is outside (0, 1)",
                lambda[i]
            )));
        }
        if i > 0 && lambda[i] >= lambda[i - 1] {
            return Err(CapaError::Parameter(
                "lambda must be strictly decreasing".into(),
            ));
        }
        if sigma2[i] <= 0.0 {
            return Err(CapaError::Parameter(format!(
                "sigma2[{i}] = {} is not positive",
                sigma2[i]
            )));
        }
    }
    Ok(())
}

/// Groups sample indices by class label.
pub(crate) fn class_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut classes = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        classes[c].push(i);
    }
    classes
}

/// Instantiates the operator pairs of the prior selected by `kind`.
///
/// `spec` must match the kind (Full for PCA, WithinClass for LDA, Knn for
/// LPP, TemporalChain for SFA).
pub fn build_prior_operators(
    kind: ModelKind,
    data: &DataMatrix,
    spec: &NeighbourhoodSpec,
    lambda: &DVector<f64>,
    sigma2: &DVector<f64>,
) -> Result<PriorOperators> {
    validate_lambda_sigma(lambda, sigma2)?;
    if spec.model_kind() != kind {
        return Err(CapaError::Config(format!(
            "neighbourhood {:?} does not match model kind {:?}",
            spec.kind, kind
        )));
    }
    let t = data.num_samples();
    let mut warnings = Vec::new();

    let (b1, b2) = match (&spec.kind, kind) {
        (NeighbourhoodKind::Full, ModelKind::Pca) => {
            (BOperator::Identity, BOperator::NegativeCentering)
        }
        (NeighbourhoodKind::WithinClass, ModelKind::Lda) => {
            let labels = data.labels().ok_or_else(|| {
                CapaError::Config("within-class neighbourhood requires labels".into())
            })?;
            let classes = class_members(labels);
            for (c, members) in classes.iter().enumerate() {
                if members.len() == 1 {
                    warnings.push(format!(
                        "class {c} has a single sample; its within-class term is empty"
                    ));
                }
            }
            (
                BOperator::WithinClass { classes },
                BOperator::CenteredGram,
            )
        }
        (NeighbourhoodKind::Knn { k, weights }, ModelKind::Lpp) => {
            let graph = knn_graph(data, *k, *weights, spec.symmetrize)?;
            if let Some(i) = graph.neighbours.iter().position(|n| n.is_empty()) {
                return Err(CapaError::Config(format!(
                    "sample {i} is isolated under Mutual symmetrization; \
                     the LPP prior needs every degree positive"
                )));
            }
            (
                BOperator::Dense(graph.laplacian),
                BOperator::Diagonal(graph.degrees),
            )
        }
        (NeighbourhoodKind::TemporalChain, ModelKind::Sfa) => {
            if !data.is_sequence() {
                return Err(CapaError::Config(
                    "temporal-chain prior requires sequence data".into(),
                ));
            }
            (BOperator::SecondDifference, BOperator::Identity)
        }
        _ => unreachable!("model_kind() already matched spec to kind"),
    };

    // Diagonal coefficient pairs of the prior's trace form.
    let (lambda1, lambda2) = match kind {
        ModelKind::Pca => (
            DVector::from_fn(lambda.len(), |i, _| (lambda[i] * lambda[i] + 1.0) / sigma2[i]),
            DVector::from_fn(lambda.len(), |i, _| 2.0 * lambda[i] / sigma2[i]),
        ),
        // LDA, LPP and SFA share the same diagonal forms.
        _ => (
            DVector::from_fn(lambda.len(), |i, _| lambda[i] / sigma2[i]),
            DVector::from_fn(lambda.len(), |i, _| {
                let om = 1.0 - lambda[i];
                om * om / sigma2[i]
            }),
        ),
    };

    Ok(PriorOperators {
        b1,
        b2,
        lambda1,
        lambda2,
        kind,
        num_samples: t,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_data(f: usize, t: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(f, t, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        DataMatrix::center(&raw).unwrap()
    }

    #[test]
    fn heat_kernel_is_one_at_zero_distance_and_e_inv_at_gamma() {
        let raw = dmatrix![0.0, 0.0, 1.0; 0.0, 0.0, 0.0];
        let data = DataMatrix::center_with_mean(
            &raw,
            &nalgebra::DVector::zeros(2),
        )
        .unwrap();
        let w = heat_kernel_weights(&data, HeatKernelGamma::Fixed(1.0)).unwrap();
        assert_relative_eq!(w[(0, 1)], 1.0);
        assert_relative_eq!(w[(0, 2)], (-1.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(w[(0, 2)], 0.367879441, epsilon = 1e-9);
        for i in 0..3 {
            assert_eq!(w[(i, i)], 1.0);
        }
    }

    #[test]
    fn heat_kernel_matches_naive_double_loop() {
        let data = random_data(3, 10, 42);
        let gamma = 2.5;
        let w = heat_kernel_weights(&data, HeatKernelGamma::Fixed(gamma)).unwrap();
        let x = data.values();
        for i in 0..10 {
            for j in 0..10 {
                let mut d2 = 0.0;
                for r in 0..3 {
                    let d = x[(r, i)] - x[(r, j)];
                    d2 += d * d;
                }
                assert_relative_eq!(w[(i, j)], (-d2 / gamma).exp(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn heat_kernel_rejects_nonpositive_gamma() {
        let data = random_data(2, 5, 0);
        assert!(heat_kernel_weights(&data, HeatKernelGamma::Fixed(0.0)).is_err());
        assert!(heat_kernel_weights(&data, HeatKernelGamma::Fixed(-1.0)).is_err());
    }

    #[test]
    fn knn_path_graph_has_expected_laplacian() {
        // Points on a line: 1 -- 2 -- 3. k = 1 with Union symmetrization gives
        // the path graph: ends select the middle, the middle selects one end.
        let raw = dmatrix![0.0, 1.0, 2.0];
        let data = DataMatrix::center(&raw).unwrap();
        let g = knn_graph(&data, 1, KnnWeights::Constant, Symmetrize::Union).unwrap();
        assert_eq!(g.degrees, nalgebra::dvector![1.0, 2.0, 1.0]);
        let expected = dmatrix![1.0, -1.0, 0.0; -1.0, 2.0, -1.0; 0.0, -1.0, 1.0];
        assert_eq!(g.laplacian, expected);
    }

    #[test]
    fn knn_laplacian_rows_sum_to_zero_and_psd() {
        let data = random_data(2, 20, 3);
        let g = knn_graph(&data, 3, KnnWeights::Constant, Symmetrize::Union).unwrap();
        for i in 0..20 {
            let s: f64 = g.laplacian.row(i).iter().sum();
            assert!(s.abs() < 1e-12, "row {i} sums to {s}");
        }
        let eig = g.laplacian.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let data = random_data(2, 5, 1);
        assert!(knn_graph(&data, 0, KnnWeights::Constant, Symmetrize::Union).is_err());
        assert!(knn_graph(&data, 5, KnnWeights::Constant, Symmetrize::Union).is_err());
    }

    #[test]
    fn lambda_schedule_matches_formula() {
        let (l1, s1) = lambda_schedule(1);
        assert_eq!(l1.as_slice(), &[0.5]);
        assert_eq!(s1.as_slice(), &[0.75]);
        let (l3, s3) = lambda_schedule(3);
        assert_eq!(l3.as_slice(), &[0.75, 0.5, 0.25]);
        assert_eq!(s3.as_slice(), &[0.4375, 0.75, 0.9375]);
        // equal gaps of 1/(N+1)
        let (l7, _) = lambda_schedule(7);
        for i in 1..7 {
            assert_relative_eq!(l7[i - 1] - l7[i], 1.0 / 8.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn pca_operators_match_definitions() {
        let data = random_data(2, 3, 9);
        let (lambda, sigma2) = lambda_schedule(2);
        let ops = build_prior_operators(
            ModelKind::Pca,
            &data,
            &NeighbourhoodSpec::full(),
            &lambda,
            &sigma2,
        )
        .unwrap();
        assert_eq!(ops.b1.to_dense(3), DMatrix::identity(3, 3));
        assert_eq!(
            ops.b2.to_dense(3),
            DMatrix::from_element(3, 3, -1.0 / 3.0)
        );
        for i in 0..2 {
            assert_relative_eq!(
                ops.lambda1[i],
                (lambda[i] * lambda[i] + 1.0) / sigma2[i]
            );
            assert_relative_eq!(ops.lambda2[i], 2.0 * lambda[i] / sigma2[i]);
        }
    }

    #[test]
    fn sfa_operators_match_second_difference() {
        let data = random_data(2, 3, 10).into_sequence();
        let (lambda, sigma2) = lambda_schedule(2);
        let ops = build_prior_operators(
            ModelKind::Sfa,
            &data,
            &NeighbourhoodSpec::temporal_chain(),
            &lambda,
            &sigma2,
        )
        .unwrap();
        let expected = dmatrix![1.0, -1.0, 0.0; -1.0, 2.0, -1.0; 0.0, -1.0, 1.0];
        assert_eq!(ops.b1.to_dense(3), expected);
        assert_eq!(ops.b2.to_dense(3), DMatrix::identity(3, 3));
    }

    #[test]
    fn lda_operators_match_block_structure() {
        let raw = dmatrix![0.0, 1.0, 4.0, 5.0];
        let data = DataMatrix::center(&raw)
            .unwrap()
            .with_labels(vec![0, 0, 1, 1])
            .unwrap();
        let (lambda, sigma2) = lambda_schedule(1);
        let ops = build_prior_operators(
            ModelKind::Lda,
            &data,
            &NeighbourhoodSpec::within_class(),
            &lambda,
            &sigma2,
        )
        .unwrap();
        let mut expected_b1 = DMatrix::identity(4, 4);
        for block in [[0usize, 1], [2, 3]] {
            for &i in &block {
                for &j in &block {
                    expected_b1[(i, j)] -= 0.5;
                }
            }
        }
        assert_eq!(ops.b1.to_dense(4), expected_b1);
        let expected_b2 = DMatrix::identity(4, 4) + DMatrix::from_element(4, 4, 0.25);
        assert_eq!(ops.b2.to_dense(4), expected_b2);
    }

    #[test]
    fn mismatched_spec_and_kind_is_config_error() {
        let data = random_data(2, 4, 11);
        let (lambda, sigma2) = lambda_schedule(1);
        let err = build_prior_operators(
            ModelKind::Pca,
            &data,
            &NeighbourhoodSpec::temporal_chain(),
            &lambda,
            &sigma2,
        )
        .unwrap_err();
        assert!(matches!(err, CapaError::Config(_)));
    }

    #[test]
    fn single_member_class_yields_warning_not_error() {
        let raw = dmatrix![0.0, 1.0, 4.0];
        let data = DataMatrix::center(&raw)
            .unwrap()
            .with_labels(vec![0, 0, 1])
            .unwrap();
        let (lambda, sigma2) = lambda_schedule(1);
        let ops = build_prior_operators(
            ModelKind::Lda,
            &data,
            &NeighbourhoodSpec::within_class(),
            &lambda,
            &sigma2,
        )
        .unwrap();
        assert_eq!(ops.warnings.len(), 1);
        assert!(ops.warnings[0].contains("class 1"));
    }

    #[test]
    fn structured_products_match_dense_forms() {
        let data = random_data(3, 12, 5).with_labels(vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
        let data = data.unwrap();
        let x = data.values();
        let t = 12;
        for op in [
            BOperator::Identity,
            BOperator::NegativeCentering,
            BOperator::CenteredGram,
            BOperator::WithinClass {
                classes: class_members(data.labels().unwrap()),
            },
            BOperator::SecondDifference,
        ] {
            let dense = x * op.to_dense(t) * x.transpose();
            let fast = op.xbxt(x);
            assert_relative_eq!(dense, fast, epsilon = 1e-10);
        }
    }

    #[test]
    fn centering_operator_annihilates_zero_mean_data() {
        // X M X^T = 0 and X M_t X^T = X X^T for centered X.
        let data = random_data(4, 30, 8);
        let x = data.values();
        let scale = x.norm_squared();
        let m_prod = BOperator::NegativeCentering.xbxt(x);
        assert!(m_prod.amax() < 1e-8 * scale);
        let mt_prod = BOperator::CenteredGram.xbxt(x);
        let gram = x * x.transpose();
        assert!((mt_prod - gram).amax() < 1e-8 * scale);
    }

    #[test]
    fn within_class_product_equals_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labels: Vec<usize> = (0..24).map(|_| rng.random_range(0..3usize)).collect();
        let raw = DMatrix::from_fn(4, 24, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let data = DataMatrix::center(&raw).unwrap().with_labels(labels).unwrap();
        let x = data.values();
        let classes = class_members(data.labels().unwrap());

        // Direct per-class within scatter: sum_c sum_{i in c} (x_i - mu_c)(x_i - mu_c)^T
        let mut sw = DMatrix::zeros(4, 4);
        for members in &classes {
            let mut mu = DVector::zeros(4);
            for &i in members {
                mu += x.column(i);
            }
            mu /= members.len() as f64;
            for &i in members {
                let d = x.column(i) - &mu;
                sw += &d * d.transpose();
            }
        }
        let fast = BOperator::WithinClass { classes }.xbxt(x);
        assert_relative_eq!(fast, sw, epsilon = 1e-8 * sw.norm());
    }

    #[test]
    fn second_difference_product_equals_first_difference_oracle() {
        let data = random_data(3, 15, 13);
        let x = data.values();
        let mut diff_sum = DMatrix::zeros(3, 3);
        for j in 1..15 {
            let d = x.column(j) - x.column(j - 1);
            diff_sum += &d * d.transpose();
        }
        let fast = BOperator::SecondDifference.xbxt(x);
        assert_relative_eq!(fast, diff_sum, epsilon = 1e-10);
    }
}
