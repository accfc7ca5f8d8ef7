//! Probabilistic component analysis.
//!
//! One linear-Gaussian generative model `x = W y + e` whose latent prior is a
//! Gaussian MRF over a configurable latent neighbourhood. Choosing the
//! neighbourhood selects the model: full connectivity gives PCA, within-class
//! connectivity gives LDA, a k-NN graph gives LPP and a temporal chain gives
//! SFA. Each model can be solved in closed form (maximum likelihood via
//! simultaneous diagonalization of a scatter pair) or iteratively (mean-field
//! EM for the undirected priors, exact linear-dynamical-system EM for the
//! chain prior).
//!
//! Entry points:
//! * [`ml::ml_fit`] — closed-form fit for any [`ModelKind`].
//! * [`em::em_fit`] — mean-field EM for PCA / LDA / LPP.
//! * [`sfa::sfa_em_fit`] — exact smoothing EM for SFA.
//! * [`synth`] — synthetic data generators, dense-Gaussian oracles and
//!   subspace metrics used for verification.

pub mod em;
pub mod error;
pub mod ml;
pub mod model;
pub mod priors;
pub mod sfa;
pub mod synth;

mod threads;

pub use error::{CapaError, Result};
pub use model::{DataMatrix, LatentMoments, ModelKind, ModelParams, SolverKind};
pub use priors::{
    build_prior_operators, heat_kernel_weights, knn_graph, lambda_schedule, BOperator,
    HeatKernelGamma, KnnWeights, NeighbourhoodKind, NeighbourhoodSpec, PriorOperators, Symmetrize,
};
