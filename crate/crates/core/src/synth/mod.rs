//! Synthetic data: covariances, designs, true weights and labels, plus CSV ingestion.

pub mod covariance;
pub mod design;
pub mod ingest;

pub use covariance::{
    estimate_covariance, make_covariance, matrix_sqrt_and_invsqrt, CovarianceFactors, CovarianceKind, CovarianceSpec,
};
pub use design::{
    bernoulli_labels, generate_labels, sample_design, sample_projections, sample_true_weight, Dataset,
    EntryDistribution, Provenance,
};
pub use ingest::{load_design_csv, write_design_csv};
