//! Evaluation protocols: latent probes, oracle coherence, likelihood
//! tables, CCA scoring and per-dimension latent diagnostics.

pub mod cca;
pub mod coherence;
pub mod diagnostics;
pub mod oracle;
pub mod probe;
pub mod report;

pub use cca::{fit_cca, CcaProjection, CcaScore};
pub use coherence::{coherence_cross, coherence_joint, CoherenceResult};
pub use diagnostics::{kl_csv, kl_diagnostics, posterior_entropy, DimClass, DimDiagnostic, KlThresholds};
pub use oracle::{OracleClassifier, OracleConfig, ORACLE_GATE};
pub use probe::{accuracy, argmax_rows, probe_accuracy, LinearProbe};
pub use report::{evaluate_model, latent_means, latent_probe, likelihood_table, strided, EvalConfig, EvalReport};
