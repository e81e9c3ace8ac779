//! Generative PLDA back-ends for verification tasks.
//!
//! Four model variants over fixed-length vectors — simplified, full, tied
//! mixture and joint (condition-tied) PLDA — with EM training, closed-form
//! smart initialization, likelihood-ratio scoring that marginalizes over
//! nuisance-condition hypotheses, an LDA/length-normalization front end,
//! verification metrics (EER, DET, Cllr), logistic-regression score
//! calibration, and seeded synthetic data generation. A dense brute-force
//! Gaussian oracle backs every likelihood path for testing.

pub mod calibration;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod preprocess;
pub mod standard;
pub mod synth;
pub mod tied;
pub mod joint;

pub use error::{Error, Result};
