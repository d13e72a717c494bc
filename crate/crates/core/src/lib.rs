#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Non-negative matrix factorization for single-channel source separation:
//! standard, exemplar, discriminative, adversarial generative (ANMF) and
//! combined (D+ANMF) training, test-time separation with Wiener-type
//! filtering, STFT features, metrics and random-search tuning.

pub mod adversarial;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod separator;
pub mod trainer;
pub mod tuning;

pub use error::{Error, Result};
