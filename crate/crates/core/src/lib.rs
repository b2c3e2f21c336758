//! A desk-scale laboratory for learning from personalized human feedback.
//!
//! The crate implements the full pipeline on a tiny analytic autoregressive
//! policy, small enough that every quantity can be checked exactly:
//!
//! - [`corpus`] — personalized preference data `(x, y1, y2, u)` and its
//!   line-delimited on-disk format,
//! - [`preference`] — Bradley–Terry mathematics, per-group maximum-likelihood
//!   reward gaps and the majority/minority deviation identities,
//! - [`policy`] — the mean-pool softmax policy with soft-prompt conditioning,
//!   exact log-probabilities, sampling and KL diagnostics,
//! - [`usermodel`] — implicit (uniform / individualized / cluster) and
//!   explicit user embeddings,
//! - [`objectives`] — vanilla RM and DPO plus their personalized variants
//!   (P-DPO, P-IPO, P-RM) with analytic gradients,
//! - [`trainer`] — deterministic seeded training and finite-difference
//!   gradient checking,
//! - [`simlab`] — synthetic annotator simulation and evaluation metrics.

pub mod corpus;
pub mod error;
pub mod num;
pub mod objectives;
pub mod policy;
pub mod preference;
pub mod simlab;
pub mod tensor;
pub mod trainer;
pub mod usermodel;

pub use error::{Error, Result};
