//! Mean-field and invariance-abiding variational posteriors.
//!
//! The crate builds both posteriors from a prior and a Gaussian likelihood
//! approximation, measures the invariance gap between them, and provides
//! closed forms for a translation-invariant linear regression alongside
//! the weight-space symmetries of small feed-forward networks. Every
//! closed form has a Monte-Carlo or dense counterpart in [`mc`] and
//! [`verification`].

pub mod bnn;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod invariance;
pub mod linear;
pub mod mc;
pub mod verification;

pub use error::{Error, Result};
pub use gaussian::{GaussianMixture, MomentGaussian, NaturalGaussian, SymMatrix};
pub use invariance::{ConditionReport, ConstructedPosteriorPair, GapEstimate, GapMethod, Qmix};
pub use linear::{ElboReport, LikelihoodParams, TranslationLinearModel, Which};
pub use mc::McEstimate;
pub use verification::{Suite, VerifyOptions, VerifyReport};
