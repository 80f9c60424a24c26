//! Small feed-forward networks, their weight-space symmetries, and the
//! layer-wise invariance-abiding posterior.

mod layerwise;
mod mlp;
mod permutation;
mod translation;

pub use layerwise::{latent_activation_sampler, layerwise_fit, layerwise_qmix, FitConfig, FitResult, NodeFit, TraceEntry};
pub use mlp::{forward, log_likelihood, Activation, Dataset, ForwardPass, MlpSpec, WeightVector, MAX_TOY_WEIGHTS};
pub use permutation::{
    apply_permutation, apply_permutation_flat, enumerate_permutations, layer_matrix, permutation_count,
    StackedPermutation, DEFAULT_ENUMERATION_CAP,
};
pub use translation::{build_bz, prior_output_variance, translate_node, TranslationBasisZ};
