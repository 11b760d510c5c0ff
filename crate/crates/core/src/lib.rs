//! Latent-class IRT models for binary and ordinal items.
//!
//! The latent trait is a discrete random vector with `k` support points in
//! `s` dimensions; items are partitioned between dimensions, and each item's
//! conditional response probabilities follow a parametric IRT form chosen by
//! a link function (global or cumulative logits, local or adjacent-category
//! logits, or no link at all for the classic latent-class model) together
//! with constraints on the discrimination and difficulty parameters.
//!
//! The crate covers the full pipeline: aggregating raw responses into
//! weighted response patterns ([`data`]), describing a model and laying out
//! its parameters ([`design`]), maximum-likelihood estimation by EM with
//! Fisher scoring in the M-step ([`estimation`]), model comparison and
//! model-based item clustering ([`selection`]), and data generation from a
//! fitted or hand-built model ([`simulate`]).

pub mod data;
pub mod design;
pub mod error;
pub mod estimation;
pub mod link;
pub mod selection;
mod serde_util;
pub mod simulate;

pub use data::{aggregate, aggregate_with_cats, infer_categories, RawResponses, ResponseMatrix};
pub use design::{
    build_design_matrix, count_free_params, deterministic_start, random_start, validate_params,
    Difficulties, DiflConstraint, DiscConstraint, ItemParams, ModelSpec, PackedParams,
    ParamLayout, ParameterSet,
};
pub use error::Error;
pub use estimation::{
    conditional_probs, fit, posterior_memberships, FitOptions, FitResult, Start, StartPolicy,
    StartRecord,
};
pub use link::LinkKind;
pub use selection::{
    chi_sq_sf, class_item, compare_nested, information_table, suggest_cut, test_dim,
    ClusterStep, ClusterTrace, InfoRow, LrTestResult,
};
pub use simulate::{simulate, SimulatedData, SimulationPlan};

pub type Result<T> = std::result::Result<T, Error>;
