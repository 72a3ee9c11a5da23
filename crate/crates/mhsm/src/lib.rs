//! Multi-hazard susceptibility mapping toolkit.
//!
//! Reproduces a zone-wise flood/landslide susceptibility workflow on
//! user-supplied or synthetic rasters: inventory augmentation, two-level
//! spatial partitioning, per-zone expert training (boosted trees, a
//! bivariate-Gaussian network, and a soft-gated mixture of the two),
//! tile-parallel map production with IDW merging, bivariate classification,
//! and stratified-heterogeneity analysis of the resulting maps.

// negated comparisons are NaN-rejecting guards; indexed loops mirror the
// numeric formulas they implement
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod featsel;
pub mod geodetector;
pub mod grid;
pub mod metrics;
pub mod moe;
pub mod mosaic;
pub mod mvg;
pub mod nn;
pub mod oracle;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod trees;

pub use error::{Error, Result};
