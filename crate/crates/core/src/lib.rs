//! Species distribution modeling from presence-only citizen-science sightings.
//!
//! The crate covers the whole pipeline: gridding a study area, aggregating
//! sightings into per-cell counts, imputing pseudo-absences, rebalancing
//! skewed count data, training two-branch late-fusion networks on image
//! patches plus climate covariates, combining modality models with a
//! simplex-weighted ensemble, and ranking covariates with random-forest RFE.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariates;
pub mod geo;
pub mod occurrence;
pub mod raster;
pub mod pseudoabsence;
pub mod balance;
pub mod kmeans;
pub mod ensemble;
pub mod metrics;
pub mod testkit;
pub mod featsel;
pub mod fusion;
