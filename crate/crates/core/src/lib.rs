//! Single-date image/mask curation for mangrove segmentation datasets.
//!
//! Candidate acquisitions of a region are filtered by cloud and coverage,
//! scored with a background-whitened matched filter (or MVI), ranked by the
//! Fisher discriminant ratio between the mangrove and background classes,
//! and the chosen pairs are stratified and split country-disjointly.

pub mod cli;
pub mod error;
pub mod filter;
pub mod ingest;
pub mod matched_filter;
pub mod pipeline;
pub mod ranking;
pub mod raster;
pub mod signature;
pub mod spectral_index;
pub mod stratify;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{AnnualMask, Category, DetectionMap, Grid, Method, RegionMeta, Scene, Spectrum};
