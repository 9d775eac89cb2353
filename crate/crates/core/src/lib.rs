//! Plant counting with multi-directional selective state-space scans.
//!
//! The pipeline is: patch embedding, four directional state-space branches,
//! adaptive fusion with a convolutional local branch, a redundant local-count
//! head, and a normalizer whose output map sums to the image count.

pub mod backbone;
pub mod count_head;
pub mod data;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scan;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, FeatureSeq};
pub use scan::{apply_order, build_order, restore_grid, Direction, ScanOrder};
