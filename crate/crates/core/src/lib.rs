//! Per-instance algorithm selection for Euclidean TSP.
//!
//! The crate covers the full pipeline: instance I/O and synthetic generators,
//! MST / k-nearest-neighbor-graph construction, the feature vector derived
//! from those structures, univariate feature ranking, PAR10-based selector
//! evaluation with threshold tuning and cross-validation, instance
//! rasterization, and a from-scratch convolutional network operating on the
//! rasterized images.

pub mod cnn;
pub mod error;
pub mod features;
pub mod graph;
pub mod instance;
pub mod models;
pub mod render;
pub mod scoring;
pub mod selection;
pub mod stats;

pub use error::Error;
pub use features::{FeatureMatrix, FeatureVector};
pub use graph::{ComponentDecomposition, KnnGraph, Mst};
pub use instance::Instance;
pub use render::ImageTensor;
pub use scoring::{PerfDb, PerformanceRecord, SelectorReport, Solver};
pub use selection::FoldAssignment;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
