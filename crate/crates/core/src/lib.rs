//! Refined response distillation for class-incremental detection.
//!
//! The pipeline turns a frozen teacher detector's raw responses into
//! refined distillation regions and losses:
//!
//! 1. [`response`] — per-node quality maps for the classification and
//!    regression heads of a detector response.
//! 2. [`region`] — coarse-to-fine region division: quality thresholding,
//!    a two-component 1-D Gaussian mixture fitted by EM, and NMS over
//!    decoded boxes.
//! 3. [`distill`] — decoupled classification distillation, L1 background
//!    distillation, temperature-scaled localization distillation, and
//!    analytic gradients for all of them.
//! 4. [`sim`] — a desk-scale incremental-learning harness that trains a
//!    toy detector on synthetic scenes and reproduces catastrophic
//!    forgetting together with its mitigation.
//! 5. [`scenario`] — COCO-style annotation splitting into incremental
//!    training steps.
//!
//! All arithmetic is `f64`; every operation is deterministic given its
//! inputs (and a seed where randomness is involved).
//!
//! ```
//! use r2d_core::{response, region, distill};
//!
//! let grid = response::NodeGrid::single(8, 8, 8.0);
//! let teacher = response::random_bundle(grid.clone(), 6, 8, 0.5, 2.0, 1);
//! let student = response::random_bundle(grid, 6, 8, 0.5, 2.0, 2);
//!
//! let cfg = region::RegionConfig::default();
//! let regions = region::refine_regions(&teacher, &cfg)?;
//! assert_eq!(
//!     regions.cls.high.len() + regions.cls.low.len(),
//!     regions.cls.candidates.len(),
//! );
//!
//! let weights = distill::LossWeights::default();
//! let report = distill::total_distill_loss(&teacher, &student, &cfg, &weights)?;
//! assert!(report.l_distill_total >= 0.0);
//! # Ok::<(), r2d_core::Error>(())
//! ```

pub mod distill;
pub mod error;
pub mod numeric;
pub mod region;
pub mod response;
pub mod scenario;
pub mod sim;

pub use distill::{
    total_distill_loss, DistillGradients, DistillLossReport, DistillMode, LossWeights,
};
pub use error::{Error, Result};
pub use numeric::{LogitVector, ProbVector};
pub use region::{GmmModel, NmsSelection, RegionConfig, RegionPartition, RefinedRegions};
pub use response::{
    ClassificationResponse, DecodedBox, Head, NodeGrid, QualityScores, RegressionResponse,
    ResponseBundle, Role,
};
pub use scenario::{ScenarioSpec, SplitManifest};
pub use sim::{Protocol, ProtocolConfig, SimMetrics, SyntheticWorld, ToyDetector};
