//! Open-set domain generalization under noisy labels, at desk scale.
//!
//! The pipeline runs in this order on each leave-one-domain-out split:
//!
//! 1. [`synth`] draws a multi-domain benchmark and corrupts source labels.
//! 2. [`evidential`] trains a backbone with the Dirichlet-strength loss and
//!    records every sample's loss once per epoch.
//! 3. [`partition`] clusters those loss trajectories per (domain, label) with
//!    first-neighbor clustering, averages each cluster, and splits the cluster
//!    scores into clean and noisy with a two-component Gaussian mixture.
//! 4. [`flow`] fits a conditional flow-matching model to residuals between
//!    clean samples of different domains or categories.
//! 5. [`meta`] trains the open-set classifier: clean batches plus generated
//!    residual augmentations in the inner step, noisy batches with evidential
//!    pseudo-labels in the outer step.
//! 6. [`metrics`] scores the held-out domain with closed-set accuracy,
//!    H-score and OSCR.
//!
//! [`pipeline`] wires the stages together for one (split, seed) cell.

pub mod error;
pub mod evidential;
pub mod flow;
pub mod meta;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod partition;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
