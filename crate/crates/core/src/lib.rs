//! Scenario-tree optimization for heavy-tailed loss processes.
//!
//! The crate quantizes (possibly time-varying, conditionally updated) Frechet
//! distributions into W1-optimal scenario trees and solves multi-stage
//! budget-allocation programs on them by backward dynamic programming with
//! shape-constrained value-function fitting. A distributionally robust variant
//! replaces stage expectations with worst-case expectations over a
//! divergence-ball ambiguity set.
//!
//! Module map:
//! - [`distributions`]: Frechet evaluation, sampling, quick median-ratio
//!   updates, the three-point quantile estimator, and quantile-table fits.
//! - [`quantize`]: stage-wise W1-optimal quantization (fixed-point iteration
//!   on cell midpoints), distortion evaluation, and scaling.
//! - [`tree`]: scenario-tree construction combining one stage-1 quantizer
//!   solve with median-ratio interpolation (Group 1) and full re-estimation
//!   (Group 2).
//! - [`distance`]: Kantorovich distances, exact small-instance optimal
//!   transport, the nested distance, and stage-wise upper bounds.
//! - [`dp`]: the backward dynamic-programming engine with convex/concave
//!   monotone value-function fitting.
//! - [`robust`]: divergence-ball worst-case expectations in closed dual form
//!   and robust backward solves.
//! - [`flood`]: the governmental budget-allocation instance (CRRA utility,
//!   capital dynamics, insurance premium) and its reporting passes.

pub mod distance;
pub mod distributions;
pub mod dp;
pub mod flood;
pub mod quantize;
pub mod robust;
pub mod tree;

mod util;
