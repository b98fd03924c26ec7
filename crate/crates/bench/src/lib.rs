//! Shared fixtures for the benchmarks.

use vqsense::harness::PointModel;
use vqsense::Task;

/// Rank-1 channel at the standard operating point (`M = 21`, `σ_c = 0.02`)
/// with the CCA reference at 45°.
pub fn standard_model(task: Task, mode_count: usize) -> PointModel {
    PointModel::rank1(task, mode_count, 0.02, 45.0).expect("valid benchmark point")
}
