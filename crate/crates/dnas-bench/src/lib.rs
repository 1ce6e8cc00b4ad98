//! Benchmark harness around the search library: synthetic datasets, an
//! exhaustive tabular oracle, reports and sweeps. The `dnas` binary is a thin
//! CLI over these modules.

pub mod config;
pub mod dataset;
pub mod manifest;
pub mod metrics;
pub mod oracle;
pub mod report;
pub mod sweep;

use dnas_core::space::{CellSpace, OpKind};

/// The desk-scale search space every subcommand operates on: a dense 3-node
/// cell whose 6 edges each pick from skip / dense-relu / zero, for 729
/// architectures total.
pub fn canonical_space() -> CellSpace {
    CellSpace::dense(3, vec![OpKind::Skip, OpKind::DenseRelu, OpKind::Zero])
        .expect("the canonical space is valid")
}
