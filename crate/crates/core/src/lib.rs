//! Low-rank CP tensor completion for data that is only weakly dependent
//! along one mode, with optional graph (Laplacian) smoothing of that mode.
//!
//! The [`solver`] module holds the block coordinate descent engine; the rest
//! of the crate supplies tensors, graphs, synthetic scenarios, scoring and the
//! text file formats shared with the command-line tool.

pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod solver;
pub mod synth;
pub mod tensor;

/// Re-exported so callers build matrices with the same version.
pub use nalgebra;

pub use error::{Result, WdgError};
pub use graph::{khop_binary, laplacian, poi_similarity, Adjacency, GraphPenalty};
pub use metrics::{grid_search, score, GridSearchOutcome, MetricReport, ParamGrid, SearchStrategy};
pub use solver::{solve, CompletionResult, SolverConfig, Termination};
pub use synth::{apply_missing, generate_wdg, MissingPattern, WdgScenario};
pub use tensor::{cp_reconstruct, tensor_from_entries, CpModel, DenseTensor, ObservationMask};
