//! Discovery of hybrid dynamical systems from sampled input–output data.
//!
//! The pipeline has two stages. [`subsystem_id`] repeatedly peels off the
//! subsystem that explains the most remaining samples, fitting sparse
//! dynamics over a candidate-function [`dictionary`]. [`transition_id`] then
//! learns, for every observed mode pair, a sparse predicate over a second
//! dictionary that decides when the switch fires. Discovered models can be
//! simulated and scored with [`hybrid_sim`], or used for streaming change
//! detection with [`online_monitor`]. [`format`] holds the file formats shared
//! with the command-line front end.

pub mod dictionary;
pub mod error;
pub mod format;
pub mod hybrid_sim;
mod linalg;
pub mod online_monitor;
pub mod pipeline;
pub mod sparse_solver;
pub mod subsystem_id;
pub mod transition_id;

pub use dictionary::{build_design_matrix, normalize_columns, DesignMatrix, DictionarySpec, Library, TimeSeries};
pub use error::{Error, Result};
pub use hybrid_sim::{simulate, HybridModel, SimResult};
pub use sparse_solver::SolverConfig;
pub use subsystem_id::{identify_subsystems, Limits, Segmentation, SubsystemModel};
pub use transition_id::{infer_transitions, TransitionConfig, TransitionRule};
pub use online_monitor::{monitor_step, MonitorConfig, MonitorState, SwitchEvent};
pub use pipeline::{discover, Discovery, RunConfig};
