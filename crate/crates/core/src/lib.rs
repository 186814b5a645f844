//! Planner and simulator for temporal-spatial GPU multiplexing of
//! DAG-structured multimodal training.

pub mod cluster;
pub mod graph;
pub mod interference;
pub mod perf;
pub mod plan;
pub mod presets;
pub mod profiler;
pub mod quota;
pub mod stage_eval;
pub mod surface;
pub mod solver;
pub mod sim;
pub mod oracle;
pub mod instance;
pub mod io;
pub mod bench;
