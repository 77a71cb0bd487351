//! Controller workload prediction from dynamically evolving airspace graphs.
//!
//! The pipeline: simulate terminal-area arrival traffic, build per-timestamp
//! proximity graphs, train evolving-weight graph classifiers on moving windows
//! of graphs, post-process class probabilities into conformal prediction sets,
//! and evaluate with F1/coverage metrics. A recurrence analysis of
//! communication transcripts is included for scenario-level diagnostics.

pub mod numkit;

pub mod airspace;
pub mod baselines;
pub mod cli;
pub mod commrqa;
pub mod conformal;
pub mod dataset;
pub mod egcn;
pub mod evalkit;
pub mod simgen;
