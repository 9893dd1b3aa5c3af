//! Estimating territorial control of armed groups from counts of terrorist
//! and conventional-war events on a spatial grid.
//!
//! Each grid cell carries a hidden control state per year. Counts of the two
//! event kinds are Poisson given the state. States evolve over years through a
//! Markov chain and, in the coupled model, neighbouring cells in the same year
//! are tied together by a Potts interaction.

pub mod covariates;
pub mod error;
pub mod eval;
pub mod grid;
pub mod hmm;
pub mod hmrf;
pub mod ingest;
pub mod rng;
pub mod sim;

pub use covariates::{build_cell_transitions, perturb_transition, CovariateTable, PerturbationSpec, ResponseShape};
pub use error::{Error, Result};
pub use eval::{align_labels, score, EvalReport, SweepResult, SweepRow};
pub use grid::{CellId, Grid, GridSpec, NeighborGraph, Neighborhood, Shape};
pub use hmm::{
    baum_welch_fit, forward_backward, viterbi, FitInit, FitOptions, FitResult, HmmParams, Matrix, ObservationSequence,
    PosteriorMarginals,
};
pub use hmrf::{FieldPosterior, GibbsSettings, Hmrf, McemSettings, PottsParams, StateField};
pub use ingest::{CountPanel, EventRecord, FilterPolicy, Schema, Source, YearRange};
pub use sim::{SimConfig, GroundTruth};
