//! Deterministic multi-lane, multi-class traffic simulation.
//!
//! Vehicles follow Bando-FtL car-following dynamics (pairwise or in
//! convolutional form), change lanes through stochastic decisions gated by
//! cool-down timers, and autonomous vehicles can be driven by bounded
//! piecewise-constant controls whose cost is evaluated and optimized.

pub mod control;
pub mod dynamics;
pub mod engine;
pub mod lane_change;
pub mod measures;
pub mod model;
pub mod scenarios;
pub mod state;

pub use control::{
    evaluate_cost, optimize_controls, ControlSchedule, ControlSignal, CostBreakdown,
    OptimizerConfig, OptimizerResult, RunningCost,
};
pub use dynamics::{Dynamics, ModelSwitch};
pub use engine::{apply_event, rk4_step, Engine, Failure, Trajectory};
pub use lane_change::{
    attempt_lane_change, ConditionMode, LaneChangeEvent, LaneChangeParams, ProbabilityLaw, Regime,
    ThresholdTable,
};
pub use measures::{
    empirical_measure, generalized_wasserstein, state_distance, Atom, DiscreteMeasure,
    StateDistanceReport,
};
pub use model::{
    bump_kernel, optimal_velocity, pairwise_accel, ClassId, KernelSpec, KernelTable,
    VehicleClassSpec, AUTONOMOUS,
};
pub use scenarios::{paper_scenarios, run_trials, InitPolicy, ScenarioConfig, TrialMetrics};
pub use state::{HybridState, Lane, Topology, VehicleId, VehicleState};
