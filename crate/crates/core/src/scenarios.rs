//! Scenario configuration, initialization, velocity-variation metrics, the
//! multi-trial harness and the mean-field convergence diagnostic.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlSignal, RunningCost};
use crate::dynamics::{Dynamics, ModelSwitch};
use crate::engine::{initial_timers, Engine, EngineError, Trajectory};
use crate::lane_change::LaneChangeParams;
use crate::measures::{generalized_wasserstein_with, DiscreteMeasure, WassersteinCosts};
use crate::model::{
    optimal_velocity, ClassId, KernelSpec, KernelTable, VehicleClassSpec, AUTONOMOUS,
};
use crate::state::{HybridState, StateError, Topology, VehicleId, VehicleState};

/// Current version of the scenario file format.
pub const SCHEMA_VERSION: u32 = 1;

/// Default half-width of the uniform velocity noise, m/s.
pub const DEFAULT_VELOCITY_NOISE: f64 = 0.5;

/// Stream of the initialization generator (decision streams use vehicle ids).
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("lane {lane} cannot hold its vehicles: ring length {ring} needs more than {needed}")]
    Infeasible { lane: usize, ring: f64, needed: f64 },
    #[error("initialization by policy requires a ring topology")]
    NeedsRing,
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One failed check, with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {}: {}", x.path, x.message))
        .collect::<Vec<_>>()
        .join("\n")
}

/// How initial positions and velocities are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    /// Uniformly random gaps above the gap margin, velocities `V(h)` plus
    /// uniform noise in `[-noise, noise]`.
    Random { noise: f64 },
    /// Equal gaps per lane and `v = V(h)`.
    Equilibrium,
    /// Deterministic quantiles of the density `1 + a sin(2πx/L)` per lane,
    /// velocities `v_mean + v_amplitude sin(2πx/L)`.
    Profile {
        density_amplitude: f64,
        v_mean: f64,
        v_amplitude: f64,
    },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Random {
            noise: DEFAULT_VELOCITY_NOISE,
        }
    }
}

/// Override of one entry of the interaction-kernel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOverride {
    pub other: ClassId,
    pub ego: ClassId,
    #[serde(flatten)]
    pub kernel: KernelSpec,
}

/// A complete, reproducible scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub topology: Topology,
    pub lanes: usize,
    /// Integration step, seconds.
    pub dt: f64,
    /// Horizon `T`, seconds.
    pub horizon: f64,
    #[serde(default)]
    pub model: ModelSwitch,
    /// Vehicle count per class, indexed by class id.
    pub counts: Vec<usize>,
    /// Class specs, indexed by class id.
    pub classes: Vec<VehicleClassSpec>,
    #[serde(default)]
    pub kernel_overrides: Vec<KernelOverride>,
    /// Default kernel support radius, meters.
    #[serde(default = "default_epsilon")]
    pub kernel_epsilon: f64,
    pub lane_change: LaneChangeParams,
    #[serde(default)]
    pub init: InitPolicy,
    /// Explicit initial vehicles; replaces the init policy when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicles: Option<Vec<VehicleState>>,
    /// Explicit initial timers; defaults to the low-discrepancy rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_timers: Option<Vec<f64>>,
    /// Control bound `U_max`, m/s².
    #[serde(default = "default_control_bound")]
    pub control_bound: f64,
    #[serde(default)]
    pub running_cost: RunningCost,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    crate::model::DEFAULT_KERNEL_EPSILON
}

fn default_control_bound() -> f64 {
    1.0
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn vehicle_count(&self) -> usize {
        match &self.vehicles {
            Some(v) => v.len(),
            None => self.counts.iter().sum(),
        }
    }

    /// Every violated invariant, with the field path.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(Violation {
                path: path.into(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            push(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            );
        }
        if self.lanes == 0 {
            push("lanes", "must be at least 1".into());
        }
        if let Topology::Ring { length } = self.topology {
            if !(length > 0.0) {
                push("topology.length", format!("must be > 0, got {length}"));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            push("dt", format!("must be > 0, got {}", self.dt));
        } else if !(self.horizon >= 0.0)
            || ((self.horizon / self.dt).round() * self.dt - self.horizon).abs() > 1e-9
        {
            push(
                "horizon",
                format!(
                    "must be a non-negative multiple of dt, got {}",
                    self.horizon
                ),
            );
        }
        let m = self.classes.len();
        if m == 0 {
            push("classes", "at least one class is required".into());
        }
        for (i, spec) in self.classes.iter().enumerate() {
            if spec.class_id != i {
                push(
                    &format!("classes[{i}].class_id"),
                    format!("must equal its index {i}, got {}", spec.class_id),
                );
            }
            for (field, message) in spec.violations() {
                push(&format!("classes[{i}].{field}"), message);
            }
        }
        if self.counts.len() != m {
            push(
                "counts",
                format!(
                    "must have one entry per class ({m}), got {}",
                    self.counts.len()
                ),
            );
        }
        for (i, k) in self.kernel_overrides.iter().enumerate() {
            if k.other >= m || k.ego >= m || k.kernel.velocity_class >= m {
                push(
                    &format!("kernel_overrides[{i}]"),
                    "class index out of range".into(),
                );
            }
            if !(k.kernel.epsilon > 0.0) {
                push(
                    &format!("kernel_overrides[{i}].epsilon"),
                    format!("must be > 0, got {}", k.kernel.epsilon),
                );
            }
            if !(k.kernel.alpha >= 0.0 && k.kernel.beta >= 0.0) {
                push(
                    &format!("kernel_overrides[{i}]"),
                    "alpha and beta must be >= 0".into(),
                );
            }
        }
        if !(self.kernel_epsilon > 0.0) {
            push(
                "kernel_epsilon",
                format!("must be > 0, got {}", self.kernel_epsilon),
            );
        }
        let lc = &self.lane_change;
        for (path, message) in lc.thresholds.violations(m) {
            push(&format!("lane_change.{path}"), message);
        }
        if lc.car_class >= m {
            push(
                "lane_change.car_class",
                format!("class {} does not exist", lc.car_class),
            );
        }
        if lc.truck_class >= m {
            push(
                "lane_change.truck_class",
                format!("class {} does not exist", lc.truck_class),
            );
        }
        if !(lc.tau_bar > 0.0) {
            push(
                "lane_change.tau_bar",
                format!("must be > 0, got {}", lc.tau_bar),
            );
        }
        if !(lc.gap_margin >= 0.0) {
            push(
                "lane_change.gap_margin",
                format!("must be >= 0, got {}", lc.gap_margin),
            );
        }
        if !(lc.law.accel_bound > 0.0) {
            push(
                "lane_change.law.accel_bound",
                format!("must be > 0, got {}", lc.law.accel_bound),
            );
        }
        for (j, g) in lc.law.gamma.iter().enumerate() {
            if !(*g > 0.0) {
                push(
                    &format!("lane_change.law.gamma[{j}]"),
                    format!("must be > 0, got {g}"),
                );
            }
        }
        match self.init {
            InitPolicy::Random { noise } if !(noise >= 0.0) => {
                push("init.noise", format!("must be >= 0, got {noise}"));
            }
            InitPolicy::Profile {
                density_amplitude,
                v_mean,
                v_amplitude,
            } => {
                if !(density_amplitude.abs() < 1.0) {
                    push("init.density_amplitude", "must lie in (-1, 1)".into());
                }
                if !(v_mean - v_amplitude.abs() >= 0.0) {
                    push(
                        "init.v_amplitude",
                        "velocities must stay non-negative".into(),
                    );
                }
            }
            _ => {}
        }
        if self.vehicles.is_none() && self.topology.ring_length().is_none() {
            push(
                "vehicles",
                "an open road needs an explicit vehicle list".into(),
            );
        }
        if let Some(vehicles) = &self.vehicles {
            for (i, v) in vehicles.iter().enumerate() {
                if v.id != i {
                    push(
                        &format!("vehicles[{i}].id"),
                        format!("must equal its index {i}"),
                    );
                }
                if v.class_id >= m {
                    push(
                        &format!("vehicles[{i}].class_id"),
                        format!("class {} does not exist", v.class_id),
                    );
                }
                if !(v.length > 0.0) {
                    push(
                        &format!("vehicles[{i}].length"),
                        format!("must be > 0, got {}", v.length),
                    );
                }
                if v.lane == 0 || v.lane > self.lanes {
                    push(
                        &format!("vehicles[{i}].lane"),
                        format!("must lie in 1..={}", self.lanes),
                    );
                }
                if !(v.v >= 0.0) {
                    push(
                        &format!("vehicles[{i}].v"),
                        format!("must be >= 0, got {}", v.v),
                    );
                }
            }
        }
        if let Some(timers) = &self.initial_timers {
            let n = self.vehicle_count();
            if timers.len() != n {
                push(
                    "initial_timers",
                    format!("must have {n} entries, got {}", timers.len()),
                );
            }
            for (i, &t) in timers.iter().enumerate() {
                if !(t >= 0.0 && t < lc.tau_bar) {
                    push(
                        &format!("initial_timers[{i}]"),
                        format!("must lie in [0, tau_bar), got {t}"),
                    );
                }
                if timers[..i].contains(&t) {
                    push(
                        &format!("initial_timers[{i}]"),
                        format!("duplicate timer {t}; initial timers must be distinct"),
                    );
                }
            }
        }
        if !(self.control_bound > 0.0) {
            push(
                "control_bound",
                format!("must be > 0, got {}", self.control_bound),
            );
        }
        if let (Topology::Ring { length }, None, true) = (
            self.topology,
            &self.vehicles,
            self.lanes > 0 && self.counts.len() == m,
        ) {
            for (lane, needed) in self.lane_requirements().into_iter().enumerate() {
                if !(length > needed) {
                    push(
                        "topology.length",
                        format!("lane {} needs more than {needed} m, got {length}", lane + 1),
                    );
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(v))
        }
    }

    /// Class of every vehicle by id, and its lane, as assigned by count.
    fn assignment(&self) -> Vec<(ClassId, usize)> {
        let mut out = Vec::with_capacity(self.vehicle_count());
        let mut i = 0;
        for (class, &count) in self.counts.iter().enumerate() {
            for _ in 0..count {
                out.push((class, 1 + i % self.lanes));
                i += 1;
            }
        }
        out
    }

    /// Minimal ring length per lane: vehicle lengths plus one gap margin each.
    fn lane_requirements(&self) -> Vec<f64> {
        let mut need = vec![0.0; self.lanes];
        for (class, lane) in self.assignment() {
            need[lane - 1] += self.classes[class].length + self.lane_change.gap_margin;
        }
        need
    }

    pub fn kernel_table(&self) -> KernelTable {
        let mut table = KernelTable::from_classes(&self.classes, self.lane_change.car_class);
        let entries: Vec<(ClassId, ClassId, KernelSpec)> = table
            .iter()
            .map(|(o, e, k)| {
                (
                    o,
                    e,
                    KernelSpec {
                        epsilon: self.kernel_epsilon,
                        ..k.clone()
                    },
                )
            })
            .collect();
        for (o, e, k) in entries {
            table.set(o, e, k).expect("index in range");
        }
        for k in &self.kernel_overrides {
            table
                .set(k.other, k.ego, k.kernel.clone())
                .expect("validated override");
        }
        table
    }

    pub fn engine(&self) -> Engine {
        let dynamics = Dynamics::new(self.classes.clone(), self.kernel_table(), self.model);
        Engine::new(dynamics, self.lane_change.clone(), self.dt)
    }

    /// Initial state for `seed` (explicit vehicles or the init policy).
    pub fn initial_state(&self, seed: u64) -> Result<HybridState, ScenarioError> {
        self.validate()?;
        let mut state = match &self.vehicles {
            Some(vehicles) => HybridState::new(self.topology, self.lanes, vehicles.clone())?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(INIT_STREAM);
                init_ring(self, &mut rng)?
            }
        };
        let timers = match &self.initial_timers {
            Some(t) => t.clone(),
            None => initial_timers(state.len(), self.lane_change.tau_bar),
        };
        for (veh, t) in state.vehicles.iter_mut().zip(timers) {
            veh.timer = t;
        }
        Ok(state)
    }

    /// Runs one seeded simulation of the scenario.
    pub fn simulate(
        &self,
        seed: u64,
        controls: Option<&ControlSignal>,
    ) -> Result<Trajectory, ScenarioError> {
        let state = self.initial_state(seed)?;
        Ok(self
            .engine()
            .simulate(state, controls, self.horizon, seed)?)
    }
}

/// Places the scenario's vehicles on a ring according to its init policy.
///
/// Classes are assigned by count and dealt round-robin across lanes; each
/// lane's order is shuffled before placement.
pub fn init_ring<R: Rng>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<HybridState, ScenarioError> {
    let ring = config
        .topology
        .ring_length()
        .ok_or(ScenarioError::NeedsRing)?;
    let assignment = config.assignment();
    let margin = config.lane_change.gap_margin;
    let mut vehicles: Vec<VehicleState> = assignment
        .iter()
        .enumerate()
        .map(|(id, &(class_id, lane))| VehicleState {
            id,
            class_id,
            length: config.classes[class_id].length,
            x: 0.0,
            v: 0.0,
            lane,
            timer: 0.0,
        })
        .collect();
    for lane in 1..=config.lanes {
        let mut ids: Vec<VehicleId> = vehicles
            .iter()
            .filter(|v| v.lane == lane)
            .map(|v| v.id)
            .collect();
        if ids.is_empty() {
            continue;
        }
        if matches!(config.init, InitPolicy::Random { .. }) {
            ids.shuffle(rng);
        }
        let n = ids.len();
        let lengths: f64 = ids.iter().map(|&id| vehicles[id].length).sum();
        let needed = lengths + n as f64 * margin;
        if !(ring > needed) {
            return Err(ScenarioError::Infeasible { lane, ring, needed });
        }
        let free = ring - needed;
        let (gaps, start): (Vec<f64>, f64) = match config.init {
            InitPolicy::Random { .. } => {
                // uniform spacings: normalized exponential draws
                let draws: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                let total: f64 = draws.iter().sum();
                (
                    draws.iter().map(|d| margin + free * d / total).collect(),
                    rng.gen::<f64>() * ring,
                )
            }
            InitPolicy::Equilibrium | InitPolicy::Profile { .. } => {
                (vec![margin + free / n as f64; n], 0.0)
            }
        };
        match config.init {
            InitPolicy::Profile {
                density_amplitude,
                v_mean,
                v_amplitude,
            } => {
                for (j, &id) in ids.iter().enumerate() {
                    let x = density_quantile((j as f64 + 0.5) / n as f64, density_amplitude) * ring;
                    vehicles[id].x = x;
                    vehicles[id].v = v_mean + v_amplitude * (TAU * x / ring).sin();
                }
            }
            _ => {
                // gaps[j] separates ids[j] from its leader ids[j + 1]
                let mut x = start;
                for j in 0..n {
                    let id = ids[j];
                    vehicles[id].x = x;
                    let leader = ids[(j + 1) % n];
                    x += gaps[j] + vehicles[leader].length;
                }
                for (j, &id) in ids.iter().enumerate() {
                    let spec = &config.classes[vehicles[id].class_id];
                    let v_opt = optimal_velocity(gaps[j], spec).expect("positive gap");
                    let noise = match config.init {
                        InitPolicy::Random { noise } if noise > 0.0 => {
                            rng.gen_range(-noise..=noise)
                        }
                        _ => 0.0,
                    };
                    vehicles[id].v = (v_opt + noise).max(0.0);
                }
            }
        }
    }
    Ok(HybridState::new(config.topology, config.lanes, vehicles)?)
}

/// Inverse CDF on `[0, 1)` of the density `1 + a sin(2πx)`, by bisection.
fn density_quantile(p: f64, a: f64) -> f64 {
    let cdf = |x: f64| x + a * (1.0 - (TAU * x).cos()) / TAU;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("series needs at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
}

/// `max(series) - min(series)`.
pub fn max_velocity_variation(series: &[f64]) -> Result<f64, MetricError> {
    if series.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Ok(hi - lo)
}

/// `Σ |v_{i+1} - v_i|`.
pub fn total_velocity_variation(series: &[f64]) -> Result<f64, MetricError> {
    if series.len() < 2 {
        return Err(MetricError::TooShort {
            needed: 2,
            got: series.len(),
        });
    }
    Ok(series.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

/// Metrics of one vehicle in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub vehicle_id: VehicleId,
    pub class_id: ClassId,
    pub max_var: f64,
    pub total_var: f64,
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub seed: u64,
    pub vehicles: Vec<VehicleMetrics>,
    pub lane_changes: usize,
    pub failure: Option<crate::engine::Failure>,
    pub events: Vec<crate::lane_change::LaneChangeEvent>,
}

impl TrialMetrics {
    pub fn from_trajectory(trial: usize, seed: u64, traj: &Trajectory) -> Self {
        let vehicles = traj
            .classes
            .iter()
            .enumerate()
            .map(|(id, &class_id)| {
                let series = traj.velocity_series(id);
                VehicleMetrics {
                    vehicle_id: id,
                    class_id,
                    max_var: max_velocity_variation(&series).unwrap_or(0.0),
                    total_var: total_velocity_variation(&series).unwrap_or(0.0),
                }
            })
            .collect();
        Self {
            trial,
            seed,
            vehicles,
            lane_changes: traj.events.len(),
            failure: traj.failure.clone(),
            events: traj.events.clone(),
        }
    }
}

/// Summary statistics of one metric for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    /// Statistics of `values` (order-independent; sample standard deviation).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            count: n,
            mean,
            std: var.sqrt(),
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[n - 1],
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summaries of both metrics over a set of vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub max_var: Summary,
    pub total_var: Summary,
}

/// Per-class aggregate over all successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class_id: ClassId,
    #[serde(flatten)]
    pub metrics: MetricSummaries,
}

impl std::ops::Deref for ClassAggregate {
    type Target = MetricSummaries;

    fn deref(&self) -> &MetricSummaries {
        &self.metrics
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsReport {
    pub trials: Vec<TrialMetrics>,
    pub aggregates: Vec<ClassAggregate>,
    /// Aggregate over every vehicle regardless of class.
    pub all: Option<MetricSummaries>,
    pub failed_trials: usize,
}

impl TrialsReport {
    pub fn class(&self, class: ClassId) -> Option<&ClassAggregate> {
        self.aggregates.iter().find(|a| a.class_id == class)
    }

    /// Long-format `trial,seed,vehicle_id,class,max_var,total_var` rows of successful trials.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("trial,seed,vehicle_id,class,max_var,total_var\n");
        for t in self.trials.iter().filter(|t| t.failure.is_none()) {
            for v in &t.vehicles {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    t.trial, t.seed, v.vehicle_id, v.class_id, v.max_var, v.total_var
                ));
            }
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("class,metric,count,mean,std,min,q25,median,q75,max\n");
        let rows = self
            .aggregates
            .iter()
            .map(|a| (a.class_id.to_string(), &a.metrics))
            .chain(self.all.iter().map(|a| ("all".to_string(), a)));
        for (label, a) in rows {
            for (metric, s) in [("max_var", &a.max_var), ("total_var", &a.total_var)] {
                out.push_str(&format!(
                    "{label},{metric},{},{},{},{},{},{},{},{}\n",
                    s.count, s.mean, s.std, s.min, s.q25, s.median, s.q75, s.max
                ));
            }
        }
        out
    }
}

fn summaries(rows: &[&VehicleMetrics]) -> Option<MetricSummaries> {
    let max: Vec<f64> = rows.iter().map(|r| r.max_var).collect();
    let total: Vec<f64> = rows.iter().map(|r| r.total_var).collect();
    Some(MetricSummaries {
        max_var: Summary::of(&max)?,
        total_var: Summary::of(&total)?,
    })
}

/// Runs `n_trials` seeded trials (`base_seed + i`) on up to `jobs` threads;
/// results do not depend on `jobs`.
pub fn run_trials(
    config: &ScenarioConfig,
    n_trials: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<TrialsReport, ScenarioError> {
    config.validate()?;
    let run = |i: usize| -> Result<TrialMetrics, ScenarioError> {
        let seed = base_seed.wrapping_add(i as u64);
        let traj = config.simulate(seed, None)?;
        Ok(TrialMetrics::from_trajectory(i, seed, &traj))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let trials: Vec<TrialMetrics> = pool.install(|| {
        (0..n_trials)
            .into_par_iter()
            .map(run)
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(summarize(trials))
}

/// Aggregates trial results; failed trials are counted and excluded.
pub fn summarize(trials: Vec<TrialMetrics>) -> TrialsReport {
    let ok: Vec<&TrialMetrics> = trials.iter().filter(|t| t.failure.is_none()).collect();
    let rows: Vec<&VehicleMetrics> = ok.iter().flat_map(|t| t.vehicles.iter()).collect();
    let mut classes: Vec<ClassId> = rows.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let aggregates = classes
        .into_iter()
        .filter_map(|c| {
            let class_rows: Vec<&VehicleMetrics> =
                rows.iter().copied().filter(|r| r.class_id == c).collect();
            summaries(&class_rows).map(|metrics| ClassAggregate {
                class_id: c,
                metrics,
            })
        })
        .collect();
    let all = summaries(&rows);
    let failed_trials = trials.len() - ok.len();
    TrialsReport {
        trials,
        aggregates,
        all,
        failed_trials,
    }
}

/// Vehicle lengths over total lane length.
pub fn occupancy_ratio(config: &ScenarioConfig) -> f64 {
    let lengths: f64 = config
        .counts
        .iter()
        .zip(&config.classes)
        .map(|(&n, c)| n as f64 * c.length)
        .sum();
    let ring = config.topology.ring_length().unwrap_or(f64::INFINITY);
    lengths / (config.lanes as f64 * ring)
}

fn base_classes() -> Vec<VehicleClassSpec> {
    vec![
        VehicleClassSpec::autonomous(),
        VehicleClassSpec::car(),
        VehicleClassSpec::truck(),
    ]
}

fn paper_preset(name: &str, trucks: usize, ring: f64) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        topology: Topology::Ring { length: ring },
        lanes: 3,
        dt: crate::engine::DEFAULT_DT,
        horizon: 300.0,
        model: ModelSwitch::Pairwise,
        counts: vec![0, 100 - trucks, trucks],
        classes: base_classes(),
        kernel_overrides: Vec::new(),
        kernel_epsilon: default_epsilon(),
        lane_change: LaneChangeParams::with_defaults(3),
        init: InitPolicy::default(),
        vehicles: None,
        initial_timers: None,
        control_bound: default_control_bound(),
        running_cost: RunningCost::None,
        seed: 0,
    }
}

/// The three truck-penetration presets: 100 vehicles on three ring lanes.
pub fn paper_scenarios() -> Vec<ScenarioConfig> {
    vec![
        paper_preset("paper-10pct", 10, 750.0),
        paper_preset("paper-20pct", 20, 895.0),
        paper_preset("paper-30pct", 30, 1040.0),
    ]
}

/// Scenarios with autonomous vehicles for control experiments.
pub fn av_scenarios() -> Vec<ScenarioConfig> {
    let mut mixed = paper_preset("av-mixed", 4, 300.0);
    mixed.lanes = 2;
    mixed.counts = vec![2, 14, 4];
    mixed.horizon = 60.0;
    mixed.running_cost = RunningCost::Spread;

    let mut tracking = paper_preset("av-tracking", 0, 1000.0);
    tracking.topology = Topology::Open;
    tracking.lanes = 1;
    tracking.counts = vec![1, 0, 0];
    tracking.horizon = 20.0;
    tracking.control_bound = 2.0;
    tracking.running_cost = RunningCost::Tracking { v_ref: 4.0 };
    tracking.vehicles = Some(vec![VehicleState {
        id: 0,
        class_id: AUTONOMOUS,
        length: 4.5,
        x: 0.0,
        v: 0.0,
        lane: 1,
        timer: 0.0,
    }]);
    vec![mixed, tracking]
}

/// Every named preset.
pub fn presets() -> Vec<ScenarioConfig> {
    let mut all = paper_scenarios();
    all.extend(av_scenarios());
    all
}

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    presets().into_iter().find(|p| p.name == name)
}

/// Distances between consecutive resolution levels at each sample time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Vehicle counts of the levels.
    pub sizes: Vec<usize>,
    pub sample_times: Vec<f64>,
    /// `distances[l][s]`: summed per-class distance between levels `l` and `l + 1` at sample `s`.
    pub distances: Vec<Vec<f64>>,
    /// Mean over samples of each row of `distances`.
    pub mean_distances: Vec<f64>,
}

fn class_measure(traj: &Trajectory, sample: usize, class: ClassId) -> DiscreteMeasure {
    DiscreteMeasure::empirical(
        traj.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(id, _)| (traj.x[sample][id], traj.v[sample][id])),
    )
}

/// Simulates every level with `seed` and compares the whole-road empirical
/// measure of each human class between consecutive levels every `every`
/// samples.
pub fn convergence_diagnostic(
    levels: &[ScenarioConfig],
    seed: u64,
    every: usize,
    costs: WassersteinCosts,
) -> Result<ConvergenceReport, ScenarioError> {
    let trajectories: Vec<Trajectory> = levels
        .par_iter()
        .map(|c| c.simulate(seed, None))
        .collect::<Result<_, _>>()?;
    let topology = levels.first().map(|c| c.topology).unwrap_or(Topology::Open);
    let samples = trajectories
        .iter()
        .map(|t| t.times.len())
        .min()
        .unwrap_or(0);
    let picks: Vec<usize> = (0..samples).step_by(every.max(1)).collect();
    let mut classes: Vec<ClassId> = trajectories
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .filter(|&c| c != AUTONOMOUS)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let distances: Vec<Vec<f64>> = trajectories
        .windows(2)
        .map(|pair| {
            picks
                .par_iter()
                .map(|&s| {
                    classes
                        .iter()
                        .map(|&c| {
                            generalized_wasserstein_with(
                                &class_measure(&pair[0], s, c),
                                &class_measure(&pair[1], s, c),
                                costs,
                                &topology,
                            )
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    let mean_distances = distances
        .iter()
        .map(|row: &Vec<f64>| row.iter().sum::<f64>() / row.len().max(1) as f64)
        .collect();
    Ok(ConvergenceReport {
        sizes: levels.iter().map(|c| c.vehicle_count()).collect(),
        sample_times: picks.iter().map(|&s| trajectories[0].times[s]).collect(),
        distances,
        mean_distances,
    })
}
