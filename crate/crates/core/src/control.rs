//! Bounded piecewise-constant controls for autonomous vehicles, the hybrid
//! cost functional and a derivative-free minimizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, Failure, StepObserver};
use crate::model::AUTONOMOUS;
use crate::state::{HybridState, VehicleId};

/// Slack when locating the knot interval that contains a time.
const KNOT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("control bound must be positive, got {0}")]
    BadBound(f64),
    #[error("schedule for vehicle {vehicle_id}: {message}")]
    BadSchedule {
        vehicle_id: VehicleId,
        message: String,
    },
    #[error("the scenario has no autonomous vehicle to control")]
    NoAutonomousVehicles,
    #[error("knot count and budget must be at least 1")]
    BadOptimizerConfig,
    #[error("every one of the {evaluations} evaluations was infeasible (first failure: {first_failure})")]
    AllInfeasible {
        evaluations: usize,
        first_failure: String,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Piecewise-constant acceleration of one vehicle: `values[j]` holds on
/// `[knots[j], knots[j + 1])`, the last value until the horizon, zero before
/// the first knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub vehicle_id: VehicleId,
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl ControlSchedule {
    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&k| k <= t + KNOT_EPS);
        if i == 0 {
            0.0
        } else {
            self.values[i - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    /// `U_max`, m/s².
    pub bound: f64,
    pub schedules: Vec<ControlSchedule>,
}

impl ControlSignal {
    /// Zero controls for `vehicles` on `knot_count` equal intervals of
    /// `[0, horizon)`, with knots rounded to the step grid.
    pub fn zeros(
        vehicles: &[VehicleId],
        knot_count: usize,
        horizon: f64,
        dt: f64,
        bound: f64,
    ) -> Self {
        let steps = (horizon / dt).round() as usize;
        let mut knots: Vec<f64> = (0..knot_count)
            .map(|j| ((j * steps) as f64 / knot_count as f64).round() * dt)
            .collect();
        knots.dedup();
        let schedules = vehicles
            .iter()
            .map(|&vehicle_id| ControlSchedule {
                vehicle_id,
                knots: knots.clone(),
                values: vec![0.0; knots.len()],
            })
            .collect();
        Self { bound, schedules }
    }

    /// Same schedule shape with a constant value `c` everywhere.
    pub fn constant(vehicles: &[VehicleId], c: f64, horizon: f64, dt: f64, bound: f64) -> Self {
        let mut s = Self::zeros(vehicles, 1, horizon, dt, bound);
        s.set_flat(&[c].repeat(vehicles.len()));
        s
    }

    /// Writes `u[id]` at time `t` (relative to the run start), clamped to the bound.
    pub fn values_into(&self, t: f64, u: &mut [f64]) {
        for s in &self.schedules {
            if let Some(slot) = u.get_mut(s.vehicle_id) {
                *slot = s.value_at(t).clamp(-self.bound, self.bound);
            }
        }
    }

    /// All knot values, schedule by schedule.
    pub fn flat(&self) -> Vec<f64> {
        self.schedules
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect()
    }

    /// Replaces the knot values from a flat vector, projecting onto the bound.
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for s in &mut self.schedules {
            for slot in &mut s.values {
                *slot = it
                    .next()
                    .copied()
                    .unwrap_or(0.0)
                    .clamp(-self.bound, self.bound);
            }
        }
    }

    /// Largest `|u|` over all knots.
    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn validate(&self, state: &HybridState, dt: f64) -> Result<(), ControlError> {
        if !(self.bound > 0.0) {
            return Err(ControlError::BadBound(self.bound));
        }
        for s in &self.schedules {
            let bad = |message: String| ControlError::BadSchedule {
                vehicle_id: s.vehicle_id,
                message,
            };
            match state.vehicles.get(s.vehicle_id) {
                Some(v) if v.class_id == AUTONOMOUS => {}
                _ => return Err(bad("not an autonomous vehicle".into())),
            }
            if s.knots.len() != s.values.len() {
                return Err(bad("knots and values differ in length".into()));
            }
            if s.knots.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(bad("knots must be strictly increasing".into()));
            }
            if let Some(k) = s
                .knots
                .iter()
                .find(|&&k| ((k / dt).round() * dt - k).abs() > KNOT_EPS)
            {
                return Err(bad(format!("knot {k} is not on the step grid")));
            }
            if let Some(v) = s.values.iter().find(|v| v.abs() > self.bound) {
                return Err(bad(format!("value {v} exceeds the bound {}", self.bound)));
            }
        }
        Ok(())
    }
}

/// Per-lane running cost `L_k`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunningCost {
    /// `L ≡ 0`: only the control effort is charged.
    #[default]
    None,
    /// Mean over the lane's vehicles of `(v - v_ref)²`.
    Tracking { v_ref: f64 },
    /// Velocity variance of the lane's vehicles (all classes pooled).
    Spread,
}

impl RunningCost {
    pub fn lane_value(&self, state: &HybridState, lane: usize) -> f64 {
        let ids = state.lane(lane);
        if ids.is_empty() {
            return 0.0;
        }
        let n = ids.len() as f64;
        match *self {
            RunningCost::None => 0.0,
            RunningCost::Tracking { v_ref } => {
                ids.iter()
                    .map(|&id| (state.vehicles[id].v - v_ref).powi(2))
                    .sum::<f64>()
                    / n
            }
            RunningCost::Spread => {
                let mean = ids.iter().map(|&id| state.vehicles[id].v).sum::<f64>() / n;
                ids.iter()
                    .map(|&id| (state.vehicles[id].v - mean).powi(2))
                    .sum::<f64>()
                    / n
            }
        }
    }
}

/// Parts of the cost functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// `∫ L_k dt` per lane (index `k - 1`).
    pub running: Vec<f64>,
    /// `Σ_k ∫ (1/Q_k) Σ_j |u_j| dt`.
    pub control: f64,
    /// Sum of the parts, or `+∞` for a failed run.
    pub total: f64,
    pub failure: Option<Failure>,
}

impl CostBreakdown {
    pub fn feasible(&self) -> bool {
        self.failure.is_none()
    }
}

/// Accumulates the cost along a run: trapezoid rule for `L_k` on each step,
/// exact integral of the piecewise-constant control term.
#[derive(Debug, Clone)]
pub struct CostAccumulator {
    pub cost: RunningCost,
    pub running: Vec<f64>,
    pub control: f64,
}

impl CostAccumulator {
    pub fn new(cost: RunningCost, lane_count: usize) -> Self {
        Self {
            cost,
            running: vec![0.0; lane_count],
            control: 0.0,
        }
    }
}

impl StepObserver for CostAccumulator {
    fn on_step(&mut self, before: &HybridState, after: &HybridState, controls: &[f64], dt: f64) {
        for (lane, ids) in before.lanes() {
            let l0 = self.cost.lane_value(before, lane);
            let l1 = self.cost.lane_value(after, lane);
            self.running[lane - 1] += 0.5 * dt * (l0 + l1);
            let avs: Vec<VehicleId> = ids
                .iter()
                .copied()
                .filter(|&id| before.vehicles[id].class_id == AUTONOMOUS)
                .collect();
            if !avs.is_empty() {
                let effort: f64 = avs.iter().map(|&id| controls[id].abs()).sum();
                self.control += dt * effort / avs.len() as f64;
            }
        }
    }
}

/// Cost of `controls` on one seeded run from `initial` over `horizon`.
pub fn evaluate_cost(
    engine: &Engine,
    initial: &HybridState,
    controls: Option<&ControlSignal>,
    horizon: f64,
    seed: u64,
    running_cost: RunningCost,
) -> Result<CostBreakdown, ControlError> {
    if let Some(c) = controls {
        c.validate(initial, engine.dt)?;
    }
    let mut acc = CostAccumulator::new(running_cost, initial.lane_count);
    let traj = engine.simulate_observed(initial.clone(), controls, horizon, seed, &mut acc)?;
    let total = if traj.failure.is_some() {
        f64::INFINITY
    } else {
        acc.running.iter().sum::<f64>() + acc.control
    };
    Ok(CostBreakdown {
        running: acc.running,
        control: acc.control,
        total,
        failure: traj.failure,
    })
}

/// How random lane-change draws are shared across cost evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every evaluation uses the same seed.
    #[default]
    Common,
    /// Average over seeds `seed .. seed + size`.
    Batch { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub knots: usize,
    /// Maximum number of cost evaluations.
    pub budget: usize,
    pub bound: f64,
    /// Initial coordinate step; defaults to half the bound.
    pub initial_step: Option<f64>,
    /// Search stops once the step falls below this value.
    pub min_step: f64,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
}

impl OptimizerConfig {
    pub fn new(knots: usize, budget: usize, bound: f64, seed: u64) -> Self {
        Self {
            knots,
            budget,
            bound,
            initial_step: None,
            min_step: 1e-4,
            seed,
            seed_policy: SeedPolicy::Common,
        }
    }
}

/// One row of the optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub evaluation: usize,
    pub step: f64,
    pub cost: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub signal: ControlSignal,
    pub best: CostBreakdown,
    pub history: Vec<HistoryEntry>,
}

fn policy_cost(
    engine: &Engine,
    initial: &HybridState,
    signal: &ControlSignal,
    horizon: f64,
    config: &OptimizerConfig,
    running_cost: RunningCost,
) -> Result<CostBreakdown, ControlError> {
    match config.seed_policy {
        SeedPolicy::Common => evaluate_cost(
            engine,
            initial,
            Some(signal),
            horizon,
            config.seed,
            running_cost,
        ),
        SeedPolicy::Batch { size } => {
            let size = size.max(1);
            let mut runs = Vec::with_capacity(size);
            for k in 0..size as u64 {
                runs.push(evaluate_cost(
                    engine,
                    initial,
                    Some(signal),
                    horizon,
                    config.seed.wrapping_add(k),
                    running_cost,
                )?);
            }
            let mean =
                |f: &dyn Fn(&CostBreakdown) -> f64| runs.iter().map(f).sum::<f64>() / size as f64;
            let lanes = runs[0].running.len();
            Ok(CostBreakdown {
                running: (0..lanes).map(|k| mean(&|r| r.running[k])).collect(),
                control: mean(&|r| r.control),
                total: mean(&|r| r.total),
                failure: runs.iter().find_map(|r| r.failure.clone()),
            })
        }
    }
}

/// Projected coordinate descent with a halving step over the knot values of
/// every autonomous vehicle, starting from `u ≡ 0`.
pub fn optimize_controls(
    engine: &Engine,
    initial: &HybridState,
    horizon: f64,
    running_cost: RunningCost,
    config: &OptimizerConfig,
) -> Result<OptimizerResult, ControlError> {
    if config.knots == 0 || config.budget == 0 {
        return Err(ControlError::BadOptimizerConfig);
    }
    if !(config.bound > 0.0) {
        return Err(ControlError::BadBound(config.bound));
    }
    let avs: Vec<VehicleId> = initial.ids_of_class(AUTONOMOUS).collect();
    if avs.is_empty() {
        return Err(ControlError::NoAutonomousVehicles);
    }
    let mut signal = ControlSignal::zeros(&avs, config.knots, horizon, engine.dt, config.bound);
    let mut x = signal.flat();
    let mut best = policy_cost(engine, initial, &signal, horizon, config, running_cost)?;
    let mut first_failure = best.failure.as_ref().map(|f| format!("{f:?}"));
    let mut step = config.initial_step.unwrap_or(0.5 * config.bound);
    let mut history = vec![HistoryEntry {
        evaluation: 1,
        step,
        cost: best.total,
        best: best.total,
    }];
    let mut evaluations = 1;
    'search: while evaluations < config.budget && step >= config.min_step {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                if evaluations >= config.budget {
                    break 'search;
                }
                let mut cand = x.clone();
                cand[i] = (x[i] + dir * step).clamp(-config.bound, config.bound);
                if cand[i] == x[i] {
                    continue;
                }
                let mut trial = signal.clone();
                trial.set_flat(&cand);
                let cost = policy_cost(engine, initial, &trial, horizon, config, running_cost)?;
                evaluations += 1;
                if first_failure.is_none() {
                    first_failure = cost.failure.as_ref().map(|f| format!("{f:?}"));
                }
                let accept = cost.total < best.total;
                history.push(HistoryEntry {
                    evaluation: evaluations,
                    step,
                    cost: cost.total,
                    best: if accept { cost.total } else { best.total },
                });
                if accept {
                    x = cand;
                    signal = trial;
                    best = cost;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    if !best.total.is_finite() {
        return Err(ControlError::AllInfeasible {
            evaluations,
            first_failure: first_failure.unwrap_or_default(),
        });
    }
    Ok(OptimizerResult {
        signal,
        best,
        history,
    })
}
