//! The hybrid execution loop: decision epochs, lane-change events and
//! fixed-step RK4 integration of the car-following dynamics.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlSignal;
use crate::dynamics::{Dynamics, HeadwayViolation};
use crate::lane_change::{attempt_lane_change, LaneChangeEvent, LaneChangeParams, TIMER_EPS};
use crate::model::{ClassId, ModelError, AUTONOMOUS};
use crate::state::{HybridState, Lane, StateError, VehicleId};

/// Default integration step, seconds.
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon {horizon} is not a non-negative multiple of the step {dt}")]
    BadHorizon { horizon: f64, dt: f64 },
    #[error("event for vehicle {vehicle_id} from lane {from} to lane {to} is not a move to an adjacent existing lane")]
    BadEvent {
        vehicle_id: VehicleId,
        from: Lane,
        to: Lane,
    },
    #[error("event rejected: {0}")]
    EventRejected(StateError),
    #[error("control schedule for vehicle {0} does not refer to an autonomous vehicle")]
    UncontrollableVehicle(VehicleId),
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    Collision {
        time: f64,
        follower: VehicleId,
        leader: VehicleId,
        lane: Lane,
        gap: f64,
    },
    Model {
        time: f64,
        vehicle_id: VehicleId,
        message: String,
    },
}

impl Failure {
    pub fn time(&self) -> f64 {
        match self {
            Failure::Collision { time, .. } | Failure::Model { time, .. } => *time,
        }
    }
}

/// Counters collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Decision epochs reached (timer at the cool-down time).
    pub epochs: u64,
    /// Epochs in which a target lane was drawn and evaluated.
    pub attempts: u64,
    pub accepted: u64,
    /// Vehicle-steps where the model acceleration exceeded the bound `M`.
    pub accel_bound_exceedances: u64,
}

/// Recorded samples of a run on the step grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub classes: Vec<ClassId>,
    /// `x[s][id]`, `v[s][id]`, `lanes[s][id]` at sample `s`.
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lanes: Vec<Vec<Lane>>,
    /// Accepted lane changes in the order they were applied.
    pub events: Vec<LaneChangeEvent>,
    pub failure: Option<Failure>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Velocity series of one vehicle.
    pub fn velocity_series(&self, id: VehicleId) -> Vec<f64> {
        self.v.iter().map(|row| row[id]).collect()
    }

    /// Long-format CSV `time,vehicle_id,class,lane,x,v` with shortest
    /// round-trip float formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,vehicle_id,class,lane,x,v")?;
        for (s, &t) in self.times.iter().enumerate() {
            for (id, &class) in self.classes.iter().enumerate() {
                writeln!(
                    w,
                    "{t},{id},{class},{},{},{}",
                    self.lanes[s][id], self.x[s][id], self.v[s][id]
                )?;
            }
        }
        Ok(())
    }

    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("events serialize")
    }
}

/// Observer called after every successful integration step.
pub trait StepObserver {
    /// `before` is the state after the decision pass at the step start,
    /// `after` the integrated state; `controls[id]` is the applied control.
    fn on_step(&mut self, before: &HybridState, after: &HybridState, controls: &[f64], dt: f64);
}

impl StepObserver for () {
    fn on_step(&mut self, _: &HybridState, _: &HybridState, _: &[f64], _: f64) {}
}

/// Everything needed to advance a state: dynamics, lane-change rules and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Engine {
    pub dynamics: Dynamics,
    pub lane_change: LaneChangeParams,
    pub dt: f64,
}

/// Pairwise-distinct initial timers `(i + 0.5) τ̄ / (N + 1)`.
pub fn initial_timers(n: usize, tau_bar: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (i as f64 + 0.5) * tau_bar / (n as f64 + 1.0))
        .collect()
}

/// Generator for one decision: stream = vehicle id, 64-word block per epoch.
pub fn decision_rng(seed: u64, vehicle: VehicleId, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(vehicle as u64);
    rng.set_word_pos(u128::from(epoch) * 64);
    rng
}

/// Applies a lane change: only the vehicle's lane and timer change.
pub fn apply_event(state: &mut HybridState, event: &LaneChangeEvent) -> Result<(), EngineError> {
    let id = event.vehicle_id;
    let bad = EngineError::BadEvent {
        vehicle_id: id,
        from: event.from_lane,
        to: event.to_lane,
    };
    let veh = state.vehicles.get(id).ok_or(bad.clone())?;
    if veh.lane != event.from_lane
        || event.to_lane == 0
        || event.to_lane > state.lane_count
        || event.to_lane.abs_diff(event.from_lane) != 1
    {
        return Err(bad);
    }
    let timer = veh.timer;
    state.move_to_lane(id, event.to_lane);
    if let Err(e) = state.check_exclusion() {
        state.move_to_lane(id, event.from_lane);
        state.vehicles[id].timer = timer;
        return Err(EngineError::EventRejected(e));
    }
    state.vehicles[id].timer = 0.0;
    Ok(())
}

/// Work buffers of the RK4 step.
#[derive(Debug, Default)]
pub struct StepBuffers {
    dx: Vec<f64>,
    vs: Vec<f64>,
    acc: [Vec<f64>; 4],
    vel: [Vec<f64>; 4],
}

impl StepBuffers {
    fn resize(&mut self, n: usize) {
        self.dx.resize(n, 0.0);
        self.vs.resize(n, 0.0);
        for k in 0..4 {
            self.acc[k].resize(n, 0.0);
            self.vel[k].resize(n, 0.0);
        }
    }
}

/// Result of a successful step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Largest `|a|` of the model acceleration at the step start.
    pub max_abs_accel: f64,
    /// Vehicles whose step-start acceleration exceeded `bound`.
    pub exceedances: u64,
}

/// One classical RK4 step of the coupled `(x, v)` system with controls held
/// constant, then velocity clamping, wrapping, timer advance and re-sorting.
/// The clock is left to the caller.
pub fn rk4_step(
    state: &mut HybridState,
    dynamics: &Dynamics,
    controls: &[f64],
    dt: f64,
    accel_bound: f64,
    buf: &mut StepBuffers,
) -> Result<StepStats, HeadwayViolation> {
    let n = state.len();
    buf.resize(n);
    let v0: Vec<f64> = state.vehicles.iter().map(|v| v.v).collect();
    let weights = [0.0, 0.5, 0.5, 1.0];
    for k in 0..4 {
        for i in 0..n {
            if k == 0 {
                buf.dx[i] = 0.0;
                buf.vs[i] = v0[i];
            } else {
                buf.dx[i] = weights[k] * dt * buf.vel[k - 1][i];
                buf.vs[i] = v0[i] + weights[k] * dt * buf.acc[k - 1][i];
            }
            buf.vel[k][i] = buf.vs[i];
        }
        let (dx, vs) = (&buf.dx, &buf.vs);
        dynamics.accelerations(state, dx, vs, &mut buf.acc[k])?;
        for i in 0..n {
            buf.acc[k][i] += controls.get(i).copied().unwrap_or(0.0);
        }
    }
    let mut stats = StepStats {
        max_abs_accel: 0.0,
        exceedances: 0,
    };
    for i in 0..n {
        let a = (buf.acc[0][i] - controls.get(i).copied().unwrap_or(0.0)).abs();
        stats.max_abs_accel = stats.max_abs_accel.max(a);
        if a > accel_bound {
            stats.exceedances += 1;
        }
        buf.dx[i] =
            dt / 6.0 * (buf.vel[0][i] + 2.0 * buf.vel[1][i] + 2.0 * buf.vel[2][i] + buf.vel[3][i]);
    }
    // final positions must keep every same-lane gap positive
    for (lane, ids) in state.lanes() {
        let m = ids.len();
        for (k, &id) in ids.iter().enumerate() {
            let leader = if k + 1 < m {
                ids[k + 1]
            } else if state.ring_length().is_some() {
                ids[0]
            } else {
                continue;
            };
            let gap =
                state.gap_to(state.vehicles[id].x, leader, Some(id)) + buf.dx[leader] - buf.dx[id];
            if !(gap > 0.0) {
                return Err(HeadwayViolation {
                    follower: id,
                    leader,
                    lane,
                    gap,
                });
            }
        }
    }
    let topology = state.topology;
    for (i, veh) in state.vehicles.iter_mut().enumerate() {
        let dv =
            dt / 6.0 * (buf.acc[0][i] + 2.0 * buf.acc[1][i] + 2.0 * buf.acc[2][i] + buf.acc[3][i]);
        veh.x = topology.wrap(veh.x + buf.dx[i]);
        veh.v = (v0[i] + dv).max(0.0);
        veh.timer += dt;
    }
    state.rebuild_orderings();
    Ok(stats)
}

impl Engine {
    pub fn new(dynamics: Dynamics, lane_change: LaneChangeParams, dt: f64) -> Self {
        Self {
            dynamics,
            lane_change,
            dt,
        }
    }

    /// Number of steps covering `horizon`.
    pub fn step_count(&self, horizon: f64) -> Result<usize, EngineError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EngineError::BadStep(self.dt));
        }
        let steps = (horizon / self.dt).round();
        if !(horizon >= 0.0) || (steps * self.dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(EngineError::BadHorizon {
                horizon,
                dt: self.dt,
            });
        }
        Ok(steps as usize)
    }

    /// Runs every decision epoch due at the current clock, in ascending id order.
    fn decision_pass(
        &self,
        state: &mut HybridState,
        seed: u64,
        epochs: &mut [u64],
        diagnostics: &mut Diagnostics,
        events: &mut Vec<LaneChangeEvent>,
    ) -> Result<(), Failure> {
        let tau_bar = self.lane_change.tau_bar;
        for id in 0..state.len() {
            if state.vehicles[id].timer < tau_bar - TIMER_EPS {
                continue;
            }
            let mut rng = decision_rng(seed, id, epochs[id]);
            epochs[id] += 1;
            diagnostics.epochs += 1;
            let outcome =
                attempt_lane_change(state, &self.dynamics, &self.lane_change, id, &mut rng)
                    .map_err(|e| model_failure(state.clock, id, e))?;
            state.vehicles[id].timer = 0.0;
            let Some(event) = outcome else { continue };
            diagnostics.attempts += 1;
            if event.accepted {
                apply_event(state, &event).map_err(|e| Failure::Model {
                    time: state.clock,
                    vehicle_id: id,
                    message: e.to_string(),
                })?;
                diagnostics.accepted += 1;
                events.push(event);
            }
        }
        Ok(())
    }

    /// Simulates `horizon` seconds from `initial`. A collision stops the run
    /// and is reported in `Trajectory::failure`.
    pub fn simulate(
        &self,
        initial: HybridState,
        controls: Option<&ControlSignal>,
        horizon: f64,
        seed: u64,
    ) -> Result<Trajectory, EngineError> {
        self.simulate_observed(initial, controls, horizon, seed, &mut ())
    }

    pub fn simulate_observed<O: StepObserver>(
        &self,
        initial: HybridState,
        controls: Option<&ControlSignal>,
        horizon: f64,
        seed: u64,
        observer: &mut O,
    ) -> Result<Trajectory, EngineError> {
        let steps = self.step_count(horizon)?;
        let mut state = initial;
        let n = state.len();
        if let Some(signal) = controls {
            for schedule in &signal.schedules {
                let ok = state
                    .vehicles
                    .get(schedule.vehicle_id)
                    .is_some_and(|v| v.class_id == AUTONOMOUS);
                if !ok {
                    return Err(EngineError::UncontrollableVehicle(schedule.vehicle_id));
                }
            }
        }
        let mut traj = Trajectory {
            dt: self.dt,
            times: Vec::with_capacity(steps + 1),
            classes: state.vehicles.iter().map(|v| v.class_id).collect(),
            x: Vec::with_capacity(steps + 1),
            v: Vec::with_capacity(steps + 1),
            lanes: Vec::with_capacity(steps + 1),
            events: Vec::new(),
            failure: None,
            diagnostics: Diagnostics::default(),
        };
        let start = state.clock;
        record(&mut traj, &state);
        let mut epochs = vec![0u64; n];
        let mut u = vec![0.0; n];
        let mut buf = StepBuffers::default();
        for k in 0..steps {
            state.clock = start + k as f64 * self.dt;
            if let Err(failure) = self.decision_pass(
                &mut state,
                seed,
                &mut epochs,
                &mut traj.diagnostics,
                &mut traj.events,
            ) {
                traj.failure = Some(failure);
                break;
            }
            u.iter_mut().for_each(|c| *c = 0.0);
            if let Some(signal) = controls {
                signal.values_into(state.clock - start, &mut u);
            }
            let before = state.clone();
            match rk4_step(
                &mut state,
                &self.dynamics,
                &u,
                self.dt,
                self.lane_change.law.accel_bound,
                &mut buf,
            ) {
                Ok(stats) => traj.diagnostics.accel_bound_exceedances += stats.exceedances,
                Err(v) => {
                    traj.failure = Some(Failure::Collision {
                        time: state.clock,
                        follower: v.follower,
                        leader: v.leader,
                        lane: v.lane,
                        gap: v.gap,
                    });
                    break;
                }
            }
            state.clock = start + (k + 1) as f64 * self.dt;
            observer.on_step(&before, &state, &u, self.dt);
            record(&mut traj, &state);
        }
        Ok(traj)
    }
}

fn model_failure(time: f64, vehicle_id: VehicleId, e: ModelError) -> Failure {
    Failure::Model {
        time,
        vehicle_id,
        message: e.to_string(),
    }
}

fn record(traj: &mut Trajectory, state: &HybridState) {
    traj.times.push(state.clock);
    traj.x.push(state.vehicles.iter().map(|v| v.x).collect());
    traj.v.push(state.vehicles.iter().map(|v| v.v).collect());
    traj.lanes
        .push(state.vehicles.iter().map(|v| v.lane).collect());
}
