//! Incentive and safety conditions, the lane-change probability laws and the
//! per-vehicle decision procedure run at each cool-down epoch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Dynamics;
use crate::model::{ClassId, ModelError, AUTONOMOUS};
use crate::state::{HybridState, Lane, VehicleId};

/// Tolerance used when comparing a timer against the cool-down time.
pub const TIMER_EPS: f64 = 1e-9;

/// Which family of conditions a decision uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// One threshold `Δ` for everybody; a per-class attempt probability is
    /// drawn before the checks.
    #[default]
    Simple,
    /// Class-pair thresholds; the probability is assembled from the
    /// positive parts of the condition margins after the checks pass.
    Typed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Individual accelerations of the ego and its prospective follower.
    #[default]
    Finite,
    /// Human-driven classes decide on lane-average accelerations.
    MeanField,
}

/// Lane-change thresholds, all in m/s².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// `incentive[ego][follower]`.
    pub incentive: Vec<Vec<f64>>,
    /// `safety[class]`.
    pub safety: Vec<f64>,
    /// Single threshold of the simple conditions.
    pub simple: f64,
}

impl ThresholdTable {
    pub const DEFAULT_INCENTIVE: f64 = 0.5;
    pub const DEFAULT_SAFETY: f64 = 2.0;
    pub const DEFAULT_SIMPLE: f64 = 0.5;

    pub fn uniform(classes: usize, incentive: f64, safety: f64, simple: f64) -> Self {
        Self {
            incentive: vec![vec![incentive; classes]; classes],
            safety: vec![safety; classes],
            simple,
        }
    }

    pub fn defaults(classes: usize) -> Self {
        Self::uniform(
            classes,
            Self::DEFAULT_INCENTIVE,
            Self::DEFAULT_SAFETY,
            Self::DEFAULT_SIMPLE,
        )
    }

    /// Smallest threshold of the table.
    pub fn min_threshold(&self) -> f64 {
        self.incentive
            .iter()
            .flatten()
            .chain(&self.safety)
            .copied()
            .fold(self.simple, f64::min)
    }

    pub fn violations(&self, classes: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.incentive.len() != classes || self.incentive.iter().any(|row| row.len() != classes)
        {
            out.push((
                "thresholds.incentive".into(),
                format!("must be a {classes}x{classes} table"),
            ));
        }
        if self.safety.len() != classes {
            out.push((
                "thresholds.safety".into(),
                format!("must have {classes} entries"),
            ));
        }
        for (i, row) in self.incentive.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                if !(d > 0.0) {
                    out.push((
                        format!("thresholds.incentive[{i}][{j}]"),
                        format!("must be > 0, got {d}"),
                    ));
                }
            }
        }
        for (i, &d) in self.safety.iter().enumerate() {
            if !(d > 0.0) {
                out.push((
                    format!("thresholds.safety[{i}]"),
                    format!("must be > 0, got {d}"),
                ));
            }
        }
        if !(self.simple > 0.0) {
            out.push((
                "thresholds.simple".into(),
                format!("must be > 0, got {}", self.simple),
            ));
        }
        out
    }
}

/// Parameters of the three probability laws `p_j(b) = (1 - exp(-γ_j Π bᵢ)) / C_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityLaw {
    pub gamma: [f64; 3],
    /// Uniform acceleration bound `M`, m/s².
    pub accel_bound: f64,
}

impl Default for ProbabilityLaw {
    fn default() -> Self {
        Self {
            gamma: [1.0; 3],
            accel_bound: 10.0,
        }
    }
}

impl ProbabilityLaw {
    /// Upper end `2M - Δ` of the argument box, with `Δ = min(M, thresholds)`.
    pub fn box_edge(&self, thresholds: &ThresholdTable) -> f64 {
        let delta = thresholds.min_threshold().min(self.accel_bound);
        2.0 * self.accel_bound - delta
    }

    /// `C_j = 1 - exp(-γ_j (2M - Δ)⁵)` for law `j ∈ {1, 2, 3}`.
    pub fn normalizer(&self, j: usize, thresholds: &ThresholdTable) -> f64 {
        let edge = self.box_edge(thresholds);
        -(-self.gamma[j - 1] * edge.powi(5)).exp_m1()
    }

    /// Evaluates `p_j` at `b`, clamped to `[0, 1]`.
    pub fn probability(&self, j: usize, b: [f64; 5], thresholds: &ThresholdTable) -> f64 {
        probability(b, self.gamma[j - 1], self.normalizer(j, thresholds))
    }
}

/// `(1/C)(1 - exp(-γ b₁b₂b₃b₄b₅))`, clamped to `[0, 1]`.
pub fn probability(b: [f64; 5], gamma: f64, normalizer: f64) -> f64 {
    let product: f64 = b.iter().product();
    if product <= 0.0 {
        return 0.0;
    }
    let raw = -(-gamma * product).exp_m1() / normalizer;
    raw.clamp(0.0, 1.0)
}

#[inline]
fn pos(r: f64) -> f64 {
    if r > 0.0 {
        r
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeParams {
    pub mode: ConditionMode,
    pub regime: Regime,
    pub thresholds: ThresholdTable,
    pub law: ProbabilityLaw,
    /// Minimum gap headway required at insertion, meters.
    pub gap_margin: f64,
    /// Cool-down time between decision epochs, seconds.
    pub tau_bar: f64,
    /// Reference human classes of the probability formulas.
    pub car_class: ClassId,
    pub truck_class: ClassId,
}

impl LaneChangeParams {
    pub const DEFAULT_GAP_MARGIN: f64 = 1.0;

    pub fn with_defaults(classes: usize) -> Self {
        Self {
            mode: ConditionMode::Simple,
            regime: Regime::Finite,
            thresholds: ThresholdTable::defaults(classes),
            law: ProbabilityLaw::default(),
            gap_margin: Self::DEFAULT_GAP_MARGIN,
            tau_bar: 1.0,
            car_class: 1,
            truck_class: 2,
        }
    }
}

/// Record of a lane-change decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeEvent {
    pub vehicle_id: VehicleId,
    pub from_lane: Lane,
    pub to_lane: Lane,
    pub time: f64,
    /// Uniform draw compared against `probability`.
    pub drawn_probability: f64,
    pub probability: f64,
    pub accepted: bool,
}

/// Expected accelerations if the ego moved to the target lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedAccel {
    pub ego: f64,
    /// Prospective follower and its acceleration with the ego as leader.
    pub follower: Option<(VehicleId, f64)>,
}

/// Copy of `state` with `id` moved to `target` at unchanged `(x, v)`.
pub fn hypothetical(state: &HybridState, id: VehicleId, target: Lane) -> HybridState {
    let mut hyp = state.clone();
    hyp.move_to_lane(id, target);
    hyp
}

pub fn expected_accel_after_move(
    state: &HybridState,
    dynamics: &Dynamics,
    id: VehicleId,
    target: Lane,
) -> Result<ExpectedAccel, ModelError> {
    let hyp = hypothetical(state, id, target);
    let ego = dynamics.accel_of(&hyp, id)?;
    let follower = hyp
        .neighbors_in_lane(target, hyp.vehicles[id].x, Some(id))
        .follower;
    let follower = match follower {
        Some(f) => Some((f, dynamics.accel_of(&hyp, f)?)),
        None => None,
    };
    Ok(ExpectedAccel { ego, follower })
}

impl ExpectedAccel {
    /// Both accelerations saturated to `[-bound, bound]`.
    pub fn saturated(self, bound: f64) -> Self {
        Self {
            ego: self.ego.clamp(-bound, bound),
            follower: self.follower.map(|(f, a)| (f, a.clamp(-bound, bound))),
        }
    }
}

/// Current acceleration and expected accelerations after moving to `target`,
/// saturated to the law's acceleration bound `M`.
fn decision_accels(
    state: &HybridState,
    dynamics: &Dynamics,
    params: &LaneChangeParams,
    id: VehicleId,
    target: Lane,
) -> Result<(f64, ExpectedAccel), ModelError> {
    let m = params.law.accel_bound;
    let a_current = dynamics.accel_of(state, id)?.clamp(-m, m);
    let expected = expected_accel_after_move(state, dynamics, id, target)?.saturated(m);
    Ok((a_current, expected))
}

/// True iff inserting `id` into `target` leaves gap headways of at least
/// `gap_margin` (and strictly positive) to both the new leader and follower.
pub fn room_in_lane(state: &HybridState, id: VehicleId, target: Lane, gap_margin: f64) -> bool {
    let ego = &state.vehicles[id];
    let nb = state.neighbors_in_lane(target, ego.x, Some(id));
    if let Some(leader) = nb.leader {
        let gap = state.gap_to(ego.x, leader, None);
        if !(gap > 0.0 && gap >= gap_margin) {
            return false;
        }
    }
    if let Some(follower) = nb.follower {
        let dist = state
            .topology
            .forward_distance(state.vehicles[follower].x, ego.x);
        let gap = dist - ego.length;
        if !(gap > 0.0 && gap >= gap_margin) {
            return false;
        }
    }
    true
}

pub fn incentive_ok(
    a_bar: f64,
    a_current: f64,
    ego_class: ClassId,
    follower_class: Option<ClassId>,
    table: &ThresholdTable,
    mode: ConditionMode,
) -> bool {
    let delta = match mode {
        ConditionMode::Simple => table.simple,
        ConditionMode::Typed => match follower_class {
            Some(f) => table.incentive[ego_class][f],
            // no follower: the strictest entry of the ego's row
            None => table.incentive[ego_class]
                .iter()
                .copied()
                .fold(f64::MIN, f64::max),
        },
    };
    a_bar >= a_current + delta
}

pub fn safety_ok(
    a_bar: f64,
    follower: Option<(ClassId, f64)>,
    ego_class: ClassId,
    table: &ThresholdTable,
    mode: ConditionMode,
) -> bool {
    let (ego_delta, follower_delta) = match mode {
        ConditionMode::Simple => (table.simple, follower.map(|_| table.simple)),
        ConditionMode::Typed => (
            table.safety[ego_class],
            follower.map(|(c, _)| table.safety[c]),
        ),
    };
    let follower_ok = match (follower, follower_delta) {
        (Some((_, a_f)), Some(d)) => a_f >= -d,
        _ => true,
    };
    a_bar >= -ego_delta && follower_ok
}

/// Five product arguments of the finite-regime probability for an ego of
/// class `ego_class`. An absent follower contributes zero acceleration.
pub fn finite_arguments(
    a_bar: f64,
    a_current: f64,
    follower_accel: Option<f64>,
    ego_class: ClassId,
    params: &LaneChangeParams,
) -> [f64; 5] {
    let t = &params.thresholds;
    let (car, truck) = (params.car_class, params.truck_class);
    let a_f = follower_accel.unwrap_or(0.0);
    [
        pos(a_bar - a_current - t.incentive[ego_class][car]),
        pos(a_bar - a_current - t.incentive[ego_class][truck]),
        pos(a_bar + t.safety[ego_class]),
        pos(a_f + t.safety[car]),
        pos(a_f + t.safety[truck]),
    ]
}

/// Lane-average accelerations entering the mean-field probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneAverages {
    /// Average acceleration of the ego's own class on its current lane.
    pub own_current: f64,
    /// Car and truck averages on the current lane.
    pub car_current: f64,
    pub truck_current: f64,
    /// Car and truck averages on the target lane.
    pub car_target: f64,
    pub truck_target: f64,
}

/// Five product arguments of the mean-field probability.
///
/// Human classes compare target-lane averages with their own class average;
/// autonomous vehicles keep their individual expected acceleration `a_bar`.
pub fn mean_field_arguments(
    a_bar: f64,
    ego_class: ClassId,
    averages: &LaneAverages,
    params: &LaneChangeParams,
) -> [f64; 5] {
    let t = &params.thresholds;
    let (car, truck) = (params.car_class, params.truck_class);
    if ego_class == AUTONOMOUS {
        [
            pos(a_bar - averages.car_current - t.incentive[ego_class][car]),
            pos(a_bar - averages.truck_current - t.incentive[ego_class][truck]),
            pos(a_bar + t.safety[ego_class]),
            pos(averages.truck_target + t.safety[truck]),
            pos(averages.car_target + t.safety[truck]),
        ]
    } else {
        [
            pos(averages.car_target - averages.own_current - t.incentive[ego_class][car]),
            pos(averages.truck_target - averages.own_current - t.incentive[ego_class][truck]),
            pos(averages.car_target + t.safety[car]),
            pos(averages.truck_target + t.safety[truck]),
            pos(averages.truck_target + t.safety[truck]),
        ]
    }
}

/// Law index used by a class in a regime.
pub fn law_index(ego_class: ClassId, regime: Regime, params: &LaneChangeParams) -> usize {
    match (regime, ego_class) {
        (Regime::MeanField, AUTONOMOUS) => 3,
        (_, c) if c == params.truck_class => 2,
        _ => 1,
    }
}

fn average_or_zero(
    dynamics: &Dynamics,
    state: &HybridState,
    lane: Lane,
    class: ClassId,
    bound: f64,
) -> Result<f64, ModelError> {
    match dynamics.lane_average(state, lane, class) {
        Ok(a) => Ok(a.clamp(-bound, bound)),
        Err(ModelError::EmptyAverage { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Lane-change probability of `id` toward `target` under the typed
/// conditions; zero whenever the room, incentive or safety check fails.
pub fn lane_change_probability(
    state: &HybridState,
    dynamics: &Dynamics,
    params: &LaneChangeParams,
    id: VehicleId,
    target: Lane,
    regime: Regime,
) -> Result<f64, ModelError> {
    if !room_in_lane(state, id, target, params.gap_margin) {
        return Ok(0.0);
    }
    let veh = &state.vehicles[id];
    let (a_current, expected) = decision_accels(state, dynamics, params, id, target)?;
    let follower_class = expected.follower.map(|(f, _)| state.vehicles[f].class_id);
    let follower = expected
        .follower
        .map(|(f, a)| (state.vehicles[f].class_id, a));
    let t = &params.thresholds;
    if !incentive_ok(
        expected.ego,
        a_current,
        veh.class_id,
        follower_class,
        t,
        ConditionMode::Typed,
    ) || !safety_ok(
        expected.ego,
        follower,
        veh.class_id,
        t,
        ConditionMode::Typed,
    ) {
        return Ok(0.0);
    }
    let args = match regime {
        Regime::Finite => finite_arguments(
            expected.ego,
            a_current,
            expected.follower.map(|(_, a)| a),
            veh.class_id,
            params,
        ),
        Regime::MeanField => {
            let from = veh.lane;
            let m = params.law.accel_bound;
            let averages = LaneAverages {
                own_current: average_or_zero(dynamics, state, from, veh.class_id, m)?,
                car_current: average_or_zero(dynamics, state, from, params.car_class, m)?,
                truck_current: average_or_zero(dynamics, state, from, params.truck_class, m)?,
                car_target: average_or_zero(dynamics, state, target, params.car_class, m)?,
                truck_target: average_or_zero(dynamics, state, target, params.truck_class, m)?,
            };
            mean_field_arguments(expected.ego, veh.class_id, &averages, params)
        }
    };
    let j = law_index(veh.class_id, regime, params);
    Ok(params.law.probability(j, args, t))
}

/// Adjacent lanes of `lane` that exist on a road of `lane_count` lanes.
pub fn adjacent_lanes(lane: Lane, lane_count: usize) -> Vec<Lane> {
    let mut out = Vec::with_capacity(2);
    if lane > 1 {
        out.push(lane - 1);
    }
    if lane < lane_count {
        out.push(lane + 1);
    }
    out
}

fn random_lane<R: Rng>(lane: Lane, lane_count: usize, rng: &mut R) -> Option<Lane> {
    let options = adjacent_lanes(lane, lane_count);
    match options.len() {
        0 => None,
        1 => Some(options[0]),
        n => Some(options[rng.gen_range(0..n)]),
    }
}

/// One decision epoch for vehicle `id`.
///
/// Returns `None` when no decision is taken (timer below the cool-down time,
/// no adjacent lane, or the simple-mode attempt draw failed); otherwise an
/// event whose `accepted` flag tells whether the change happens. The caller
/// is responsible for resetting the timer and applying accepted events.
pub fn attempt_lane_change<R: Rng>(
    state: &HybridState,
    dynamics: &Dynamics,
    params: &LaneChangeParams,
    id: VehicleId,
    rng: &mut R,
) -> Result<Option<LaneChangeEvent>, ModelError> {
    let veh = &state.vehicles[id];
    if veh.timer < params.tau_bar - TIMER_EPS {
        return Ok(None);
    }
    let from = veh.lane;
    let event = |to_lane, drawn, probability, accepted| LaneChangeEvent {
        vehicle_id: id,
        from_lane: from,
        to_lane,
        time: state.clock,
        drawn_probability: drawn,
        probability,
        accepted,
    };
    match params.mode {
        ConditionMode::Simple => {
            let p = dynamics.class(veh.class_id).attempt_probability;
            let draw: f64 = rng.gen();
            if !(draw < p) {
                return Ok(None);
            }
            let Some(target) = random_lane(from, state.lane_count, rng) else {
                return Ok(None);
            };
            if !room_in_lane(state, id, target, params.gap_margin) {
                return Ok(Some(event(target, draw, p, false)));
            }
            let (a_current, expected) = decision_accels(state, dynamics, params, id, target)?;
            let follower = expected
                .follower
                .map(|(f, a)| (state.vehicles[f].class_id, a));
            let t = &params.thresholds;
            let ok = safety_ok(
                expected.ego,
                follower,
                veh.class_id,
                t,
                ConditionMode::Simple,
            ) && incentive_ok(
                expected.ego,
                a_current,
                veh.class_id,
                None,
                t,
                ConditionMode::Simple,
            );
            Ok(Some(event(target, draw, p, ok)))
        }
        ConditionMode::Typed => {
            let Some(target) = random_lane(from, state.lane_count, rng) else {
                return Ok(None);
            };
            let p = lane_change_probability(state, dynamics, params, id, target, params.regime)?;
            let draw: f64 = rng.gen();
            Ok(Some(event(target, draw, p, draw < p)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelSwitch;
    use crate::model::{KernelTable, VehicleClassSpec};
    use crate::state::{Topology, VehicleState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classes() -> Vec<VehicleClassSpec> {
        vec![
            VehicleClassSpec::autonomous(),
            VehicleClassSpec::car(),
            VehicleClassSpec::truck(),
        ]
    }

    fn dynamics(model: ModelSwitch) -> Dynamics {
        let c = classes();
        let k = KernelTable::from_classes(&c, 1);
        Dynamics::new(c, k, model)
    }

    fn veh(id: usize, class_id: usize, lane: Lane, x: f64, v: f64) -> VehicleState {
        let length = if class_id == 2 { 13.6 } else { 4.5 };
        VehicleState {
            id,
            class_id,
            length,
            x,
            v,
            lane,
            timer: 1.0,
        }
    }

    fn typed_table() -> ThresholdTable {
        // incentive[ego][follower]: Δcc = 0.1 (car, car), Δtc = 0.2 (car ego, truck follower),
        // Δct = 0.3 (truck ego, car follower), Δtt = 0.4; AV row mirrors the car row.
        let mut t = ThresholdTable::uniform(3, 1.0, 2.0, 0.5);
        for ego in [0, 1] {
            t.incentive[ego][0] = 0.1;
            t.incentive[ego][1] = 0.1;
            t.incentive[ego][2] = 0.2;
        }
        t.incentive[2][0] = 0.3;
        t.incentive[2][1] = 0.3;
        t.incentive[2][2] = 0.4;
        t.safety = vec![1.0, 1.0, 1.5];
        t
    }

    #[test]
    fn incentive_inclusive_and_simple() {
        let t = ThresholdTable::uniform(3, 0.5, 2.0, 0.5);
        assert!(incentive_ok(
            1.5,
            1.0,
            1,
            Some(1),
            &t,
            ConditionMode::Simple
        ));
        assert!(!incentive_ok(
            1.0,
            1.0,
            1,
            Some(1),
            &t,
            ConditionMode::Simple
        ));
        assert!(!incentive_ok(
            1.0,
            1.0,
            1,
            Some(1),
            &t,
            ConditionMode::Typed
        ));
    }

    #[test]
    fn incentive_typed_truth_table() {
        let t = typed_table();
        let cases = [
            (1, 1, 0.1),
            (1, 2, 0.2),
            (2, 1, 0.3),
            (2, 2, 0.4),
            (0, 1, 0.1),
            (0, 2, 0.2),
            (1, 0, 0.1),
            (2, 0, 0.3),
        ];
        for (ego, follower, delta) in cases {
            for gain in [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45] {
                assert_eq!(
                    incentive_ok(
                        -1.0 + gain,
                        -1.0,
                        ego,
                        Some(follower),
                        &t,
                        ConditionMode::Typed
                    ),
                    -1.0 + gain >= -1.0 + delta,
                    "ego {ego} follower {follower} gain {gain}"
                );
            }
        }
        // exact threshold is accepted
        assert!(incentive_ok(0.3, 0.0, 2, Some(1), &t, ConditionMode::Typed));
    }

    #[test]
    fn safety_cases() {
        let t = typed_table();
        assert!(safety_ok(-1.0, None, 1, &t, ConditionMode::Typed));
        assert!(safety_ok(
            -1.0,
            Some((2, -1.5)),
            1,
            &t,
            ConditionMode::Typed
        ));
        assert!(!safety_ok(
            -1.0,
            Some((1, -1.01)),
            1,
            &t,
            ConditionMode::Typed
        ));
        assert!(!safety_ok(-1.51, None, 2, &t, ConditionMode::Typed));
        assert!(safety_ok(-0.5, None, 1, &t, ConditionMode::Simple));
        assert!(!safety_ok(
            0.0,
            Some((1, -0.6)),
            1,
            &t,
            ConditionMode::Simple
        ));
    }

    #[test]
    fn probability_edges() {
        let t = ThresholdTable::defaults(3);
        let law = ProbabilityLaw::default();
        for j in 1..=3 {
            for k in 0..5 {
                let mut b = [1.0; 5];
                b[k] = 0.0;
                assert_eq!(law.probability(j, b, &t), 0.0);
            }
            let edge = law.box_edge(&t);
            assert!((law.probability(j, [edge; 5], &t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_matches_formula_oracle() {
        // M = 1, Δ = 0.5: edge 1.5, C = 1 - e^{-1.5^5}; p(1,...,1) = (1 - e^{-1}) / C.
        let t = ThresholdTable::uniform(3, 0.5, 0.5, 0.5);
        let law = ProbabilityLaw {
            gamma: [1.0; 3],
            accel_bound: 1.0,
        };
        let c = 1.0 - (-(1.5f64).powi(5)).exp();
        assert!((law.normalizer(1, &t) - c).abs() < 1e-15);
        let expected = (1.0 - (-1.0f64).exp()) / c;
        assert!((law.probability(1, [1.0; 5], &t) - expected).abs() < 1e-15);
        assert!((expected - 0.632439048207861217936924126208).abs() < 1e-15);
    }

    #[test]
    fn room_checks() {
        let s = HybridState::new(
            Topology::Ring { length: 200.0 },
            2,
            vec![
                veh(0, 1, 1, 50.0, 3.0),
                veh(1, 1, 2, 60.0, 3.0),
                veh(2, 1, 2, 100.0, 3.0),
            ],
        )
        .unwrap();
        let margin = 1.0;
        // leader gap = 60 - 50 - 4.5 = 5.5, follower gap = 50 - 100 + 200 - 4.5
        assert!(room_in_lane(&s, 0, 2, margin));
        let empty = HybridState::new(Topology::Open, 2, vec![veh(0, 1, 1, 0.0, 1.0)]).unwrap();
        assert!(room_in_lane(&empty, 0, 2, margin));
        // follower-to-ego gap exactly zero
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![veh(0, 1, 1, 54.5, 1.0), veh(1, 1, 2, 50.0, 1.0)],
        )
        .unwrap();
        assert!(!room_in_lane(&s, 0, 2, 0.0));
        // gap = margin / 2 fails, gap = 2 margin passes
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![veh(0, 1, 1, 50.0, 1.0), veh(1, 1, 2, 55.0, 1.0)],
        )
        .unwrap();
        assert!(!room_in_lane(&s, 0, 2, 1.0));
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![veh(0, 1, 1, 50.0, 1.0), veh(1, 1, 2, 56.5, 1.0)],
        )
        .unwrap();
        assert!(room_in_lane(&s, 0, 2, 1.0));
    }

    #[test]
    fn expected_accel_on_empty_open_lane_is_free_flow() {
        let d = dynamics(ModelSwitch::Pairwise);
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![veh(0, 1, 1, 0.0, 3.0), veh(1, 1, 1, 10.0, 1.0)],
        )
        .unwrap();
        let e = expected_accel_after_move(&s, &d, 0, 2).unwrap();
        assert_eq!(e.ego, 0.5 * (5.0 - 3.0));
        assert_eq!(e.follower, None);
    }

    /// Independent insertion oracle for the pairwise model.
    fn oracle_expected(s: &HybridState, id: usize, target: Lane) -> (f64, Option<(usize, f64)>) {
        let c = classes();
        let ego = &s.vehicles[id];
        let others: Vec<&VehicleState> = s
            .vehicles
            .iter()
            .filter(|v| v.lane == target && v.id != id)
            .collect();
        let len = s.ring_length();
        let ahead = |from: f64, to: f64| match len {
            Some(l) => (to - from).rem_euclid(l),
            None => to - from,
        };
        let leader = others
            .iter()
            .filter(|o| ahead(ego.x, o.x) >= 0.0)
            .min_by(|a, b| ahead(ego.x, a.x).total_cmp(&ahead(ego.x, b.x)));
        let follower = others
            .iter()
            .filter(|o| ahead(o.x, ego.x) > 0.0)
            .min_by(|a, b| ahead(a.x, ego.x).total_cmp(&ahead(b.x, ego.x)));
        let accel = |v: &VehicleState, lead: Option<(f64, f64, f64)>| {
            let spec = &c[v.class_id];
            match lead {
                None => spec.alpha * (spec.v_max - v.v),
                Some((lx, lv, ll)) => {
                    let h = ahead(v.x, lx) - ll;
                    let t = (spec.length + spec.d_safe).tanh();
                    let vopt = spec.v_max * ((h - spec.d_safe).tanh() + t) / (1.0 + t);
                    spec.alpha * (vopt - v.v) + spec.beta * (lv - v.v) / (h * h)
                }
            }
        };
        let a_ego = accel(ego, leader.map(|l| (l.x, l.v, l.length)));
        let a_f = follower.map(|f| (f.id, accel(f, Some((ego.x, ego.v, ego.length)))));
        (a_ego, a_f)
    }

    #[test]
    fn expected_accel_matches_insertion_oracle() {
        let d = dynamics(ModelSwitch::Pairwise);
        let s = HybridState::new(
            Topology::Ring { length: 300.0 },
            2,
            vec![
                veh(0, 1, 1, 100.0, 3.0),
                veh(1, 2, 2, 130.0, 2.5),
                veh(2, 1, 2, 70.0, 4.0),
                veh(3, 1, 1, 150.0, 3.0),
            ],
        )
        .unwrap();
        let e = expected_accel_after_move(&s, &d, 0, 2).unwrap();
        let (ego, follower) = oracle_expected(&s, 0, 2);
        assert!((e.ego - ego).abs() < 1e-12);
        let (fid, fa) = e.follower.unwrap();
        assert_eq!(fid, follower.unwrap().0);
        assert!((fa - follower.unwrap().1).abs() < 1e-12);
    }

    #[test]
    fn slower_close_leader_lowers_expected_accel() {
        let d = dynamics(ModelSwitch::Pairwise);
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![
                veh(0, 1, 1, 0.0, 4.0),
                veh(1, 1, 1, 40.0, 4.0),
                veh(2, 1, 2, 8.0, 1.0),
            ],
        )
        .unwrap();
        let now = d.accel_of(&s, 0).unwrap();
        let e = expected_accel_after_move(&s, &d, 0, 2).unwrap();
        assert!(e.ego < now);
        let t = ThresholdTable::defaults(3);
        assert!(!incentive_ok(
            e.ego,
            now,
            1,
            None,
            &t,
            ConditionMode::Simple
        ));
    }

    #[test]
    fn finite_probability_matches_bracket_oracle() {
        let d = dynamics(ModelSwitch::Pairwise);
        let mut params = LaneChangeParams::with_defaults(3);
        params.mode = ConditionMode::Typed;
        params.thresholds = ThresholdTable::uniform(3, 0.05, 3.0, 0.5);
        params.law = ProbabilityLaw {
            gamma: [0.01, 0.01, 0.01],
            accel_bound: 4.0,
        };
        // Ego crawls behind a close slow leader; the target lane is open ahead.
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![
                veh(0, 1, 1, 0.0, 2.0),
                veh(1, 1, 1, 7.0, 1.0),
                veh(2, 2, 2, -30.0, 3.0),
            ],
        )
        .unwrap();
        let p = lane_change_probability(&s, &d, &params, 0, 2, Regime::Finite).unwrap();
        let (a_bar, follower) = oracle_expected(&s, 0, 2);
        let a_now = {
            let spec = VehicleClassSpec::car();
            let h: f64 = 7.0 - 4.5;
            let t = (spec.length + spec.d_safe).tanh();
            let vopt = spec.v_max * ((h - spec.d_safe).tanh() + t) / (1.0 + t);
            spec.alpha * (vopt - 2.0) + spec.beta * (1.0 - 2.0) / (h * h)
        };
        let a_f = follower.unwrap().1;
        let b = [
            (a_bar - a_now - 0.05).max(0.0),
            (a_bar - a_now - 0.05).max(0.0),
            (a_bar + 3.0).max(0.0),
            (a_f + 3.0).max(0.0),
            (a_f + 3.0).max(0.0),
        ];
        let edge: f64 = 2.0 * 4.0 - 0.05;
        let expected = (1.0 - (-0.01 * b.iter().product::<f64>()).exp())
            / (1.0 - (-0.01 * edge.powi(5)).exp());
        assert!(p > 0.0);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }

    #[test]
    fn probability_gated_by_conditions() {
        let d = dynamics(ModelSwitch::Pairwise);
        let mut params = LaneChangeParams::with_defaults(3);
        params.mode = ConditionMode::Typed;
        params.thresholds = ThresholdTable::uniform(3, 25.0, 3.0, 0.5);
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![
                veh(0, 1, 1, 0.0, 2.0),
                veh(1, 1, 1, 7.0, 1.0),
                veh(2, 2, 2, -30.0, 3.0),
            ],
        )
        .unwrap();
        for regime in [Regime::Finite, Regime::MeanField] {
            assert_eq!(
                lane_change_probability(&s, &d, &params, 0, 2, regime).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn decisions_see_accelerations_saturated_to_the_bound() {
        let d = dynamics(ModelSwitch::Pairwise);
        let mut params = LaneChangeParams::with_defaults(3);
        let m = params.law.accel_bound;
        // fast car 1 m behind a stopped one: raw acceleration far below -M
        let s = HybridState::new(
            Topology::Open,
            2,
            vec![veh(0, 1, 1, 0.0, 4.0), veh(1, 1, 1, 5.5, 0.0)],
        )
        .unwrap();
        assert!(d.accel_of(&s, 0).unwrap() < -2.0 * m);
        let (a_current, expected) = decision_accels(&s, &d, &params, 0, 2).unwrap();
        assert_eq!(a_current, -m);
        assert!(expected.ego <= m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        params.thresholds = ThresholdTable::uniform(3, 2.0 * m + 0.1, 2.0 * m + 0.1, 2.0 * m + 0.1);
        for mode in [ConditionMode::Simple, ConditionMode::Typed] {
            params.mode = mode;
            for _ in 0..20 {
                let e = attempt_lane_change(&s, &d, &params, 0, &mut rng).unwrap();
                assert!(e.map_or(true, |e| !e.accepted));
            }
        }
        params.thresholds = ThresholdTable::uniform(3, 0.5, 2.0, 0.5);
        params.mode = ConditionMode::Simple;
        let accepted = (0..20).any(|_| {
            attempt_lane_change(&s, &d, &params, 0, &mut rng)
                .unwrap()
                .is_some_and(|e| e.accepted)
        });
        assert!(accepted);
    }

    #[test]
    fn mean_field_reduces_to_individual_values_with_one_vehicle_per_class() {
        let d = dynamics(ModelSwitch::Convolutional);
        let s = HybridState::new(
            Topology::Ring { length: 500.0 },
            2,
            vec![
                veh(0, 1, 1, 0.0, 3.0),
                veh(1, 2, 1, 40.0, 2.0),
                veh(2, 1, 2, 100.0, 3.5),
                veh(3, 2, 2, 150.0, 3.0),
            ],
        )
        .unwrap();
        for (id, lane, class) in [(0, 1, 1), (1, 1, 2), (2, 2, 1), (3, 2, 2)] {
            let avg = d.lane_average(&s, lane, class).unwrap();
            let ind = d.accel_of(&s, id).unwrap();
            assert!((avg - ind).abs() < 1e-14);
        }
        // With individual values equal to the averages, the car's mean-field
        // incentive factors are the finite ones taken against those averages.
        let params = LaneChangeParams::with_defaults(3);
        let averages = LaneAverages {
            own_current: d.accel_of(&s, 0).unwrap(),
            car_current: d.accel_of(&s, 0).unwrap(),
            truck_current: d.accel_of(&s, 1).unwrap(),
            car_target: d.accel_of(&s, 2).unwrap(),
            truck_target: d.accel_of(&s, 3).unwrap(),
        };
        let mf = mean_field_arguments(0.0, 1, &averages, &params);
        let fin = finite_arguments(
            averages.car_target,
            averages.own_current,
            Some(averages.truck_target),
            1,
            &params,
        );
        assert_eq!(mf[0], fin[0]);
        assert_eq!(mf[2], fin[2]);
        assert_eq!(mf[3], fin[4]);
        // Autonomous p3 arguments with the AV's own acceleration equal to both
        // current-lane averages coincide with the finite incentive factors.
        let av = LaneAverages {
            car_current: 0.2,
            truck_current: 0.2,
            ..averages
        };
        let mf = mean_field_arguments(1.0, AUTONOMOUS, &av, &params);
        let fin = finite_arguments(1.0, 0.2, None, AUTONOMOUS, &params);
        assert_eq!(&mf[..3], &fin[..3]);
    }

    #[test]
    fn law_selection() {
        let p = LaneChangeParams::with_defaults(3);
        assert_eq!(law_index(1, Regime::Finite, &p), 1);
        assert_eq!(law_index(0, Regime::Finite, &p), 1);
        assert_eq!(law_index(2, Regime::Finite, &p), 2);
        assert_eq!(law_index(2, Regime::MeanField, &p), 2);
        assert_eq!(law_index(0, Regime::MeanField, &p), 3);
    }

    #[test]
    fn attempt_respects_cooldown_and_lane_count() {
        let d = dynamics(ModelSwitch::Pairwise);
        let params = LaneChangeParams::with_defaults(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = veh(0, 1, 1, 0.0, 3.0);
        v.timer = 0.5;
        let s = HybridState::new(Topology::Ring { length: 100.0 }, 2, vec![v]).unwrap();
        assert_eq!(
            attempt_lane_change(&s, &d, &params, 0, &mut rng).unwrap(),
            None
        );
        let single = HybridState::new(
            Topology::Ring { length: 100.0 },
            1,
            vec![veh(0, 1, 1, 0.0, 3.0)],
        )
        .unwrap();
        assert_eq!(
            attempt_lane_change(&single, &d, &params, 0, &mut rng).unwrap(),
            None
        );
    }

    #[test]
    fn seeded_attempt_moves_to_faster_lane() {
        // Ego is stuck 3 m behind a crawling leader on lane 1; lane 2 is empty.
        let d = dynamics(ModelSwitch::Pairwise);
        let params = LaneChangeParams::with_defaults(3);
        let s = HybridState::new(
            Topology::Ring { length: 300.0 },
            2,
            vec![veh(0, 1, 1, 0.0, 3.0), veh(1, 1, 1, 7.5, 0.5)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let event = attempt_lane_change(&s, &d, &params, 0, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(event.to_lane, 2);
        assert!(event.accepted);
        assert!(event.drawn_probability < 1.0);
    }

    #[test]
    fn grid_monotonicity_of_probability() {
        let t = ThresholdTable::defaults(3);
        let law = ProbabilityLaw {
            gamma: [0.5, 1.0, 2.0],
            accel_bound: 1.0,
        };
        let edge = law.box_edge(&t);
        let grid: Vec<f64> = (0..5).map(|k| edge * k as f64 / 4.0).collect();
        for j in 1..=3 {
            for idx in 0..5usize.pow(5) {
                let digits: Vec<usize> = (0..5).map(|k| (idx / 5usize.pow(k)) % 5).collect();
                let b: [f64; 5] = std::array::from_fn(|k| grid[digits[k]]);
                let p = law.probability(j, b, &t);
                assert!((0.0..=1.0).contains(&p));
                for k in 0..5 {
                    if digits[k] < 4 {
                        let mut up = b;
                        up[k] = grid[digits[k] + 1];
                        assert!(law.probability(j, up, &t) >= p);
                    }
                }
            }
        }
    }
}
