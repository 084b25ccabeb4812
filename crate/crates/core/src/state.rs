//! Hybrid state: every vehicle's continuous state plus its lane label, with
//! per-lane orderings kept in sync.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClassId;

/// Vehicle identifier; equal to the vehicle's index in [`HybridState::vehicles`].
pub type VehicleId = usize;

/// Lane label in `1..=L`.
pub type Lane = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Closed ring; every lane has the same length.
    Ring { length: f64 },
    /// Unbounded straight road with a fixed population.
    Open,
}

impl Topology {
    pub fn ring_length(&self) -> Option<f64> {
        match *self {
            Topology::Ring { length } => Some(length),
            Topology::Open => None,
        }
    }

    /// Distance travelled forward from `from` to reach `to`.
    ///
    /// On a ring this lies in `[0, L)`; on an open road it may be negative.
    #[inline]
    pub fn forward_distance(&self, from: f64, to: f64) -> f64 {
        match *self {
            Topology::Ring { length } => (to - from).rem_euclid(length),
            Topology::Open => to - from,
        }
    }

    /// Ground distance between two positions (shortest way round on a ring).
    pub fn position_distance(&self, a: f64, b: f64) -> f64 {
        match *self {
            Topology::Ring { length } => {
                let d = (a - b).rem_euclid(length);
                d.min(length - d)
            }
            Topology::Open => (a - b).abs(),
        }
    }

    pub fn wrap(&self, x: f64) -> f64 {
        match *self {
            Topology::Ring { length } => {
                let w = x.rem_euclid(length);
                // rem_euclid can round up to exactly `length`
                if w >= length {
                    0.0
                } else {
                    w
                }
            }
            Topology::Open => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub class_id: ClassId,
    pub length: f64,
    /// Front-bumper position, meters.
    pub x: f64,
    /// Velocity, m/s (never negative).
    pub v: f64,
    pub lane: Lane,
    /// Cool-down timer, seconds.
    pub timer: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("vehicle ids must equal their index (position {index} holds id {id})")]
    BadId { index: usize, id: VehicleId },
    #[error("vehicle {id} is on lane {lane}, outside 1..={lanes}")]
    BadLane {
        id: VehicleId,
        lane: Lane,
        lanes: usize,
    },
    #[error("vehicle {id} has negative velocity {v}")]
    NegativeVelocity { id: VehicleId, v: f64 },
    #[error("vehicles {a} and {b} share lane {lane} at x = {x}")]
    Colocated {
        a: VehicleId,
        b: VehicleId,
        lane: Lane,
        x: f64,
    },
    #[error(
        "non-positive gap {gap} between vehicle {follower} and its leader {leader} on lane {lane}"
    )]
    Overlap {
        follower: VehicleId,
        leader: VehicleId,
        lane: Lane,
        gap: f64,
    },
    #[error("lane count must be at least 1")]
    NoLanes,
}

/// Neighbors of a position on a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbors {
    pub leader: Option<VehicleId>,
    pub follower: Option<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub clock: f64,
    pub topology: Topology,
    pub lane_count: usize,
    pub vehicles: Vec<VehicleState>,
    /// `lane_orderings[k - 1]` lists the vehicles on lane `k` by ascending `x`.
    lane_orderings: Vec<Vec<VehicleId>>,
}

impl HybridState {
    /// Builds a state, wrapping ring positions and sorting every lane.
    pub fn new(
        topology: Topology,
        lane_count: usize,
        mut vehicles: Vec<VehicleState>,
    ) -> Result<Self, StateError> {
        if lane_count == 0 {
            return Err(StateError::NoLanes);
        }
        for (index, veh) in vehicles.iter_mut().enumerate() {
            if veh.id != index {
                return Err(StateError::BadId { index, id: veh.id });
            }
            if veh.lane == 0 || veh.lane > lane_count {
                return Err(StateError::BadLane {
                    id: veh.id,
                    lane: veh.lane,
                    lanes: lane_count,
                });
            }
            if veh.v < 0.0 || veh.v.is_nan() {
                return Err(StateError::NegativeVelocity {
                    id: veh.id,
                    v: veh.v,
                });
            }
            veh.x = topology.wrap(veh.x);
        }
        let mut state = Self {
            clock: 0.0,
            topology,
            lane_count,
            vehicles,
            lane_orderings: vec![Vec::new(); lane_count],
        };
        state.rebuild_orderings();
        state.check_exclusion()?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn ring_length(&self) -> Option<f64> {
        self.topology.ring_length()
    }

    pub fn lane(&self, lane: Lane) -> &[VehicleId] {
        &self.lane_orderings[lane - 1]
    }

    pub fn lanes(&self) -> impl Iterator<Item = (Lane, &[VehicleId])> {
        self.lane_orderings
            .iter()
            .enumerate()
            .map(|(i, ids)| (i + 1, ids.as_slice()))
    }

    pub fn rebuild_orderings(&mut self) {
        for ordering in &mut self.lane_orderings {
            ordering.clear();
        }
        for veh in &self.vehicles {
            self.lane_orderings[veh.lane - 1].push(veh.id);
        }
        let vehicles = &self.vehicles;
        for ordering in &mut self.lane_orderings {
            ordering.sort_by(|&a, &b| vehicles[a].x.total_cmp(&vehicles[b].x).then(a.cmp(&b)));
        }
    }

    /// Moves a vehicle to another lane, keeping both orderings sorted.
    pub(crate) fn move_to_lane(&mut self, id: VehicleId, lane: Lane) {
        let from = self.vehicles[id].lane;
        self.lane_orderings[from - 1].retain(|&other| other != id);
        self.vehicles[id].lane = lane;
        let x = self.vehicles[id].x;
        let vehicles = &self.vehicles;
        let ordering = &mut self.lane_orderings[lane - 1];
        let at = ordering
            .partition_point(|&other| vehicles[other].x.total_cmp(&x).then(other.cmp(&id)).is_lt());
        ordering.insert(at, id);
    }

    /// Leader and follower of a point at `x` on `lane`, ignoring `exclude`.
    ///
    /// On a ring with at least one (other) vehicle both neighbors exist and may
    /// coincide. A vehicle sitting exactly at `x` counts as the leader.
    pub fn neighbors_in_lane(&self, lane: Lane, x: f64, exclude: Option<VehicleId>) -> Neighbors {
        let ordering = &self.lane_orderings[lane - 1];
        let candidates = |i: usize| -> Option<VehicleId> {
            let id = ordering[i];
            (Some(id) != exclude).then_some(id)
        };
        let n = ordering.len();
        let at = ordering.partition_point(|&id| self.vehicles[id].x < x);
        let mut leader = None;
        for k in 0..n {
            let i = at + k;
            if i >= n && self.topology.ring_length().is_none() {
                break;
            }
            if let Some(id) = candidates(i % n) {
                leader = Some(id);
                break;
            }
        }
        let mut follower = None;
        for k in 1..=n {
            if at < k && self.topology.ring_length().is_none() {
                break;
            }
            let i = (at + n - k) % n;
            if let Some(id) = candidates(i) {
                follower = Some(id);
                break;
            }
        }
        Neighbors { leader, follower }
    }

    /// Leader of a vehicle in its own lane, if any.
    pub fn leader_of(&self, id: VehicleId) -> Option<VehicleId> {
        let veh = &self.vehicles[id];
        let ordering = &self.lane_orderings[veh.lane - 1];
        let pos = ordering.iter().position(|&o| o == id)?;
        if pos + 1 < ordering.len() {
            Some(ordering[pos + 1])
        } else if self.topology.ring_length().is_some() {
            Some(ordering[0])
        } else {
            None
        }
    }

    /// Gap headway from a front bumper at `x` to the rear bumper of `leader`. A vehicle that is its own leader (alone on a
    /// ring) sees the full ring.
    pub fn gap_to(&self, x: f64, leader: VehicleId, self_id: Option<VehicleId>) -> f64 {
        let lead = &self.vehicles[leader];
        let mut dist = self.topology.forward_distance(x, lead.x);
        if Some(leader) == self_id {
            if let Some(len) = self.ring_length() {
                dist = len;
            }
        }
        dist - lead.length
    }

    /// Checks the exclusion invariant: no two vehicles co-located on a lane
    /// and every same-lane gap headway strictly positive.
    pub fn check_exclusion(&self) -> Result<(), StateError> {
        for (lane, ordering) in self.lanes() {
            let n = ordering.len();
            for i in 0..n {
                let id = ordering[i];
                let leader = if i + 1 < n {
                    ordering[i + 1]
                } else if self.ring_length().is_some() {
                    ordering[0]
                } else {
                    continue;
                };
                if leader != id && self.vehicles[leader].x == self.vehicles[id].x {
                    return Err(StateError::Colocated {
                        a: id,
                        b: leader,
                        lane,
                        x: self.vehicles[id].x,
                    });
                }
                let gap = self.gap_to(self.vehicles[id].x, leader, Some(id));
                if !(gap > 0.0) {
                    return Err(StateError::Overlap {
                        follower: id,
                        leader,
                        lane,
                        gap,
                    });
                }
            }
        }
        Ok(())
    }

    /// Minimum same-lane gap headway over the whole road (`+∞` if none).
    pub fn min_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        for id in 0..self.len() {
            if let Some(leader) = self.leader_of(id) {
                best = best.min(self.gap_to(self.vehicles[id].x, leader, Some(id)));
            }
        }
        best
    }

    pub fn count_in_lane(&self, lane: Lane, class: ClassId) -> usize {
        self.lane(lane)
            .iter()
            .filter(|&&id| self.vehicles[id].class_id == class)
            .count()
    }

    pub fn ids_of_class(&self, class: ClassId) -> impl Iterator<Item = VehicleId> + '_ {
        self.vehicles
            .iter()
            .filter(move |v| v.class_id == class)
            .map(|v| v.id)
    }
}
