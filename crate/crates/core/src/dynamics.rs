//! Acceleration field of the whole road under either car-following law.

use serde::{Deserialize, Serialize};

use crate::measures::{Atom, DiscreteMeasure};
use crate::model::{
    conv_accel, free_flow_accel, pairwise_accel, ClassId, KernelTable, ModelError, VehicleClassSpec,
};
use crate::state::{HybridState, Lane, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSwitch {
    /// Leader-follower Bando-FtL with relative-velocity FtL term.
    #[default]
    Pairwise,
    /// Kernel convolution against per-lane, per-class empirical measures.
    Convolutional,
}

/// A same-lane headway that became non-positive.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadwayViolation {
    pub follower: VehicleId,
    pub leader: VehicleId,
    pub lane: Lane,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    /// Indexed by class id.
    pub classes: Vec<VehicleClassSpec>,
    pub kernels: KernelTable,
    pub model: ModelSwitch,
}

impl Dynamics {
    pub fn new(classes: Vec<VehicleClassSpec>, kernels: KernelTable, model: ModelSwitch) -> Self {
        Self {
            classes,
            kernels,
            model,
        }
    }

    pub fn class(&self, class: ClassId) -> &VehicleClassSpec {
        &self.classes[class]
    }

    /// Per-class empirical measures of one lane, with positions shifted by
    /// `dx` and velocities taken from `vs`.
    fn lane_measures(
        &self,
        state: &HybridState,
        lane: Lane,
        dx: &[f64],
        vs: &[f64],
    ) -> Vec<DiscreteMeasure> {
        let ids = state.lane(lane);
        let mut counts = vec![0usize; self.classes.len()];
        for &id in ids {
            counts[state.vehicles[id].class_id] += 1;
        }
        let mut atoms: Vec<Vec<Atom>> = vec![Vec::new(); self.classes.len()];
        for &id in ids {
            let veh = &state.vehicles[id];
            let mass = 1.0 / counts[veh.class_id] as f64;
            atoms[veh.class_id].push(Atom::new(veh.x + dx[id], vs[id], mass));
        }
        atoms.into_iter().map(DiscreteMeasure::from_atoms).collect()
    }

    /// Model accelerations (no control) of every vehicle at positions
    /// `state.x + dx` and velocities `vs`, using the lane orderings of `state`.
    pub fn accelerations(
        &self,
        state: &HybridState,
        dx: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) -> Result<(), HeadwayViolation> {
        let ring = state.ring_length();
        for (lane, ids) in state.lanes() {
            let n = ids.len();
            if n == 0 {
                continue;
            }
            for (k, &id) in ids.iter().enumerate() {
                let leader = if k + 1 < n {
                    Some(ids[k + 1])
                } else if ring.is_some() {
                    Some(ids[0])
                } else {
                    None
                };
                let veh = &state.vehicles[id];
                let spec = &self.classes[veh.class_id];
                match leader {
                    Some(lid) => {
                        let gap = state.gap_to(veh.x, lid, Some(id)) + dx[lid] - dx[id];
                        if !(gap > 0.0) {
                            return Err(HeadwayViolation {
                                follower: id,
                                leader: lid,
                                lane,
                                gap,
                            });
                        }
                        if self.model == ModelSwitch::Pairwise {
                            // gap > 0 was checked above
                            out[id] = pairwise_accel(gap, vs[id], vs[lid], spec).unwrap_or(0.0);
                        }
                    }
                    None => {
                        if self.model == ModelSwitch::Pairwise {
                            out[id] = free_flow_accel(vs[id], spec);
                        }
                    }
                }
            }
            if self.model == ModelSwitch::Convolutional {
                let measures = self.lane_measures(state, lane, dx, vs);
                for &id in ids {
                    let veh = &state.vehicles[id];
                    out[id] = conv_accel(
                        veh.x + dx[id],
                        vs[id],
                        veh.class_id,
                        &measures,
                        &self.kernels,
                        &self.classes,
                        ring,
                    )
                    .map_err(|_| HeadwayViolation {
                        follower: id,
                        leader: id,
                        lane,
                        gap: 0.0,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Model acceleration of a single vehicle in `state`.
    pub fn accel_of(&self, state: &HybridState, id: VehicleId) -> Result<f64, ModelError> {
        let veh = &state.vehicles[id];
        let spec = &self.classes[veh.class_id];
        match self.model {
            ModelSwitch::Pairwise => {
                match state.neighbors_in_lane(veh.lane, veh.x, Some(id)).leader {
                    Some(lid) => {
                        let gap = state.gap_to(veh.x, lid, Some(id));
                        pairwise_accel(gap, veh.v, state.vehicles[lid].v, spec)
                    }
                    None if state.ring_length().is_some() => {
                        // alone on a ring: own leader at one full lap
                        pairwise_accel(state.gap_to(veh.x, id, Some(id)), veh.v, veh.v, spec)
                    }
                    None => Ok(free_flow_accel(veh.v, spec)),
                }
            }
            ModelSwitch::Convolutional => {
                let zeros = vec![0.0; state.len()];
                let vs: Vec<f64> = state.vehicles.iter().map(|v| v.v).collect();
                let measures = self.lane_measures(state, veh.lane, &zeros, &vs);
                conv_accel(
                    veh.x,
                    veh.v,
                    veh.class_id,
                    &measures,
                    &self.kernels,
                    &self.classes,
                    state.ring_length(),
                )
            }
        }
    }

    /// Average convolutional acceleration of `class` on `lane`.
    pub fn lane_average(
        &self,
        state: &HybridState,
        lane: Lane,
        class: ClassId,
    ) -> Result<f64, ModelError> {
        let zeros = vec![0.0; state.len()];
        let vs: Vec<f64> = state.vehicles.iter().map(|v| v.v).collect();
        let measures = self.lane_measures(state, lane, &zeros, &vs);
        crate::model::average_accel(
            class,
            &measures,
            &self.kernels,
            &self.classes,
            state.ring_length(),
        )
    }
}
