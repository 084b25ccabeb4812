//! Empirical measures on position × velocity and the generalized Wasserstein
//! distance `W₁^{a,b}` between positive measures of possibly different mass.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClassId, AUTONOMOUS};
use crate::state::{HybridState, Lane, Topology, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub v: f64,
    pub mass: f64,
}

impl Atom {
    pub fn new(x: f64, v: f64, mass: f64) -> Self {
        Self { x, v, mass }
    }
}

/// Finite weighted sum of Dirac masses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    pub fn from_atoms(atoms: Vec<Atom>) -> Self {
        debug_assert!(atoms.iter().all(|a| a.mass >= 0.0));
        Self { atoms }
    }

    /// Equal weights `1/N` on the given points.
    pub fn empirical(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let pts: Vec<(f64, f64)> = points.into_iter().collect();
        let mass = if pts.is_empty() {
            0.0
        } else {
            1.0 / pts.len() as f64
        };
        Self {
            atoms: pts
                .into_iter()
                .map(|(x, v)| Atom::new(x, v, mass))
                .collect(),
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// Sum of two measures (concatenation of atoms).
    pub fn plus(&self, other: &DiscreteMeasure) -> DiscreteMeasure {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Self { atoms }
    }
}

/// Normalized empirical measure of `class` on `lane`.
pub fn empirical_measure(state: &HybridState, lane: Lane, class: ClassId) -> DiscreteMeasure {
    DiscreteMeasure::empirical(
        state
            .lane(lane)
            .iter()
            .map(|&id| &state.vehicles[id])
            .filter(|veh| veh.class_id == class)
            .map(|veh| (veh.x, veh.v)),
    )
}

/// Normalized empirical measure of `class` over the whole road.
pub fn road_measure(state: &HybridState, class: ClassId) -> DiscreteMeasure {
    DiscreteMeasure::empirical(
        state
            .vehicles
            .iter()
            .filter(|veh| veh.class_id == class)
            .map(|veh| (veh.x, veh.v)),
    )
}

/// Cost parameters of the generalized distance: `creation` is paid per unit of
/// mass created or destroyed, `transport` multiplies the ground distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WassersteinCosts {
    pub creation: f64,
    pub transport: f64,
}

impl Default for WassersteinCosts {
    fn default() -> Self {
        Self {
            creation: 1.0,
            transport: 1.0,
        }
    }
}

/// `W₁^{1,1}` with ground distance `|x₁ - x₂| + |v₁ - v₂|`.
pub fn generalized_wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    generalized_wasserstein_with(mu, nu, WassersteinCosts::default(), &Topology::Open)
}

/// Generalized Wasserstein distance solved exactly as a balanced transportation
/// problem: a slack source supplies created mass, a slack sink absorbs destroyed
/// mass, and slack-to-slack flow is free.
pub fn generalized_wasserstein_with(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: WassersteinCosts,
    topology: &Topology,
) -> f64 {
    let mu_mass = mu.total_mass();
    let nu_mass = nu.total_mass();
    let mut supply: Vec<f64> = mu.atoms.iter().map(|a| a.mass).collect();
    supply.push(nu_mass);
    let mut demand: Vec<f64> = nu.atoms.iter().map(|a| a.mass).collect();
    demand.push(mu_mass);

    let p = supply.len();
    let q = demand.len();
    let mut cost = vec![0.0; p * q];
    for (i, a) in mu.atoms.iter().enumerate() {
        for (j, b) in nu.atoms.iter().enumerate() {
            let ground = topology.position_distance(a.x, b.x) + (a.v - b.v).abs();
            cost[i * q + j] = costs.transport * ground;
        }
        cost[i * q + (q - 1)] = costs.creation;
    }
    for j in 0..q - 1 {
        cost[(p - 1) * q + j] = costs.creation;
    }
    cost[p * q - 1] = 0.0;

    transport_cost(&supply, &demand, &cost).max(0.0)
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum cost of a balanced transportation problem with dense nonnegative
/// costs, by successive shortest augmenting paths with Johnson potentials.
///
/// Nodes: `0` is the source, `1..=p` supplies, `p+1..=p+q` demands, `p+q+1`
/// the sink. Supply→demand arcs are uncapacitated.
fn transport_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let p = supply.len();
    let q = demand.len();
    let total: f64 = supply.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let tol = 1e-13 * total.max(1.0);
    let source = 0;
    let sink = p + q + 1;
    let nodes = p + q + 2;

    let mut rem_supply = supply.to_vec();
    let mut rem_demand = demand.to_vec();
    let mut flow = vec![0.0; p * q];
    let mut potential = vec![0.0; nodes];
    let mut dist = vec![f64::INFINITY; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    let mut shipped = 0.0;

    while total - shipped > tol {
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            dist: 0.0,
            node: source,
        });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            let mut relax = |to: usize, arc_cost: f64, heap: &mut BinaryHeap<HeapEntry>| {
                let reduced = (arc_cost + potential[u] - potential[to]).max(0.0);
                let nd = d + reduced;
                if nd < dist[to] {
                    dist[to] = nd;
                    prev[to] = u;
                    heap.push(HeapEntry { dist: nd, node: to });
                }
            };
            if u == source {
                for i in 0..p {
                    if rem_supply[i] > tol {
                        relax(1 + i, 0.0, &mut heap);
                    }
                }
            } else if u <= p {
                let i = u - 1;
                for j in 0..q {
                    relax(1 + p + j, cost[i * q + j], &mut heap);
                }
            } else if u < sink {
                let j = u - 1 - p;
                if rem_demand[j] > tol {
                    relax(sink, 0.0, &mut heap);
                }
                for i in 0..p {
                    if flow[i * q + j] > tol {
                        relax(1 + i, -cost[i * q + j], &mut heap);
                    }
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        for n in 0..nodes {
            if dist[n].is_finite() {
                potential[n] += dist[n];
            }
        }

        // Bottleneck along the path.
        let mut push = f64::INFINITY;
        let mut node = sink;
        while node != source {
            let from = prev[node];
            if node == sink {
                push = push.min(rem_demand[from - 1 - p]);
            } else if from == source {
                push = push.min(rem_supply[node - 1]);
            } else if from > p {
                // backward arc demand -> supply
                let (i, j) = (node - 1, from - 1 - p);
                push = push.min(flow[i * q + j]);
            }
            node = from;
        }
        let mut node = sink;
        while node != source {
            let from = prev[node];
            if node == sink {
                rem_demand[from - 1 - p] -= push;
            } else if from == source {
                rem_supply[node - 1] -= push;
            } else if from <= p {
                flow[(from - 1) * q + (node - 1 - p)] += push;
            } else {
                flow[(node - 1) * q + (from - 1 - p)] -= push;
            }
            node = from;
        }
        shipped += push;
    }

    flow.iter().zip(cost).map(|(f, c)| f * c).sum()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("autonomous vehicle sets differ: {left:?} vs {right:?}")]
    AutonomousMismatch {
        left: Vec<VehicleId>,
        right: Vec<VehicleId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistanceReport {
    pub av_position_term: f64,
    pub av_velocity_term: f64,
    /// One generalized-Wasserstein term per human-driven class.
    pub measure_terms: Vec<(ClassId, f64)>,
    pub total: f64,
}

impl StateDistanceReport {
    pub fn measure_term(&self, class: ClassId) -> Option<f64> {
        self.measure_terms
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, w)| *w)
    }
}

/// Distance between two hybrid states: AV position/velocity differences plus
/// one generalized Wasserstein term per human class.
///
/// With `per_lane` unset the per-class measures aggregate the whole road;
/// otherwise per-lane normalized measures are compared lane by lane and summed.
pub fn state_distance(
    s1: &HybridState,
    s2: &HybridState,
    per_lane: bool,
) -> Result<StateDistanceReport, MeasureError> {
    let avs1: Vec<VehicleId> = s1.ids_of_class(AUTONOMOUS).collect();
    let avs2: Vec<VehicleId> = s2.ids_of_class(AUTONOMOUS).collect();
    if avs1 != avs2 {
        return Err(MeasureError::AutonomousMismatch {
            left: avs1,
            right: avs2,
        });
    }
    let topology = s1.topology;
    let mut av_position_term = 0.0;
    let mut av_velocity_term = 0.0;
    for &id in &avs1 {
        let (a, b) = (&s1.vehicles[id], &s2.vehicles[id]);
        av_position_term += topology.position_distance(a.x, b.x);
        av_velocity_term += (a.v - b.v).abs();
    }

    let mut classes: Vec<ClassId> = s1
        .vehicles
        .iter()
        .chain(&s2.vehicles)
        .map(|v| v.class_id)
        .filter(|&c| c != AUTONOMOUS)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let costs = WassersteinCosts::default();
    let measure_terms: Vec<(ClassId, f64)> = classes
        .into_iter()
        .map(|class| {
            let w = if per_lane {
                let lanes = s1.lane_count.max(s2.lane_count);
                (1..=lanes)
                    .map(|lane| {
                        let m1 = if lane <= s1.lane_count {
                            empirical_measure(s1, lane, class)
                        } else {
                            DiscreteMeasure::default()
                        };
                        let m2 = if lane <= s2.lane_count {
                            empirical_measure(s2, lane, class)
                        } else {
                            DiscreteMeasure::default()
                        };
                        generalized_wasserstein_with(&m1, &m2, costs, &topology)
                    })
                    .sum()
            } else {
                generalized_wasserstein_with(
                    &road_measure(s1, class),
                    &road_measure(s2, class),
                    costs,
                    &topology,
                )
            };
            (class, w)
        })
        .collect();

    let total =
        av_position_term + av_velocity_term + measure_terms.iter().map(|(_, w)| w).sum::<f64>();
    Ok(StateDistanceReport {
        av_position_term,
        av_velocity_term,
        measure_terms,
        total,
    })
}
