//! Vehicle classes, the optimal-velocity function and the two acceleration laws
//! (pairwise Bando-FtL and its convolutional multi-class form).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::DiscreteMeasure;

/// Index of a vehicle population. Class 0 is the controllable (autonomous) class.
pub type ClassId = usize;

/// The autonomous (controlled) class.
pub const AUTONOMOUS: ClassId = 0;

/// Default safe following distance `d_s`, in meters.
pub const DEFAULT_D_SAFE: f64 = 2.5;

/// Default support radius of the interaction kernels, in meters.
pub const DEFAULT_KERNEL_EPSILON: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative headway {0} passed to the optimal-velocity function")]
    NegativeHeadway(f64),
    #[error("non-positive gap headway {gap}")]
    HeadwayViolation { gap: f64 },
    #[error("average acceleration of class {class} is undefined on an empty measure")]
    EmptyAverage { class: ClassId },
    #[error("no kernel for interaction of class {other} on class {ego}")]
    MissingKernel { other: ClassId, ego: ClassId },
}

/// Physical and behavioral parameters of one vehicle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleClassSpec {
    pub class_id: ClassId,
    #[serde(default)]
    pub name: String,
    /// Vehicle length `l_v`, meters.
    pub length: f64,
    /// Relaxation rate toward the optimal velocity, 1/s.
    pub alpha: f64,
    /// Follow-the-leader gain, m²/s.
    pub beta: f64,
    /// Saturation speed of the optimal-velocity function, m/s.
    pub v_max: f64,
    /// Safe following distance `d_s`, meters.
    #[serde(default = "default_d_safe")]
    pub d_safe: f64,
    /// Per-epoch probability that a vehicle of this class considers a lane
    /// change at all (only used by the simple decision procedure).
    #[serde(default = "default_attempt_probability")]
    pub attempt_probability: f64,
}

fn default_d_safe() -> f64 {
    DEFAULT_D_SAFE
}

fn default_attempt_probability() -> f64 {
    1.0
}

impl VehicleClassSpec {
    pub fn car() -> Self {
        Self {
            class_id: 1,
            name: "car".into(),
            length: 4.5,
            alpha: 0.5,
            beta: 20.0,
            v_max: 5.0,
            d_safe: DEFAULT_D_SAFE,
            attempt_probability: 1.0,
        }
    }

    pub fn truck() -> Self {
        Self {
            class_id: 2,
            name: "truck".into(),
            length: 13.6,
            alpha: 0.25,
            beta: 10.0,
            v_max: 4.5,
            d_safe: DEFAULT_D_SAFE,
            attempt_probability: 1.0,
        }
    }

    /// Autonomous vehicles share the car's physical parameters.
    pub fn autonomous() -> Self {
        Self {
            class_id: AUTONOMOUS,
            name: "autonomous".into(),
            ..Self::car()
        }
    }

    pub fn is_controllable(&self) -> bool {
        self.class_id == AUTONOMOUS
    }

    /// Returns the list of violated invariants as `(field, message)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.length > 0.0) {
            out.push(("length", format!("must be > 0, got {}", self.length)));
        }
        if !(self.v_max > 0.0) {
            out.push(("v_max", format!("must be > 0, got {}", self.v_max)));
        }
        if !(self.alpha >= 0.0) {
            out.push(("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            out.push(("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(self.d_safe >= 0.0) {
            out.push(("d_safe", format!("must be >= 0, got {}", self.d_safe)));
        }
        if !(0.0..=1.0).contains(&self.attempt_probability) {
            out.push((
                "attempt_probability",
                format!("must lie in [0, 1], got {}", self.attempt_probability),
            ));
        }
        out
    }
}

/// `V(h) = v_max (tanh(h - d_s) + tanh(l_v + d_s)) / (1 + tanh(l_v + d_s))`.
pub fn optimal_velocity(h: f64, spec: &VehicleClassSpec) -> Result<f64, ModelError> {
    if h < 0.0 || h.is_nan() {
        return Err(ModelError::NegativeHeadway(h));
    }
    Ok(optimal_velocity_unchecked(
        h,
        spec.length,
        spec.d_safe,
        spec.v_max,
    ))
}

#[inline]
fn optimal_velocity_unchecked(h: f64, length: f64, d_safe: f64, v_max: f64) -> f64 {
    let offset = (length + d_safe).tanh();
    v_max * ((h - d_safe).tanh() + offset) / (1.0 + offset)
}

/// Acceleration of a vehicle without a leader: pure relaxation toward `V(∞) = v_max`.
pub fn free_flow_accel(v: f64, spec: &VehicleClassSpec) -> f64 {
    spec.alpha * (spec.v_max - v)
}

/// Pairwise Bando-FtL acceleration `α (V(h) - v) + β (v_leader - v) / h²`.
pub fn pairwise_accel(
    gap: f64,
    v_ego: f64,
    v_leader: f64,
    spec: &VehicleClassSpec,
) -> Result<f64, ModelError> {
    if !(gap > 0.0) {
        return Err(ModelError::HeadwayViolation { gap });
    }
    let v_opt = optimal_velocity_unchecked(gap, spec.length, spec.d_safe, spec.v_max);
    Ok(spec.alpha * (v_opt - v_ego) + spec.beta * (v_leader - v_ego) / (gap * gap))
}

/// Smooth bump supported on `(-ε, 0)`, peaking at `x = -ε/2`.
pub fn bump_kernel(x: f64, epsilon: f64) -> f64 {
    if !(x > -epsilon && x < 0.0) {
        return 0.0;
    }
    let half = 0.5 * epsilon;
    let inner = half * half - (-x - half) * (-x - half);
    if inner <= 0.0 {
        return 0.0;
    }
    (-1.0 / inner).exp()
}

/// One entry `H^{mn}` of the interaction-kernel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Class whose optimal-velocity function enters the Bando kernel.
    pub velocity_class: ClassId,
}

/// `(M+1) × (M+1)` table of kernels indexed by (other class, ego class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    classes: usize,
    entries: Vec<KernelSpec>,
}

impl KernelTable {
    /// Builds the default table: each ego class uses its own `α`, `β` and `V`
    /// against every other class, autonomous vehicles reuse the row of
    /// `car_class`, and all supports are [`DEFAULT_KERNEL_EPSILON`].
    pub fn from_classes(classes: &[VehicleClassSpec], car_class: ClassId) -> Self {
        let n = classes.len();
        let mut entries = Vec::with_capacity(n * n);
        for _other in 0..n {
            for ego in 0..n {
                let row = if ego == AUTONOMOUS && car_class < n {
                    car_class
                } else {
                    ego
                };
                let spec = &classes[row];
                entries.push(KernelSpec {
                    alpha: spec.alpha,
                    beta: spec.beta,
                    epsilon: DEFAULT_KERNEL_EPSILON,
                    velocity_class: row,
                });
            }
        }
        Self {
            classes: n,
            entries,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn get(&self, other: ClassId, ego: ClassId) -> Option<&KernelSpec> {
        if other >= self.classes || ego >= self.classes {
            return None;
        }
        self.entries.get(other * self.classes + ego)
    }

    pub fn set(
        &mut self,
        other: ClassId,
        ego: ClassId,
        kernel: KernelSpec,
    ) -> Result<(), ModelError> {
        if other >= self.classes || ego >= self.classes {
            return Err(ModelError::MissingKernel { other, ego });
        }
        self.entries[other * self.classes + ego] = kernel;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, ClassId, &KernelSpec)> {
        let n = self.classes;
        self.entries
            .iter()
            .enumerate()
            .map(move |(i, k)| (i / n, i % n, k))
    }
}

/// Signed offset `x_ego - y` mapped into `(-L, 0]` on a ring of length `L`, so
/// that vehicles ahead of the ego sit at negative offsets.
#[inline]
pub fn relative_offset(x_ego: f64, y: f64, ring: Option<f64>) -> f64 {
    let d = x_ego - y;
    match ring {
        Some(len) => {
            let r = d.rem_euclid(len);
            if r > 0.0 {
                r - len
            } else {
                r
            }
        }
        None => d,
    }
}

/// Contribution `(H₁ ∗₁ δ + H₂ ∗ δ)(x, v)` of a single unit atom at relative
/// offset `d = x - y` and atom velocity `w`.
#[inline]
fn kernel_response(
    d: f64,
    v: f64,
    w: f64,
    kernel: &KernelSpec,
    vel_spec: &VehicleClassSpec,
) -> f64 {
    let weight = bump_kernel(d, kernel.epsilon);
    if weight == 0.0 {
        return 0.0;
    }
    let v_opt = optimal_velocity_unchecked(-d, vel_spec.length, vel_spec.d_safe, vel_spec.v_max);
    let bando = kernel.alpha * weight * (v_opt - v);
    // H₂ is convolved in both variables, so its velocity argument is v - w.
    let ftl = kernel.beta * weight * (-(v - w)) / (d * d);
    bando + ftl
}

/// Convolutional Bando-FtL acceleration of an ego at `(x, v)` of class `ego_class`.
///
/// `lane_measures[m]` is the (normalized) empirical measure of class `m` on the
/// ego's lane; atoms at offsets outside the kernel support contribute nothing.
pub fn conv_accel(
    x: f64,
    v: f64,
    ego_class: ClassId,
    lane_measures: &[DiscreteMeasure],
    kernels: &KernelTable,
    classes: &[VehicleClassSpec],
    ring: Option<f64>,
) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for (other, measure) in lane_measures.iter().enumerate() {
        if measure.is_empty() {
            continue;
        }
        let kernel = kernels
            .get(other, ego_class)
            .ok_or(ModelError::MissingKernel {
                other,
                ego: ego_class,
            })?;
        let vel_spec = &classes[kernel.velocity_class];
        for atom in measure.atoms() {
            let d = relative_offset(x, atom.x, ring);
            acc += atom.mass * kernel_response(d, v, atom.v, kernel, vel_spec);
        }
    }
    Ok(acc)
}

/// Mass-weighted mean of [`conv_accel`] over the atoms of `class`'s measure:
/// the average acceleration of that population on the lane.
pub fn average_accel(
    class: ClassId,
    lane_measures: &[DiscreteMeasure],
    kernels: &KernelTable,
    classes: &[VehicleClassSpec],
    ring: Option<f64>,
) -> Result<f64, ModelError> {
    let measure = lane_measures
        .get(class)
        .filter(|m| !m.is_empty() && m.total_mass() > 0.0)
        .ok_or(ModelError::EmptyAverage { class })?;
    let mut weighted = 0.0;
    for atom in measure.atoms() {
        weighted +=
            atom.mass * conv_accel(atom.x, atom.v, class, lane_measures, kernels, classes, ring)?;
    }
    Ok(weighted / measure.total_mass())
}
