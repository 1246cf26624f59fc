//! Hydroelectric production physics.
//!
//! Units: volume in hm³, flow in hm³ per dispatch period, power in MW,
//! heights in m. The hm³-per-period to MWh conversion is folded into the
//! efficiency factor `κ`, so `κ` carries MW per (hm³/period · m).
//!
//! With constant forebay height `φ̃`, penstock loss `ς̃` and a linear tailrace
//! `ϑ(q) = θ₀ + θ₁q`, generation is `u(q) = −αq² + βq` with
//! `α = κθ₁` and `β = κ(φ̃ − θ₀ − ς̃)`. The discharge needed for a power level
//! is approximated by its second-order expansion at zero, `q(u) ≈ au² + bu`
//! with `a = α/β³` and `b = 1/β`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HydroError {
    #[error("calibration requires {inequality} (got {detail})")]
    Calibration { inequality: &'static str, detail: String },
    #[error("{quantity} = {value} outside valid range [{min}, {max}]")]
    Domain {
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid reservoir geometry: {0}")]
    Geometry(String),
}

fn domain(quantity: &'static str, value: f64, min: f64, max: f64) -> HydroError {
    HydroError::Domain { quantity, value, min, max }
}

/// Upper-reservoir volume-to-height map `φ(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum GeometryShape {
    /// Height independent of volume.
    Planar { height: f64 },
    /// Constant surface area: `φ(v) = floor + v / area`.
    Cuboidal { floor_height: f64, base_area: f64 },
    /// Surface area growing with volume: `φ(v) = c₀ + c₁√v`, concave and
    /// nondecreasing for `c₁ ≥ 0`.
    Trapezoidal { intercept: f64, sqrt_coefficient: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirGeometry {
    #[serde(flatten)]
    pub shape: GeometryShape,
    pub min_volume: f64,
    pub max_volume: f64,
}

impl ReservoirGeometry {
    pub fn new(shape: GeometryShape, min_volume: f64, max_volume: f64) -> Result<Self, HydroError> {
        let geometry = Self {
            shape,
            min_volume,
            max_volume,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<(), HydroError> {
        if !(self.min_volume >= 0.0 && self.min_volume <= self.max_volume) {
            return Err(HydroError::Geometry(format!(
                "operating range [{}, {}] must satisfy 0 ≤ min ≤ max",
                self.min_volume, self.max_volume
            )));
        }
        match self.shape {
            GeometryShape::Planar { height } if !(height > 0.0) => {
                return Err(HydroError::Geometry(format!("planar height {height} must be positive")));
            }
            GeometryShape::Cuboidal { base_area, .. } if !(base_area > 0.0) => {
                return Err(HydroError::Geometry(format!("base area {base_area} must be positive")));
            }
            GeometryShape::Trapezoidal { sqrt_coefficient, .. } if !(sqrt_coefficient >= 0.0) => {
                return Err(HydroError::Geometry(format!(
                    "square-root coefficient {sqrt_coefficient} must be nonnegative"
                )));
            }
            _ => {}
        }
        let h = self.height_unchecked(self.min_volume);
        if !(h > 0.0) {
            return Err(HydroError::Geometry(format!(
                "height {h} at minimum operating volume must be positive"
            )));
        }
        Ok(())
    }

    /// Least-squares fit of `h = c₀ + c₁√v` to measured `(volume, height)` pairs.
    pub fn fit_trapezoidal(points: &[(f64, f64)], min_volume: f64, max_volume: f64) -> Result<Self, HydroError> {
        if points.len() < 2 {
            return Err(HydroError::Geometry("at least two waypoints are needed".into()));
        }
        if points.iter().any(|&(v, _)| v < 0.0) {
            return Err(HydroError::Geometry("waypoint volumes must be nonnegative".into()));
        }
        let (mut s1, mut sr, mut srr, mut sh, mut srh) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(v, h) in points {
            let r = v.sqrt();
            s1 += 1.0;
            sr += r;
            srr += r * r;
            sh += h;
            srh += r * h;
        }
        let det = s1 * srr - sr * sr;
        if det.abs() < 1e-12 {
            return Err(HydroError::Geometry("waypoints do not determine a fit".into()));
        }
        let sqrt_coefficient = (s1 * srh - sr * sh) / det;
        let intercept = (sh - sqrt_coefficient * sr) / s1;
        Self::new(
            GeometryShape::Trapezoidal {
                intercept,
                sqrt_coefficient,
            },
            min_volume,
            max_volume,
        )
    }

    fn height_unchecked(&self, v: f64) -> f64 {
        match self.shape {
            GeometryShape::Planar { height } => height,
            GeometryShape::Cuboidal { floor_height, base_area } => floor_height + v / base_area,
            GeometryShape::Trapezoidal {
                intercept,
                sqrt_coefficient,
            } => intercept + sqrt_coefficient * v.sqrt(),
        }
    }
}

/// Forebay height `φ(v)` in metres.
pub fn forebay_height(geometry: &ReservoirGeometry, volume: f64) -> Result<f64, HydroError> {
    if !(volume >= geometry.min_volume && volume <= geometry.max_volume) {
        return Err(domain("volume", volume, geometry.min_volume, geometry.max_volume));
    }
    Ok(geometry.height_unchecked(volume))
}

/// Physical description of one plant before calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantPhysics {
    /// Constant efficiency factor κ (ρ·g·ε folded together).
    pub efficiency: f64,
    /// Fixed forebay height φ̃ (m).
    pub forebay_height: f64,
    /// Tailrace intercept θ₀ (m).
    pub tailrace_intercept: f64,
    /// Tailrace slope θ₁ (m per hm³/period).
    pub tailrace_slope: f64,
    /// Penstock head loss ς̃ (m).
    pub head_loss: f64,
    /// Declared generating capacity (MW).
    pub capacity: f64,
}

/// Calibrated coefficients of a plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParameters {
    pub physics: PlantPhysics,
    /// α = κθ₁ (MW per (hm³/period)²).
    pub alpha: f64,
    /// β = κ(φ̃ − θ₀ − ς̃) (MW per hm³/period).
    pub beta: f64,
    /// Quadratic coefficient of the discharge expansion.
    pub a: f64,
    /// Linear coefficient of the discharge expansion.
    pub b: f64,
}

/// Derives `(α, β, a, b)` from the physical description.
pub fn calibrate(physics: &PlantPhysics) -> Result<PlantParameters, HydroError> {
    let PlantPhysics {
        efficiency: kappa,
        forebay_height: phi,
        tailrace_intercept: theta0,
        tailrace_slope: theta1,
        head_loss: sigma,
        capacity,
    } = *physics;
    let fail = |inequality: &'static str, detail: String| Err(HydroError::Calibration { inequality, detail });
    if !(kappa > 0.0) {
        return fail("efficiency factor > 0", format!("κ = {kappa}"));
    }
    if !(phi > theta0) {
        return fail("forebay height > tailrace intercept", format!("φ̃ = {phi}, θ0 = {theta0}"));
    }
    if !(theta0 > sigma) {
        return fail("tailrace intercept > head loss", format!("θ0 = {theta0}, ς̃ = {sigma}"));
    }
    if !(sigma >= 0.0) {
        return fail("head loss >= 0", format!("ς̃ = {sigma}"));
    }
    if !(theta1 >= 0.0) {
        return fail("tailrace slope >= 0", format!("θ1 = {theta1}"));
    }
    if !(capacity >= 0.0) || !capacity.is_finite() {
        return fail("capacity >= 0", format!("capacity = {capacity}"));
    }
    let alpha = kappa * theta1;
    let beta = kappa * (phi - theta0 - sigma);
    if !(beta > 0.0) {
        return fail("net head > 0", format!("β = {beta}"));
    }
    Ok(PlantParameters {
        physics: physics.clone(),
        alpha,
        beta,
        a: alpha / beta.powi(3),
        b: 1.0 / beta,
    })
}

/// Tailrace height `ϑ(q) = θ₀ + θ₁q`.
pub fn tailrace_height(plant: &PlantParameters, discharge: f64) -> Result<f64, HydroError> {
    if !(discharge >= 0.0) {
        return Err(domain("discharge", discharge, 0.0, f64::INFINITY));
    }
    Ok(plant.physics.tailrace_intercept + plant.physics.tailrace_slope * discharge)
}

/// Discharge at the vertex of `u(q)`, where generation stops increasing.
pub fn vertex_discharge(plant: &PlantParameters) -> f64 {
    if plant.alpha > 0.0 {
        plant.beta / (2.0 * plant.alpha)
    } else {
        f64::INFINITY
    }
}

/// Power at the vertex `β²/(4α)`; infinite for impulse turbines.
pub fn vertex_power(plant: &PlantParameters) -> f64 {
    if plant.alpha > 0.0 {
        plant.beta * plant.beta / (4.0 * plant.alpha)
    } else {
        f64::INFINITY
    }
}

/// Generation `u(q) = −αq² + βq` on the increasing branch.
pub fn power_from_discharge(plant: &PlantParameters, discharge: f64) -> Result<f64, HydroError> {
    let q_max = vertex_discharge(plant);
    if !(discharge >= 0.0 && discharge <= q_max) {
        return Err(domain("discharge", discharge, 0.0, q_max));
    }
    Ok(-plant.alpha * discharge * discharge + plant.beta * discharge)
}

/// Smaller root of `−αq² + βq = u`, computed in the cancellation-free form
/// `2u / (β + √(β² − 4αu))`.
pub fn discharge_from_power_exact(plant: &PlantParameters, power: f64) -> Result<f64, HydroError> {
    let u_max = vertex_power(plant);
    if !(power >= 0.0 && power <= u_max) {
        return Err(domain("power", power, 0.0, u_max));
    }
    let disc = (plant.beta * plant.beta - 4.0 * plant.alpha * power).max(0.0);
    Ok(2.0 * power / (plant.beta + disc.sqrt()))
}

/// Second-order discharge expansion `q(u) = au² + bu`.
pub fn discharge_from_power_quadratic(plant: &PlantParameters, power: f64) -> Result<f64, HydroError> {
    if !(power >= 0.0) {
        return Err(domain("power", power, 0.0, f64::INFINITY));
    }
    Ok(plant.a * power * power + plant.b * power)
}

/// Usable generating limit: the declared capacity capped at the vertex.
pub fn max_power(plant: &PlantParameters) -> f64 {
    plant.physics.capacity.min(vertex_power(plant))
}
