//! Angles on the circle group, the finite rotation subgroup spanned by the
//! beam spacing, and the losses used to regress rotations.
//!
//! Angles are stored in radians; degrees only appear at API boundaries.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::{Add, Neg, Sub};

use crate::{Error, Result};

/// An element of SO(2), normalized into `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn from_radians(rad: f64) -> Self {
        let mut r = rad.rem_euclid(TAU);
        // rem_euclid can round a tiny negative input up to exactly TAU.
        if r >= TAU {
            r -= TAU;
        }
        Angle(r)
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::from_radians(deg.to_radians())
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }

    /// Unsigned shortest angular distance, in radians within `[0, π]`.
    pub fn distance(self, other: Angle) -> f64 {
        let d = (self.0 - other.0).abs();
        d.min(TAU - d)
    }

    pub fn distance_degrees(self, other: Angle) -> f64 {
        self.distance(other).to_degrees()
    }

    pub fn unit(self) -> UnitVec {
        UnitVec {
            re: self.0.cos(),
            im: self.0.sin(),
        }
    }
}

impl Add for Angle {
    type Output = Angle;
    fn add(self, rhs: Angle) -> Angle {
        Angle::from_radians(self.0 + rhs.0)
    }
}

impl Neg for Angle {
    type Output = Angle;
    fn neg(self) -> Angle {
        Angle::from_radians(-self.0)
    }
}

impl Sub for Angle {
    type Output = Angle;
    fn sub(self, rhs: Angle) -> Angle {
        Angle::from_radians(self.0 - rhs.0)
    }
}

impl fmt::Display for Angle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}°", self.degrees())
    }
}

/// Group operation `a +₃₆₀ b`.
pub fn angle_add(a: Angle, b: Angle) -> Angle {
    a + b
}

/// A point on the unit circle, `re + i·im`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec {
    pub re: f64,
    pub im: f64,
}

impl UnitVec {
    /// Normalizes `(re, im)` to unit length. Fails on the zero vector or on
    /// non-finite input.
    pub fn normalize(re: f64, im: f64) -> Result<Self> {
        let n = re.hypot(im);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::DomainError(format!(
                "cannot normalize ({re}, {im}) to the unit circle"
            )));
        }
        Ok(UnitVec {
            re: re / n,
            im: im / n,
        })
    }

    /// `atan2(im, re)` folded into `[0°, 360°)`.
    pub fn arg(self) -> Angle {
        Angle::from_radians(self.im.atan2(self.re))
    }

    pub fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// The cyclic subgroup of SO(2) generated by `360° / order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiniteRotationGroup {
    order: usize,
}

impl FiniteRotationGroup {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::DomainError("rotation group order must be ≥ 1".into()));
        }
        Ok(Self { order })
    }

    pub fn order(self) -> usize {
        self.order
    }

    /// Angular step between neighbouring elements, in degrees.
    pub fn step_degrees(self) -> f64 {
        360.0 / self.order as f64
    }

    pub fn element(self, k: usize) -> Angle {
        k_to_theta(k % self.order, self.order)
    }

    pub fn elements(self) -> impl Iterator<Item = Angle> {
        (0..self.order).map(move |k| self.element(k))
    }

    pub fn index_of(self, theta: Angle) -> Result<usize> {
        theta_to_k(theta, self.order)
    }
}

/// `k · 360° / order`.
pub fn k_to_theta(k: usize, order: usize) -> Angle {
    Angle::from_degrees(k as f64 * 360.0 / order as f64)
}

/// Inverse of [`k_to_theta`]. The angle has to be a multiple of the group
/// step up to 1e-9 degrees.
pub fn theta_to_k(theta: Angle, order: usize) -> Result<usize> {
    if order == 0 {
        return Err(Error::DomainError("rotation group order must be ≥ 1".into()));
    }
    let exact = theta.degrees() * order as f64 / 360.0;
    let k = exact.round();
    let residual_deg = (exact - k).abs() * 360.0 / order as f64;
    if residual_deg > 1e-9 {
        return Err(Error::NotInSubgroup {
            degrees: theta.degrees(),
            order,
        });
    }
    Ok((k as usize) % order)
}

/// Squared error between the ground-truth point `(cos θ, sin θ)` and the
/// prediction. Lies in `[0, 4]` for unit predictions and equals
/// `2 − 2 cos Δ` for an angular error `Δ`.
pub fn circle_loss(theta: Angle, z: UnitVec) -> f64 {
    let (s, c) = theta.radians().sin_cos();
    (s - z.im).powi(2) + (c - z.re).powi(2)
}

/// Partial derivatives `[∂/∂θ, ∂/∂re, ∂/∂im]` of [`circle_loss`], with θ in
/// radians.
///
/// Differentiating `(sin θ − im)² + (cos θ − re)²` gives
/// `∂/∂θ = 2[re·sin θ − im·cos θ]`, `∂/∂re = −2(cos θ − re)` and
/// `∂/∂im = −2(sin θ − im)`.
pub fn circle_loss_grad(theta: Angle, z: UnitVec) -> [f64; 3] {
    let (s, c) = theta.radians().sin_cos();
    [
        2.0 * (z.re * s - z.im * c),
        -2.0 * (c - z.re),
        -2.0 * (s - z.im),
    ]
}

/// The angular error, in degrees, whose unit-vector prediction produces
/// circle loss `loss`: `arccos(1 − loss/2)`.
pub fn loss_to_degrees(loss: f64) -> Result<f64> {
    if !(0.0..=4.0).contains(&loss) {
        return Err(Error::DomainError(format!(
            "circle loss {loss} outside [0, 4]"
        )));
    }
    Ok((1.0 - loss / 2.0).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Cross-entropy `−Σ t_i ln p_i` between a target distribution (one-hot in
/// practice) and a predicted distribution over the discrete rotations.
pub fn prior_loss(target: &[f64], p: &[f64]) -> Result<f64> {
    if target.len() != p.len() {
        return Err(Error::ShapeMismatch(format!(
            "prior target has {} entries, prediction {}",
            target.len(),
            p.len()
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::DomainError(format!(
            "prediction sums to {total}, expected 1"
        )));
    }
    let mut loss = 0.0;
    for (&t, &q) in target.iter().zip(p) {
        if t == 0.0 {
            continue;
        }
        if q <= 0.0 {
            return Err(Error::DegenerateDistribution(q));
        }
        loss -= t * q.ln();
    }
    Ok(loss)
}

/// One-hot vector of length `order` with the hot entry at `k`.
pub fn one_hot(k: usize, order: usize) -> Vec<f64> {
    let mut v = vec![0.0; order];
    v[k % order] = 1.0;
    v
}

/// How the circle and prior terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    CircleOnly,
    Sum,
    /// `(1 − 1/e)·circle + (1/e)·prior` for the 1-based epoch `e`.
    Dynamic,
}

impl LossMode {
    /// `(circle weight, prior weight)` at the 1-based `epoch`.
    pub fn weights(self, epoch: usize) -> (f64, f64) {
        match self {
            LossMode::CircleOnly => (1.0, 0.0),
            LossMode::Sum => (1.0, 1.0),
            LossMode::Dynamic => {
                let inv = 1.0 / epoch.max(1) as f64;
                (1.0 - inv, inv)
            }
        }
    }

    pub fn uses_prior(self) -> bool {
        !matches!(self, LossMode::CircleOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::CircleOnly => "circle_only",
            LossMode::Sum => "sum",
            LossMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle_only" => Ok(LossMode::CircleOnly),
            "sum" => Ok(LossMode::Sum),
            "dynamic" => Ok(LossMode::Dynamic),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

/// Combined objective for one sample. `prior` carries the one-hot target and
/// the predicted distribution; it may be omitted only in `CircleOnly` mode.
pub fn total_loss(
    theta: Angle,
    z: UnitVec,
    prior: Option<(&[f64], &[f64])>,
    mode: LossMode,
    epoch: usize,
) -> Result<f64> {
    let circle = circle_loss(theta, z);
    let (wc, wp) = mode.weights(epoch);
    if !mode.uses_prior() {
        return Ok(circle);
    }
    let (target, p) = prior.ok_or_else(|| {
        Error::DomainError(format!("loss mode {} needs a prior distribution", mode.name()))
    })?;
    let prior = prior_loss(target, p)?;
    Ok(wc * circle + wp * prior)
}

/// Angular error between a prediction and the truth, in degrees within
/// `[0, 180]`.
pub fn angular_error_degrees(theta: Angle, z: UnitVec) -> f64 {
    theta.distance_degrees(z.arg())
}
