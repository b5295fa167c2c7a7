//! User distance-threshold model.
//!
//! Each arriving user draws a maximum travel distance from a half-normal
//! distribution truncated at `dist_max` and discretized onto the grid's
//! distance classes. The user then takes one of the nearest available
//! vehicles if it lies within the threshold, or leaves.

use libm::{erf, erfc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::DistanceClassTable;

pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e7);
pub const SIGMA_TOL: f64 = 1e-4;
pub const MAX_BISECTION_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChoiceError {
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("p0 must lie in (0, 1], got {0}")]
    InvalidP0(f64),
    #[error("p0 = {p0} is not achievable on these distance classes; achievable range is ({low:.6}, {high:.6})")]
    Infeasible { p0: f64, low: f64, high: f64 },
    #[error("distance class table has no classes")]
    EmptyClasses,
}

/// Probability of each distance class as the user's threshold bin, and the
/// matching survival function. Alternative choice models plug in here.
pub trait ChoiceModel {
    /// `class_probs()[l]` is `Pr(dist_l <= threshold < dist_{l+1})`.
    fn class_probs(&self) -> &[f64];
    /// `survival()[l]` is `Pr(threshold >= dist_l)`.
    fn survival(&self) -> &[f64];
}

/// Discretized, truncated half-normal threshold distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDistribution {
    /// Zero encodes the concentration limit (all mass on the own cell).
    pub sigma: f64,
    pub p0: f64,
    pub dist_max: f64,
    pub boundaries: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub survival: Vec<f64>,
}

impl ChoiceModel for ThresholdDistribution {
    fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    fn survival(&self) -> &[f64] {
        &self.survival
    }
}

/// `F(b) - F(a)` for a half-normal with scale `sigma`, `0 <= a <= b`.
/// Uses whichever of erf / erfc keeps the difference well conditioned.
fn half_normal_mass(a: f64, b: f64, sigma: f64) -> f64 {
    let scale = sigma * std::f64::consts::SQRT_2;
    let (za, zb) = (a / scale, b / scale);
    if za < 1.0 {
        erf(zb) - erf(za)
    } else {
        erfc(za) - erfc(zb)
    }
}

fn suffix_sums(probs: &[f64]) -> Vec<f64> {
    let mut survival = vec![0.0; probs.len()];
    let mut acc = 0.0;
    for l in (0..probs.len()).rev() {
        acc += probs[l];
        survival[l] = acc;
    }
    if let Some(first) = survival.first_mut() {
        *first = 1.0;
    }
    survival
}

fn normalize(mut probs: Vec<f64>) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

fn bin_masses(sigma: f64, boundaries: &[f64]) -> Vec<f64> {
    let dist_max = *boundaries.last().expect("boundaries nonempty");
    let truncated = half_normal_mass(0.0, dist_max, sigma);
    let raw = boundaries
        .windows(2)
        .map(|w| half_normal_mass(w[0], w[1], sigma) / truncated)
        .collect();
    // the division already sums to one analytically; this absorbs rounding
    normalize(raw)
}

impl ThresholdDistribution {
    /// Discretize a half-normal with scale `sigma` onto `classes`.
    pub fn from_sigma(sigma: f64, classes: &DistanceClassTable) -> Result<Self, ChoiceError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ChoiceError::InvalidSigma(sigma));
        }
        if classes.class_count() == 0 {
            return Err(ChoiceError::EmptyClasses);
        }
        let boundaries = classes.boundaries();
        let class_probs = if classes.class_count() == 1 || classes.dist_max() <= 0.0 {
            vec![1.0]
        } else {
            bin_masses(sigma, &boundaries)
        };
        let survival = suffix_sums(&class_probs);
        Ok(Self {
            sigma,
            p0: class_probs[0],
            dist_max: classes.dist_max(),
            boundaries,
            class_probs,
            survival,
        })
    }

    /// Users never leave their own cell.
    pub fn own_cell_only(classes: &DistanceClassTable) -> Self {
        let mut class_probs = vec![0.0; classes.class_count().max(1)];
        class_probs[0] = 1.0;
        let survival = suffix_sums(&class_probs);
        Self {
            sigma: 0.0,
            p0: 1.0,
            dist_max: classes.dist_max(),
            boundaries: classes.boundaries(),
            class_probs,
            survival,
        }
    }

    /// Solve for the scale whose first-bin mass is `p0`. `p0 == 1` yields the
    /// concentration limit.
    pub fn from_p0(p0: f64, classes: &DistanceClassTable, tol: f64) -> Result<Self, ChoiceError> {
        if p0 == 1.0 {
            return Ok(Self::own_cell_only(classes));
        }
        let sigma = solve_sigma(p0, classes, tol)?;
        let mut dist = Self::from_sigma(sigma, classes)?;
        dist.p0 = dist.class_probs[0];
        Ok(dist)
    }

    pub fn class_count(&self) -> usize {
        self.class_probs.len()
    }

    /// Draw the threshold bin of one user.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.class_for_uniform(u)
    }

    /// Inverse-CDF lookup of a uniform draw.
    pub fn class_for_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (l, p) in self.class_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return l;
            }
        }
        // u landed in the rounding gap above the last cumulative sum
        self.class_probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(0)
    }
}

/// Bisection search for the half-normal scale whose first-bin mass is `p0`.
///
/// The first-bin mass decreases monotonically in sigma, from 1 as sigma goes
/// to zero toward the flat limit `dist_1 / dist_max` as sigma grows.
pub fn solve_sigma(p0: f64, classes: &DistanceClassTable, tol: f64) -> Result<f64, ChoiceError> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(ChoiceError::InvalidP0(p0));
    }
    if classes.class_count() == 0 {
        return Err(ChoiceError::EmptyClasses);
    }
    let boundaries = classes.boundaries();
    if boundaries.len() < 3 || classes.dist_max() <= 0.0 {
        return Err(ChoiceError::Infeasible { p0, low: 1.0, high: 1.0 });
    }
    let first_bin = |sigma: f64| bin_masses(sigma, &boundaries[..])[0];

    let (mut lo, mut hi) = SIGMA_BRACKET;
    let (mass_lo, mass_hi) = (first_bin(lo), first_bin(hi));
    if p0 > mass_lo || p0 < mass_hi {
        return Err(ChoiceError::Infeasible {
            p0,
            low: mass_hi,
            high: mass_lo,
        });
    }
    let mut mid = (lo * hi).sqrt();
    for _ in 0..MAX_BISECTION_ITERS {
        mid = (lo * hi).sqrt();
        let mass = first_bin(mid);
        if (mass - p0).abs() <= tol {
            break;
        }
        if mass > p0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}
