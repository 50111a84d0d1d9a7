//! Four-dimensional Rosenbrock-type energy
//! `E = a(x4-x3^2)^2 + b(x3-x2^2)^2 + c(x2-x1^2)^2 + d(1-x1)^2`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};
use crate::force::ForceField;

pub const ROSENBROCK_DIM: usize = 4;

/// Default starting point of the Rosenbrock searches.
pub const ROSENBROCK_X0: [f64; 4] = [0.7, 0.8, 1.2, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosenbrockParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl RosenbrockParams {
    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    /// Coefficient sets 1..=4; in set `k` the point (1,1,1,1) is an index-`k` saddle.
    pub fn case(k: usize) -> Option<Self> {
        match k {
            1 => Some(Self::new(-0.5, 0.5, 0.5, 2.0)),
            2 => Some(Self::new(-0.5, 0.5, -0.5, 2.0)),
            3 => Some(Self::new(-0.5, -0.5, -0.5, 2.0)),
            4 => Some(Self::new(-0.5, -0.5, -0.5, -2.0)),
            _ => None,
        }
    }
}

/// Parses a case label: `i`..`iv` or `1`..`4`.
pub fn parse_case(label: &str) -> Result<usize> {
    match label.trim().to_ascii_lowercase().as_str() {
        "i" | "1" => Ok(1),
        "ii" | "2" => Ok(2),
        "iii" | "3" => Ok(3),
        "iv" | "4" => Ok(4),
        other => Err(SaddleError::InvalidArgument(format!("unknown case {other:?}"))),
    }
}

pub fn rosenbrock_energy(x: &DVector<f64>, p: &RosenbrockParams) -> f64 {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    p.a * (x4 - x3 * x3).powi(2)
        + p.b * (x3 - x2 * x2).powi(2)
        + p.c * (x2 - x1 * x1).powi(2)
        + p.d * (1.0 - x1).powi(2)
}

/// `(F, E)` with `F = -grad E`.
pub fn rosenbrock_force(x: &DVector<f64>, p: &RosenbrockParams) -> (DVector<f64>, f64) {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    let r1 = x2 - x1 * x1;
    let r2 = x3 - x2 * x2;
    let r3 = x4 - x3 * x3;
    let g = [
        -4.0 * p.c * x1 * r1 - 2.0 * p.d * (1.0 - x1),
        -4.0 * p.b * x2 * r2 + 2.0 * p.c * r1,
        -4.0 * p.a * x3 * r3 + 2.0 * p.b * r2,
        2.0 * p.a * r3,
    ];
    (DVector::from_iterator(4, g.iter().map(|v| -v)), rosenbrock_energy(x, p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rosenbrock {
    pub params: RosenbrockParams,
}

impl Rosenbrock {
    pub fn new(params: RosenbrockParams) -> Self {
        Self { params }
    }
}

impl ForceField for Rosenbrock {
    fn dim(&self) -> usize {
        ROSENBROCK_DIM
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(rosenbrock_force(x, &self.params).0)
    }
}
