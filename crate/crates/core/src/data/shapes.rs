//! Two-dimensional benchmark shapes `(u1, u2) -> (u1, m(u1) + s u2)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeName {
    Abs,
    Crescent,
    CrescentCubed,
    Sign,
    SineWave,
}

impl ShapeName {
    pub const ALL: [ShapeName; 5] = [
        ShapeName::Abs,
        ShapeName::Crescent,
        ShapeName::CrescentCubed,
        ShapeName::Sign,
        ShapeName::SineWave,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeName::Abs => "Abs",
            ShapeName::Crescent => "Crescent",
            ShapeName::CrescentCubed => "CrescentCubed",
            ShapeName::Sign => "Sign",
            ShapeName::SineWave => "SineWave",
        }
    }

    /// Conditional mean `m(u)` of the second coordinate.
    pub fn mean(self, u: f64) -> f64 {
        match self {
            ShapeName::Abs => u.abs() - 1.0,
            ShapeName::Crescent => 0.5 * u * u - 1.0,
            ShapeName::CrescentCubed => 0.2 * u * u * u,
            ShapeName::Sign => sign(u) + u,
            ShapeName::SineWave => (5.0 * u).sin(),
        }
    }

    /// Conditional scale `s` of the second coordinate.
    pub fn scale(self) -> f64 {
        match self {
            ShapeName::Abs | ShapeName::Sign => (-1.5f64).exp(),
            ShapeName::Crescent | ShapeName::SineWave => (-1.0f64).exp(),
            ShapeName::CrescentCubed => 1.0,
        }
    }

    /// Exact log-density of the shape when `u` is standard normal.
    pub fn log_density(self, x: [f64; 2]) -> f64 {
        let s = self.scale();
        let z = (x[1] - self.mean(x[0])) / s;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * (x[0] * x[0] + z * z) - s.ln()
    }
}

/// `sign(0) = 0`.
fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl fmt::Display for ShapeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownShape(s.to_string()))
    }
}

pub fn shape_transform(name: ShapeName, u: &DenseMatrix) -> Result<DenseMatrix> {
    if u.cols() != 2 {
        return Err(Error::Shape(format!(
            "shape transforms take 2 columns, got {}",
            u.cols()
        )));
    }
    let s = name.scale();
    let mut x = u.clone();
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        row[1] = name.mean(row[0]) + s * row[1];
    }
    Ok(x)
}
