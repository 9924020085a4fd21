//! Scalar losses and divergences on `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training loss used by a regression round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy `t log(1/y) + (1-t) log(1/(1-y))`.
    Log,
    /// `(y - t)^2`.
    Squared,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::Log, LossKind::Squared];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Log => "log",
            LossKind::Squared => "squared",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(LossKind::Log),
            "squared" => Ok(LossKind::Squared),
            other => Err(Error::config(format!("unknown loss {other:?} (expected log|squared)"))),
        }
    }
}

/// A probability, i.e. a real in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Prob(f64);

impl Prob {
    pub const ZERO: Prob = Prob(0.0);
    pub const ONE: Prob = Prob(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Prob(value))
        } else {
            Err(Error::domain(format!("{value} is not in [0, 1]")))
        }
    }

    /// Clamp into `[0, 1]`; NaN maps to 0.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Prob(0.0)
        } else {
            Prob(value.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Prob {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Prob::new(value)
    }
}

impl From<Prob> for f64 {
    fn from(p: Prob) -> f64 {
        p.0
    }
}

/// `x log(1/y)` with `0 log(1/0) = 0`.
fn xlog_inv(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        -x * y.ln()
    }
}

/// Log-loss of prediction `y` against target `t`. Infinite when the
/// prediction rules out an outcome the target puts mass on.
pub fn log_loss(y: Prob, t: Prob) -> f64 {
    let (y, t) = (y.get(), t.get());
    xlog_inv(t, y) + xlog_inv(1.0 - t, 1.0 - y)
}

pub fn squared_loss(y: f64, t: f64) -> f64 {
    (y - t) * (y - t)
}

/// Squared Hellinger distance between Bernoulli(p) and Bernoulli(q).
pub fn hellinger_sq(p: Prob, q: Prob) -> f64 {
    let (p, q) = (p.get(), q.get());
    let a = p.sqrt() - q.sqrt();
    let b = (1.0 - p).sqrt() - (1.0 - q).sqrt();
    0.5 * a * a + 0.5 * b * b
}

/// Pointwise triangular deviation `(f - q) / sqrt(f + q)`, zero at `f = q = 0`.
pub fn triangular_dev(f: f64, q: f64) -> Result<f64> {
    if !(f >= 0.0 && q >= 0.0) {
        return Err(Error::domain(format!("triangular deviation needs f, q >= 0 (got {f}, {q})")));
    }
    Ok(triangular_dev_unchecked(f, q))
}

pub(crate) fn triangular_dev_unchecked(f: f64, q: f64) -> f64 {
    let s = f + q;
    if s == 0.0 {
        0.0
    } else {
        (f - q) / s.sqrt()
    }
}
