//! Integer nanosecond timestamps.
//!
//! All window and bin arithmetic runs on whole nanoseconds so that window
//! grids, bin edges and label intervals are exact. Conversions to and from
//! floating-point seconds only happen at configuration and report boundaries.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// A point or span on a trace's time axis, in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    /// Rounds a non-negative number of seconds to the nearest nanosecond.
    /// Negative and non-finite inputs yield `None`.
    pub fn from_secs_f64(secs: f64) -> Option<Nanos> {
        if !secs.is_finite() || secs < 0.0 {
            return None;
        }
        let ns = (secs * NANOS_PER_SEC as f64).round();
        if ns > u64::MAX as f64 {
            return None;
        }
        Some(Nanos(ns as u64))
    }

    pub fn from_micros(us: u64) -> Nanos {
        Nanos(us * 1_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub fn saturating_sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for Nanos {
    /// Seconds with nine fractional digits; exact and locale-independent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:09}",
            self.0 / NANOS_PER_SEC,
            self.0 % NANOS_PER_SEC
        )
    }
}
