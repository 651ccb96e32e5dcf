use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Grid carbon intensity in kg CO₂ per kWh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Intensity {
    Single(f64),
    Range(f64, f64),
}

impl Intensity {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Intensity::Single(v) => (v, v),
            Intensity::Range(a, b) => (a, b),
        }
    }
}

/// `0.35` or `0.35:0.525`.
impl FromStr for Intensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("intensity `{s}` is not a number or `low:high` range")))
        };
        match s.split_once(':') {
            None => Ok(Intensity::Single(num(s)?)),
            Some((a, b)) => Ok(Intensity::Range(num(a)?, num(b)?)),
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Intensity::Single(v) => write!(f, "{v}"),
            Intensity::Range(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyEstimate {
    pub hours: f64,
    pub watts: f64,
    pub energy_kwh: f64,
    pub intensity: Intensity,
    /// Low and high emissions in kg; equal for a single intensity.
    pub co2_kg: (f64, f64),
}

pub fn energy_estimate(hours: f64, watts: f64, intensity: Intensity) -> Result<EnergyEstimate> {
    let (lo, hi) = intensity.bounds();
    for (name, v) in [("hours", hours), ("watts", watts), ("intensity", lo), ("intensity", hi)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain {
                op: "energy_estimate",
                detail: format!("{name} must be a nonnegative number, got {v}"),
            });
        }
    }
    if lo > hi {
        return Err(Error::Domain {
            op: "energy_estimate",
            detail: format!("intensity range {lo}:{hi} is reversed"),
        });
    }
    let energy_kwh = hours * watts / 1000.0;
    Ok(EnergyEstimate {
        hours,
        watts,
        energy_kwh,
        intensity,
        co2_kg: (energy_kwh * lo, energy_kwh * hi),
    })
}

impl fmt::Display for EnergyEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "energy: {} kWh", self.energy_kwh)?;
        match self.intensity {
            Intensity::Single(_) => write!(f, "co2: {} kg", self.co2_kg.0),
            Intensity::Range(..) => write!(f, "co2: {} to {} kg", self.co2_kg.0, self.co2_kg.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_domain() {
        let e = energy_estimate(0.0, 400.0, Intensity::Single(0.35)).unwrap();
        assert_eq!((e.energy_kwh, e.co2_kg), (0.0, (0.0, 0.0)));
        assert!(energy_estimate(-1.0, 400.0, Intensity::Single(0.35)).is_err());
        assert!(energy_estimate(1.0, 400.0, Intensity::Range(0.5, 0.1)).is_err());
        assert_eq!("0.35:0.525".parse::<Intensity>().unwrap(), Intensity::Range(0.35, 0.525));
        assert!("abc".parse::<Intensity>().is_err());
    }
}
