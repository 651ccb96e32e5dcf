use std::fmt;

use crate::error::{Error, Result};

/// One metric over repeated runs, with the raw values kept.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub raw: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for one repeat.
    pub std: f64,
}

impl MetricSummary {
    pub fn from_raw(name: impl Into<String>, raw: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if raw.is_empty() {
            return Err(Error::MetricUndefined(format!("{name}: no repeats")));
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let std = if raw.len() == 1 {
            0.0
        } else {
            (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(MetricSummary { name, raw, mean, std })
    }

    pub fn n_repeats(&self) -> usize {
        self.raw.len()
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub metrics: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// A table row: `label | metric mean ± std | ...`.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label)?;
        for m in &self.metrics {
            write!(f, " | {} {m}", m.name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_repeat_has_zero_std() {
        let m = MetricSummary::from_raw("auc", vec![0.7]).unwrap();
        assert_eq!((m.mean, m.std), (0.7, 0.0));
    }

    #[test]
    fn sample_std_and_row_format() {
        let m = MetricSummary::from_raw("auc", vec![0.94, 0.96, 0.95, 0.95]).unwrap();
        assert!((m.mean - 0.95).abs() < 1e-12);
        assert!((m.std - (0.0002f64 / 3.0).sqrt()).abs() < 1e-12);
        let r = MetricReport {
            label: "cohort".into(),
            metrics: vec![m],
        };
        assert_eq!(r.to_string(), "cohort | auc 0.95 ± 0.01");
    }
}
