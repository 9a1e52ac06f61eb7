//! Post-hoc fits of a saved `results.csv`.

use std::fs::File;
use std::path::Path;

use salab_core::bounds::{fit_geometric, fit_rate, GeometricFit, RateFit};
use salab_core::EnsembleCurve;
use serde::Serialize;

use crate::experiment::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Fit {
    Rate(RateFit),
    Geometric(GeometricFit),
}

/// Parses `lo:hi`.
pub fn parse_window(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo: u64 = lo.trim().parse().map_err(|e| format!("bad window start `{lo}`: {e}"))?;
    let hi: u64 = hi.trim().parse().map_err(|e| format!("bad window end `{hi}`: {e}"))?;
    if lo >= hi {
        return Err(format!("window start {lo} must be below its end {hi}"));
    }
    Ok((lo, hi))
}

pub fn read_curve(path: &Path) -> Result<EnsembleCurve, RunError> {
    let io = |message: String| RunError::Io { path: path.into(), message };
    let file = File::open(path).map_err(|e| io(e.to_string()))?;
    EnsembleCurve::read_csv(file).map_err(|e| io(e.to_string()))
}

pub fn analyze(curve: &EnsembleCurve, window: (u64, u64), geometric: bool) -> Result<Fit, RunError> {
    Ok(if geometric {
        Fit::Geometric(fit_geometric(&curve.k, &curve.mean, window)?)
    } else {
        Fit::Rate(fit_rate(&curve.k, &curve.mean, window)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        assert_eq!(parse_window("10:1000"), Ok((10, 1000)));
        assert!(parse_window("1000:10").is_err());
        assert!(parse_window("10").is_err());
    }

    #[test]
    fn recovers_a_power_law() {
        let k: Vec<u64> = (1..=100).map(|i| i * 10).collect();
        let mean = k.iter().map(|&k| 3.0 / k as f64).collect();
        let curve = EnsembleCurve { k, var: vec![0.0; 100], mean, n_seeds: 1 };
        match analyze(&curve, (10, 1000), false).unwrap() {
            Fit::Rate(f) => assert!((f.slope + 1.0).abs() < 1e-10),
            f => panic!("{f:?}"),
        }
    }
}
