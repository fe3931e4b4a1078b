//! One-parameter sweeps over the solver configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud};
use crate::metrics::flow_metrics;
use crate::optim::{solve_pair, SolveConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Dthr,
    Omega,
    EpsMinPts,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dthr" => Ok(SweepParam::Dthr),
            "omega" => Ok(SweepParam::Omega),
            "eps-minpts" => Ok(SweepParam::EpsMinPts),
            other => Err(Error::param("param", format!("unknown sweep parameter `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Dthr => "dthr",
            SweepParam::Omega => "omega",
            SweepParam::EpsMinPts => "eps-minpts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Scalar(f64),
    /// `eps:min_points`
    Cluster(f64, usize),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Scalar(v) => write!(f, "{v}"),
            SweepValue::Cluster(e, m) => write!(f, "{e}:{m}"),
        }
    }
}

/// Parses a comma-separated list; `eps-minpts` entries are `eps:min_points`.
pub fn parse_values(param: SweepParam, list: &str) -> Result<Vec<SweepValue>> {
    let bad = |item: &str| Error::param("values", format!("cannot parse `{item}` for {}", param.name()));
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| match param {
            SweepParam::EpsMinPts => {
                let (e, m) = item.split_once(':').ok_or_else(|| bad(item))?;
                Ok(SweepValue::Cluster(
                    e.trim().parse().map_err(|_| bad(item))?,
                    m.trim().parse().map_err(|_| bad(item))?,
                ))
            }
            _ => item.parse().map(SweepValue::Scalar).map_err(|_| bad(item)),
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::param("values", "empty list"));
    }
    Ok(values)
}

/// `base` with one setting replaced.
pub fn apply(base: &SolveConfig, param: SweepParam, value: SweepValue) -> Result<SolveConfig> {
    let mut cfg = *base;
    match (param, value) {
        (SweepParam::Dthr, SweepValue::Scalar(v)) => cfg.multibody.d_thr = v,
        (SweepParam::Omega, SweepValue::Scalar(v)) => cfg.omega = v,
        (SweepParam::EpsMinPts, SweepValue::Cluster(e, m)) => {
            cfg.dbscan.eps = e;
            cfg.dbscan.min_points = m;
        }
        _ => return Err(Error::param("values", format!("`{value}` does not fit {}", param.name()))),
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A source/target pair with its ground-truth flow.
#[derive(Debug, Clone)]
pub struct SweepPair<T> {
    pub source: PointCloud<T>,
    pub target: PointCloud<T>,
    pub gt: FlowField<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: String,
    pub epe: f64,
    pub acc_strict: f64,
    pub acc_relaxed: f64,
    pub angle_error: f64,
    /// Summed solve time over pairs, seconds.
    pub wall_seconds: f64,
    /// Mean cluster count over pairs.
    pub clusters: f64,
}

pub const CSV_HEADER: &str = "param,value,epe,acc_strict,acc_relaxed,angle_error_rad,wall_seconds,clusters";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.param,
            self.value,
            self.epe,
            self.acc_strict,
            self.acc_relaxed,
            self.angle_error,
            self.wall_seconds,
            self.clusters
        )
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Solves every pair under one setting and averages the metrics.
pub fn run_setting<T: Real>(
    pairs: &[SweepPair<T>],
    base: &SolveConfig,
    param: SweepParam,
    value: SweepValue,
) -> Result<SweepRow> {
    if pairs.is_empty() {
        return Err(Error::param("pairs", "no pairs to sweep over"));
    }
    let cfg = apply(base, param, value)?;
    let mut row = SweepRow {
        param: param.name(),
        value: value.to_string(),
        epe: 0.0,
        acc_strict: 0.0,
        acc_relaxed: 0.0,
        angle_error: 0.0,
        wall_seconds: 0.0,
        clusters: 0.0,
    };
    for (index, pair) in pairs.iter().enumerate() {
        let wrap = |e: Error| Error::PairFailed {
            index,
            source: Box::new(e),
        };
        let report = solve_pair(&pair.source, &pair.target, &cfg).map_err(wrap)?;
        let m = flow_metrics(&report.flow, &pair.gt).map_err(wrap)?;
        row.epe += m.epe;
        row.acc_strict += m.acc_strict;
        row.acc_relaxed += m.acc_relaxed;
        row.angle_error += m.angle_error;
        row.wall_seconds += report.wall_seconds;
        row.clusters += report.cluster_count as f64;
    }
    let n = pairs.len() as f64;
    row.epe /= n;
    row.acc_strict /= n;
    row.acc_relaxed /= n;
    row.angle_error /= n;
    row.clusters /= n;
    Ok(row)
}

/// Runs all settings, at most `jobs` at a time. Rows come back in input order.
pub fn run_sweep<T: Real>(
    pairs: &[SweepPair<T>],
    base: &SolveConfig,
    param: SweepParam,
    values: &[SweepValue],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return values.iter().map(|&v| run_setting(pairs, base, param, v)).collect();
    }
    let mut rows = Vec::with_capacity(values.len());
    for chunk in values.chunks(jobs) {
        let results: Vec<Result<SweepRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&v| s.spawn(move || run_setting(pairs, base, param, v)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_lists() {
        assert_eq!(
            parse_values(SweepParam::Dthr, "0.01, 0.03").unwrap(),
            vec![SweepValue::Scalar(0.01), SweepValue::Scalar(0.03)]
        );
        assert_eq!(
            parse_values(SweepParam::EpsMinPts, "0.8:30,2:5").unwrap(),
            vec![SweepValue::Cluster(0.8, 30), SweepValue::Cluster(2.0, 5)]
        );
        assert!(parse_values(SweepParam::EpsMinPts, "0.8").is_err());
        assert!(parse_values(SweepParam::Omega, "").is_err());
        assert!("bogus".parse::<SweepParam>().is_err());
    }

    #[test]
    fn apply_validates() {
        let base = SolveConfig::default();
        assert_eq!(apply(&base, SweepParam::Dthr, SweepValue::Scalar(0.1)).unwrap().multibody.d_thr, 0.1);
        assert!(apply(&base, SweepParam::Dthr, SweepValue::Scalar(-1.0)).is_err());
        assert!(apply(&base, SweepParam::Omega, SweepValue::Cluster(1.0, 2)).is_err());
    }
}
