//! Scene flow and trajectory evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, Point3};
use crate::scalar::Real;
use crate::trajectory::Trajectory;

/// Guard for the relative-error clause when the ground truth is zero.
pub const EPS_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    /// Mean end-point error, meters.
    pub epe: f64,
    /// Percent of points with EPE < 0.05 m or relative error < 5%.
    pub acc_strict: f64,
    /// Percent of points with EPE < 0.10 m or relative error < 10%.
    pub acc_relaxed: f64,
    /// Mean angle between `(f, 1)`-augmented vectors, radians.
    pub angle_error: f64,
    pub n_points: usize,
}

/// Evaluates `pred` against `gt` point by point.
pub fn flow_metrics<T: Real>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<FlowMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    gt.check_len(pred.len())?;
    let n = pred.len();
    let (mut epe_sum, mut angle_sum) = (0.0, 0.0);
    let (mut strict, mut relaxed) = (0usize, 0usize);
    for (p, g) in pred.vectors().iter().zip(gt.vectors()) {
        let p = p.cast::<f64>();
        let g = g.cast::<f64>();
        let epe = (p - g).norm();
        let rel = epe / g.norm().max(EPS_REL);
        epe_sum += epe;
        strict += usize::from(epe < 0.05 || rel < 0.05);
        relaxed += usize::from(epe < 0.10 || rel < 0.10);
        angle_sum += augmented_angle(&p, &g);
    }
    let nf = n as f64;
    Ok(FlowMetrics {
        epe: epe_sum / nf,
        acc_strict: 100.0 * strict as f64 / nf,
        acc_relaxed: 100.0 * relaxed as f64 / nf,
        angle_error: angle_sum / nf,
        n_points: n,
    })
}

fn augmented_angle(p: &Point3<f64>, g: &Point3<f64>) -> f64 {
    // 2·atan2(|â − ĝ|, |â + ĝ|) is exact at zero and stable near π
    let a = [p.x, p.y, p.z, 1.0];
    let b = [g.x, g.y, g.z, 1.0];
    let na = (p.norm_squared() + 1.0).sqrt();
    let nb = (g.norm_squared() + 1.0).sqrt();
    let (mut diff, mut sum) = (0.0, 0.0);
    for k in 0..4 {
        let (u, v) = (a[k] / na, b[k] / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajMetrics {
    /// Percent of endpoints within 0.5 m.
    pub acc_05: f64,
    /// Percent of endpoints within 1.0 m.
    pub acc_10: f64,
    /// Mean endpoint error, meters.
    pub mean_error: f64,
    pub first: usize,
    pub last: usize,
    pub n_points: usize,
}

/// Endpoint accuracy between frames `first` and `last` (1-based).
pub fn traj_metrics<T: Real>(
    pred: &[Trajectory<T>],
    gt: &[Trajectory<T>],
    first: usize,
    last: usize,
) -> Result<TrajMetrics> {
    if pred.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if first == 0 || first > last {
        return Err(Error::param("first/last", format!("invalid frame range {first}..{last}")));
    }
    let (mut within05, mut within10, mut sum) = (0usize, 0usize, 0.0);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let frames = p.frame_count().min(g.frame_count());
        if last > frames {
            return Err(Error::param(
                "last",
                format!("frame {last} beyond trajectory length {frames}"),
            ));
        }
        let (ps, gs) = (p.position(first).cast::<f64>(), g.position(first).cast::<f64>());
        if (ps - gs).norm() > 1e-6 {
            return Err(Error::SeedMismatch { index: i });
        }
        let err = (p.position(last).cast::<f64>() - g.position(last).cast::<f64>()).norm();
        sum += err;
        within05 += usize::from(err < 0.5);
        within10 += usize::from(err < 1.0);
    }
    let n = pred.len() as f64;
    Ok(TrajMetrics {
        acc_05: 100.0 * within05 as f64 / n,
        acc_10: 100.0 * within10 as f64 / n,
        mean_error: sum / n,
        first,
        last,
        n_points: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: [f64; 3], n: usize) -> FlowField<f64> {
        FlowField::new(vec![Point3::new(v[0], v[1], v[2]); n]).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = FlowField::new(vec![Point3::new(0.3, -1.0, 0.2), Point3::new(0.0, 0.0, 0.0)]).unwrap();
        let m = flow_metrics(&gt, &gt).unwrap();
        assert_eq!((m.epe, m.acc_strict, m.acc_relaxed, m.angle_error), (0.0, 100.0, 100.0, 0.0));
    }

    #[test]
    fn absolute_clause() {
        let m = flow_metrics(&uniform([1.04, 0.0, 0.0], 5), &uniform([1.0, 0.0, 0.0], 5)).unwrap();
        assert!((m.epe - 0.04).abs() < 1e-12);
        assert_eq!(m.acc_strict, 100.0);
    }

    #[test]
    fn relative_clause() {
        let m = flow_metrics(&uniform([2.09, 0.0, 0.0], 4), &uniform([2.0, 0.0, 0.0], 4)).unwrap();
        assert!(m.epe > 0.05);
        assert_eq!(m.acc_strict, 100.0);
        let m = flow_metrics(&uniform([2.11, 0.0, 0.0], 4), &uniform([2.0, 0.0, 0.0], 4)).unwrap();
        assert_eq!(m.acc_strict, 0.0);
        assert_eq!(m.acc_relaxed, 100.0);
    }

    #[test]
    fn angle_of_augmented_vectors() {
        // (1,0,0,1) vs (0,0,0,1): cos = 1/√2.
        let m = flow_metrics(&uniform([1.0, 0.0, 0.0], 1), &uniform([0.0, 0.0, 0.0], 1)).unwrap();
        assert!((m.angle_error - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn flow_errors() {
        assert!(matches!(
            flow_metrics(&uniform([0.0; 3], 2), &uniform([0.0; 3], 3)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn line(offset: f64, n: usize) -> Vec<Trajectory<f64>> {
        (0..n)
            .map(|i| {
                let s = Point3::new(i as f64, 0.0, 0.0);
                Trajectory::new(vec![s, s + Point3::new(0.0, offset, 0.0)]).unwrap()
            })
            .collect()
    }

    #[test]
    fn trajectory_thresholds() {
        let gt = line(0.0, 4);
        let m = traj_metrics(&gt, &gt, 1, 2).unwrap();
        assert_eq!((m.acc_05, m.acc_10), (100.0, 100.0));
        let m = traj_metrics(&line(0.7, 4), &gt, 1, 2).unwrap();
        assert_eq!((m.acc_05, m.acc_10), (0.0, 100.0));
        let mut mixed = line(0.4, 2);
        mixed.extend(line(1.4, 4).into_iter().skip(2));
        let m = traj_metrics(&mixed, &gt, 1, 2).unwrap();
        assert_eq!((m.acc_05, m.acc_10), (50.0, 50.0));
    }

    #[test]
    fn trajectory_seed_mismatch() {
        let gt = line(0.0, 3);
        let shifted: Vec<_> = gt
            .iter()
            .map(|t| Trajectory::new(t.positions().iter().map(|p| *p + Point3::new(0.0, 0.0, 1.0)).collect()).unwrap())
            .collect();
        assert!(matches!(traj_metrics(&shifted, &gt, 1, 2), Err(Error::SeedMismatch { index: 0 })));
    }
}
