//! Trajectory error metrics: absolute trajectory error after first-pose
//! alignment, relative position error over a fixed horizon, and error CDFs
//! for drift comparison across estimators.

use thiserror::Error;

use crate::manifold::Pose;

/// Errors raised by trajectory evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{unmatched} of {total} estimate timestamps have no ground-truth match within {tol} s")]
    TimestampMismatch { unmatched: usize, total: usize, tol: f64 },
    #[error("need at least two matched poses, got {0}")]
    TooShort(usize),
}

/// A timestamped pose sample of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub pose: Pose,
}

/// Absolute trajectory error sequence and summary statistics.
#[derive(Debug, Clone)]
pub struct AteResult {
    /// Per-keyframe `(t, position error)` after first-pose alignment.
    pub errors: Vec<(f64, f64)>,
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
}

/// Relative position error over a fixed horizon, with its CDF table.
#[derive(Debug, Clone)]
pub struct RpeResult {
    pub horizon: f64,
    /// Per-pair `(t_start, position error)`.
    pub errors: Vec<(f64, f64)>,
    pub rmse: f64,
    pub median: f64,
    pub max: f64,
    /// `(error value, cumulative fraction)`, sorted by error.
    pub cdf: Vec<(f64, f64)>,
}

/// Index of the trajectory point nearest in time, if within `tol`.
fn nearest_within(points: &[TrajectoryPoint], t: f64, tol: f64) -> Option<usize> {
    if points.is_empty() {
        return None;
    }
    let idx = points.partition_point(|p| p.t < t);
    let mut best: Option<(f64, usize)> = None;
    for i in [idx.wrapping_sub(1), idx] {
        if let Some(p) = points.get(i) {
            let d = (p.t - t).abs();
            if d <= tol && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Matches every estimate point to its nearest truth point within `tol`,
/// failing when more than 10% stay unmatched.
fn match_trajectories(
    estimate: &[TrajectoryPoint],
    truth: &[TrajectoryPoint],
    tol: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut pairs = Vec::with_capacity(estimate.len());
    let mut unmatched = 0usize;
    for (i, e) in estimate.iter().enumerate() {
        match nearest_within(truth, e.t, tol) {
            Some(j) => pairs.push((i, j)),
            None => unmatched += 1,
        }
    }
    if unmatched * 10 > estimate.len() {
        return Err(EvalError::TimestampMismatch { unmatched, total: estimate.len(), tol });
    }
    Ok(pairs)
}

fn stats(errors: &[f64]) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errors.iter().sum::<f64>() / n;
    let max = errors.iter().cloned().fold(0.0, f64::max);
    (rmse, mean, max)
}

/// Sample median of a slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Empirical CDF table of the errors: `(value, fraction <= value)`.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut v = errors.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, e)| (*e, (i + 1) as f64 / n)).collect()
}

/// Absolute trajectory error after rigidly aligning the first estimate pose
/// onto the first matched truth pose.
pub fn absolute_trajectory_error(
    estimate: &[TrajectoryPoint],
    truth: &[TrajectoryPoint],
    tol: f64,
) -> Result<AteResult, EvalError> {
    let pairs = match_trajectories(estimate, truth, tol)?;
    if pairs.len() < 2 {
        return Err(EvalError::TooShort(pairs.len()));
    }
    let (e0, t0) = pairs[0];
    let align = truth[t0].pose * estimate[e0].pose.inverse();
    let mut errors = Vec::with_capacity(pairs.len());
    for (ei, ti) in &pairs {
        let aligned = align * estimate[*ei].pose;
        let err = (aligned.translation - truth[*ti].pose.translation).norm();
        errors.push((estimate[*ei].t, err));
    }
    let values: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
    let (rmse, mean, max) = stats(&values);
    Ok(AteResult { errors, rmse, mean, max })
}

/// Relative position error over `horizon` seconds: compares the translation
/// of the estimated relative motion against the true relative motion for
/// every start keyframe whose end lands on the trajectory.
pub fn relative_position_error(
    estimate: &[TrajectoryPoint],
    truth: &[TrajectoryPoint],
    horizon: f64,
    tol: f64,
) -> Result<RpeResult, EvalError> {
    let pairs = match_trajectories(estimate, truth, tol)?;
    if pairs.len() < 2 {
        return Err(EvalError::TooShort(pairs.len()));
    }
    let mut errors = Vec::new();
    for (k, (ei, ti)) in pairs.iter().enumerate() {
        let t_target = estimate[*ei].t + horizon;
        // Find the matched pair whose estimate time is nearest the horizon.
        let mut best: Option<(f64, usize)> = None;
        for (j, (ej, _)) in pairs.iter().enumerate().skip(k + 1) {
            let d = (estimate[*ej].t - t_target).abs();
            if d <= tol && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let Some((_, j)) = best else { continue };
        let (ej, tj) = pairs[j];
        let est_rel = estimate[*ei].pose.inverse() * estimate[ej].pose;
        let tru_rel = truth[*ti].pose.inverse() * truth[tj].pose;
        let err = (est_rel.translation - tru_rel.translation).norm();
        errors.push((estimate[*ei].t, err));
    }
    let values: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
    let (rmse, _, max) = stats(&values);
    Ok(RpeResult {
        horizon,
        median: median(&values),
        cdf: error_cdf(&values),
        errors,
        rmse,
        max,
    })
}
