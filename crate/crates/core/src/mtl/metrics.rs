use super::{Target, TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Mean signed relative improvement over single-task baselines, in percent:
/// `100/T · Σ (−1)^lᵢ (M_m,i − M_s,i) / M_s,i`.
pub fn compute_delta_m(multi: &[f64], single: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if multi.len() != single.len() || multi.len() != lower_is_better.len() || multi.is_empty() {
        return Err(Error::config(format!(
            "delta_m: lengths differ or are empty ({}, {}, {})",
            multi.len(),
            single.len(),
            lower_is_better.len()
        )));
    }
    let mut total = 0.0;
    for (i, ((&m, &s), &lower)) in multi.iter().zip(single).zip(lower_is_better).enumerate() {
        if s == 0.0 {
            return Err(Error::DivisionByZero(format!("delta_m: single-task baseline {i} is zero")));
        }
        let sign = if lower { -1.0 } else { 1.0 };
        total += sign * (m - s) / s;
    }
    Ok(100.0 * total / multi.len() as f64)
}

/// Mean intersection-over-union over the classes that occur in either the
/// prediction or the target.
pub fn mean_iou(pred: &[usize], target: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

/// Evaluation metric of one task from raw head outputs (row-major, `out`
/// values per pixel).
pub fn task_metric(spec: &TaskSpec, pred: &[f64], target: &Target) -> Result<f64> {
    match (spec.kind, target) {
        (TaskKind::ClassSeg, Target::Labels(labels)) => {
            let k = spec.classes;
            let argmax: Vec<usize> = pred
                .chunks(k)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .collect();
            if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
            }
            Ok(mean_iou(&argmax, labels, k))
        }
        (TaskKind::Regression, Target::Values(v)) => {
            let t: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            Ok(rmse(pred, &t))
        }
        (TaskKind::BinarySaliency, Target::Values(v)) => {
            let p: Vec<usize> = pred.iter().map(|&x| usize::from(x > 0.0)).collect();
            let t: Vec<usize> = v.iter().map(|&x| usize::from(x > 0.5)).collect();
            Ok(mean_iou(&p, &t, 2))
        }
        (kind, _) => Err(Error::Data(format!("target type does not match task kind {}", kind.name()))),
    }
}
