//! Chamfer-matched average precision over map elements.
//!
//! For each class and threshold, predictions from all samples are matched
//! greedily in descending score order to the nearest unmatched ground-truth
//! element of the same sample; the per-class AP is the mean over
//! thresholds, and mAP the mean over classes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::map::{resample_polyline, ElementClass, MapSample, Point, PredictionSet, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub resample_n: usize,
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.5, 1.0, 1.5], resample_n: 100, score_floor: 0.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("thresholds must be nonempty and positive, got {:?}", self.thresholds)));
        }
        if self.resample_n < 2 {
            return Err(Error::Config(format!("resample_n must be at least 2, got {}", self.resample_n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `per_class_per_tau[class][t]`.
    pub per_class_per_tau: [Vec<f64>; NUM_CLASSES],
    pub per_class: [f64; NUM_CLASSES],
    pub map: f64,
    /// Precision-recall points per class and threshold, in ranking order.
    pub curves: [Vec<Vec<(f64, f64)>>; NUM_CLASSES],
}

fn mean_nearest(a: &[Point], b: &[Point]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
        })
        .map(libm::sqrt)
        .sum();
    total / a.len() as f64
}

/// Chamfer distance between already resampled point sets.
pub fn chamfer_resampled(a: &[Point], b: &[Point]) -> f64 {
    0.5 * (mean_nearest(a, b) + mean_nearest(b, a))
}

pub fn chamfer_distance(a: &[Point], b: &[Point], resample_n: usize) -> Result<f64> {
    let a = resample_polyline(a, resample_n)?;
    let b = resample_polyline(b, resample_n)?;
    Ok(chamfer_resampled(&a, &b))
}

/// Sorts by descending score; equal scores keep their input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Greedy matching of one sample's predictions of one class. `dist[i][g]`
/// is the Chamfer distance from prediction `i` to ground truth `g`.
/// Returns TP flags indexed like the predictions.
pub fn match_with_distances(scores: &[f64], dist: &[Vec<f64>], num_gt: usize, tau: f64) -> Vec<bool> {
    let mut taken = vec![false; num_gt];
    let mut tp = vec![false; scores.len()];
    for i in ranking(scores) {
        let best = (0..num_gt)
            .filter(|&g| !taken[g])
            .fold(None, |acc: Option<(usize, f64)>, g| match acc {
                Some((_, d)) if d <= dist[i][g] => acc,
                _ => Some((g, dist[i][g])),
            });
        if let Some((g, d)) = best {
            if d <= tau {
                taken[g] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// Greedy matching of scored predictions to ground truth of a single class.
pub fn match_at_threshold(preds: &[(f64, Vec<Point>)], gts: &[Vec<Point>], tau: f64, resample_n: usize) -> Result<Vec<bool>> {
    let gs: Vec<Vec<Point>> = gts.iter().map(|g| resample_polyline(g, resample_n)).collect::<Result<_>>()?;
    let mut dist = Vec::with_capacity(preds.len());
    for (_, p) in preds {
        let p = resample_polyline(p, resample_n)?;
        dist.push(gs.iter().map(|g| chamfer_resampled(&p, g)).collect());
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.0).collect();
    Ok(match_with_distances(&scores, &dist, gts.len(), tau))
}

/// Recall and precision after each prediction in descending-score order.
pub fn pr_curve(scored: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let mut tp = 0usize;
    ranking(&scores)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            if scored[i].1 {
                tp += 1;
            }
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (rank + 1) as f64)
        })
        .collect()
}

/// Area under the max-interpolated precision envelope. With no ground truth
/// the AP is 1 for an empty prediction list and 0 otherwise.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(scored, num_gt);
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

struct Prepared {
    class: ElementClass,
    score: f64,
    points: Vec<Point>,
}

fn prepare_predictions(set: &PredictionSet, cfg: &EvalConfig) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for e in &set.elements {
        let score = e.score.unwrap_or(1.0);
        if score < cfg.score_floor {
            continue;
        }
        let points = resample_polyline(&e.points, cfg.resample_n)
            .map_err(|err| Error::Validation(format!("sample {}: prediction: {err}", set.sample_id)))?;
        out.push(Prepared { class: e.class, score, points });
    }
    Ok(out)
}

/// Evaluates predictions against ground truth. Samples without predictions
/// count as empty prediction sets; predictions for unknown samples are an
/// error.
pub fn mean_ap(preds: &[PredictionSet], gts: &[MapSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut by_id: BTreeMap<&str, &PredictionSet> = BTreeMap::new();
    for p in preds {
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(Error::Validation(format!("sample {}: duplicate prediction set", p.sample_id)));
        }
    }
    let known: BTreeMap<&str, ()> = gts.iter().map(|g| (g.sample_id.as_str(), ())).collect();
    if let Some(p) = preds.iter().find(|p| !known.contains_key(p.sample_id.as_str())) {
        return Err(Error::Validation(format!("sample {}: no ground truth for predictions", p.sample_id)));
    }

    let nt = cfg.thresholds.len();
    // scored[class][tau] collects (score, tp) over all samples.
    let mut scored: Vec<Vec<Vec<(f64, bool)>>> = vec![vec![Vec::new(); nt]; NUM_CLASSES];
    let mut num_gt = [0usize; NUM_CLASSES];
    for sample in gts {
        let prepared = match by_id.get(sample.sample_id.as_str()) {
            Some(p) => prepare_predictions(p, cfg)?,
            None => Vec::new(),
        };
        for class in ElementClass::ALL {
            let gt: Vec<Vec<Point>> = sample
                .ground_truth
                .iter()
                .filter(|e| e.class == class)
                .map(|e| resample_polyline(&e.points, cfg.resample_n))
                .collect::<Result<_>>()
                .map_err(|err| Error::Validation(format!("sample {}: ground truth: {err}", sample.sample_id)))?;
            num_gt[class.id()] += gt.len();
            let ps: Vec<&Prepared> = prepared.iter().filter(|p| p.class == class).collect();
            let dist: Vec<Vec<f64>> =
                ps.iter().map(|p| gt.iter().map(|g| chamfer_resampled(&p.points, g)).collect()).collect();
            let scores: Vec<f64> = ps.iter().map(|p| p.score).collect();
            for (t, &tau) in cfg.thresholds.iter().enumerate() {
                let tp = match_with_distances(&scores, &dist, gt.len(), tau);
                scored[class.id()][t].extend(scores.iter().copied().zip(tp));
            }
        }
    }

    let mut per_class_per_tau: [Vec<f64>; NUM_CLASSES] = Default::default();
    let mut curves: [Vec<Vec<(f64, f64)>>; NUM_CLASSES] = Default::default();
    let mut per_class = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        for t in 0..nt {
            per_class_per_tau[c].push(average_precision(&scored[c][t], num_gt[c]));
            curves[c].push(pr_curve(&scored[c][t], num_gt[c]));
        }
        per_class[c] = per_class_per_tau[c].iter().sum::<f64>() / nt as f64;
    }
    let map = per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(EvalReport { thresholds: cfg.thresholds.clone(), per_class_per_tau, per_class, map, curves })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_segments_are_offset_apart() {
        let a = [[0.0, 0.0], [0.0, 10.0]];
        let b = [[0.7, 0.0], [0.7, 10.0]];
        assert!((chamfer_distance(&a, &b, 100).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(chamfer_distance(&a, &a, 100).unwrap(), 0.0);
    }

    #[test]
    fn higher_score_wins_the_single_gt() {
        let gt = vec![vec![[0.0, 0.0], [0.0, 5.0]]];
        let preds = vec![(0.3, vec![[0.1, 0.0], [0.1, 5.0]]), (0.9, vec![[0.2, 0.0], [0.2, 5.0]])];
        assert_eq!(match_at_threshold(&preds, &gt, 1.0, 100).unwrap(), vec![false, true]);
        assert_eq!(match_at_threshold(&preds, &[], 1.0, 100).unwrap(), vec![false, false]);
    }

    #[test]
    fn tp_then_fp_is_full_ap() {
        assert_eq!(average_precision(&[(0.9, true), (0.5, false)], 1), 1.0);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[(0.2, false)], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn envelope_uses_later_precision() {
        // FP, TP, TP with two GT: precisions 0, 1/2, 2/3 at recalls 0, 1/2, 1.
        let ap = average_precision(&[(0.9, false), (0.8, true), (0.7, true)], 2);
        assert!((ap - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bad_thresholds_are_rejected() {
        let cfg = EvalConfig { thresholds: vec![], ..EvalConfig::default() };
        assert!(matches!(mean_ap(&[], &[], &cfg), Err(Error::Config(_))));
    }
}
