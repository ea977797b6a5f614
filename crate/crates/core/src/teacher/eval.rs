use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::greedy_match;
use crate::numerics::{argmax, softmax};
use crate::store::dataset::Detection;
use crate::store::runlog::{EvalSummary, RunLog};
use crate::teacher::data::{Corpus, SimImage};
use crate::teacher::detector::{forward, ToyDetector};

/// One detection per kept proposal: class = argmax foreground probability,
/// score = that probability. Proposals classified as background are included
/// (mining needs the low-confidence tail).
pub fn proposal_predictions(
    det: &ToyDetector,
    image: &SimImage,
    num_classes: usize,
) -> Result<(Vec<Detection>, Vec<usize>)> {
    let fwd = forward(det, &image.input, &image.proposals)?;
    let mut dets = Vec::with_capacity(fwd.kept.len());
    let mut labels = Vec::with_capacity(fwd.kept.len());
    for (r, &i) in fwd.kept.iter().enumerate() {
        let p = softmax(&fwd.logits[r]);
        let c = argmax(&p[..num_classes]).expect("at least one class");
        dets.push(Detection::prediction(
            image.proposals[i],
            c,
            p[c].clamp(0.0, 1.0),
        ));
        labels.push(argmax(&p).expect("non-empty"));
    }
    Ok((dets, labels))
}

/// All-point interpolated AP of score-ranked detections of one class.
/// `preds[i]` pairs an image index with its detection.
pub fn average_precision(
    preds: &[(usize, Detection)],
    gt: &[Vec<Detection>],
    class: usize,
    iou: f64,
) -> Option<f64> {
    let n_gt: usize = gt
        .iter()
        .map(|g| g.iter().filter(|d| d.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&(usize, Detection)> =
        preds.iter().filter(|(_, d)| d.class_id == class).collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .unwrap_or(0.0)
            .total_cmp(&a.1.score.unwrap_or(0.0))
    });
    // matching is per image but must follow the global score order
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); gt.len()];
    for (rank, (img, _)) in ranked.iter().enumerate() {
        per_image[*img].push(rank);
    }
    let mut hit = vec![false; ranked.len()];
    for (img, ranks) in per_image.iter().enumerate() {
        if ranks.is_empty() {
            continue;
        }
        let dets: Vec<Detection> = ranks.iter().map(|&r| ranked[r].1.clone()).collect();
        for (k, m) in greedy_match(&dets, &gt[img], iou).into_iter().enumerate() {
            hit[ranks[k]] = m.is_some();
        }
    }
    Some(ap_from_hits(&hit, n_gt))
}

/// Area under the monotone precision envelope for a ranked hit list.
pub fn ap_from_hits(hit: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0.0;
    let mut precision = Vec::with_capacity(hit.len());
    let mut recall = Vec::with_capacity(hit.len());
    for (i, h) in hit.iter().enumerate() {
        if *h {
            tp += 1.0;
        }
        precision.push(tp / (i + 1) as f64);
        recall.push(tp / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// mAP at IoU 0.5 over detections whose argmax is a foreground class, and
/// proposal accuracy against proposal targets.
pub fn evaluate(det: &ToyDetector, corpus: &Corpus, images: &[usize]) -> Result<EvalSummary> {
    if images.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let c = corpus.num_classes;
    let mut preds = Vec::new();
    let mut gts = Vec::with_capacity(images.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for (slot, &i) in images.iter().enumerate() {
        let im = &corpus.images[i];
        let fwd = forward(det, &im.input, &im.proposals)?;
        for (r, &p) in fwd.kept.iter().enumerate() {
            let probs = softmax(&fwd.logits[r]);
            let label = argmax(&probs).expect("non-empty");
            total += 1;
            if label == im.targets[p] {
                correct += 1;
            }
            if label < c {
                preds.push((
                    slot,
                    Detection::prediction(im.proposals[p], label, probs[label].clamp(0.0, 1.0)),
                ));
            }
        }
        gts.push(im.gt.clone());
    }
    let per_class_ap: Vec<Option<f64>> = (0..c)
        .map(|k| average_precision(&preds, &gts, k, 0.5))
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let mean_ap = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalSummary {
        mean_ap,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        per_class_ap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMetric {
    MeanAp,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub metric: StabilityMetric,
    pub peak: f64,
    pub peak_step: usize,
    pub final_value: f64,
    /// `(peak - final) / peak`, 0 when the peak is 0.
    pub relative_drop: f64,
    pub collapsed: bool,
    /// First evaluated step after the peak at which the drop exceeded the threshold.
    pub collapse_step: Option<usize>,
}

pub const COLLAPSE_DROP: f64 = 0.10;

/// Peak and final value of the evaluation trace; collapse when the final value
/// sits more than 10% (relative) below the peak.
pub fn stability_report(log: &RunLog, metric: StabilityMetric) -> Result<StabilityReport> {
    let points: Vec<(usize, f64)> = log
        .records
        .iter()
        .filter_map(|r| {
            r.eval.as_ref().map(|e| {
                (
                    r.step,
                    match metric {
                        StabilityMetric::MeanAp => e.mean_ap,
                        StabilityMetric::Accuracy => e.accuracy,
                    },
                )
            })
        })
        .collect();
    stability_from_points(&points, metric)
}

pub fn stability_from_points(
    points: &[(usize, f64)],
    metric: StabilityMetric,
) -> Result<StabilityReport> {
    if points.len() < 2 {
        return Err(Error::Validation(
            "stability needs at least two evaluation points".into(),
        ));
    }
    let (mut peak_step, mut peak) = points[0];
    for &(s, v) in points {
        if v > peak {
            peak = v;
            peak_step = s;
        }
    }
    let final_value = points[points.len() - 1].1;
    let relative_drop = if peak > 0.0 {
        (peak - final_value) / peak
    } else {
        0.0
    };
    let collapsed = peak - final_value > COLLAPSE_DROP * peak;
    let collapse_step = if collapsed {
        points
            .iter()
            .filter(|(s, _)| *s > peak_step)
            .find(|(_, v)| peak - v > COLLAPSE_DROP * peak)
            .map(|(s, _)| *s)
    } else {
        None
    };
    Ok(StabilityReport {
        metric,
        peak,
        peak_step,
        final_value,
        relative_drop,
        collapsed,
        collapse_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::BBox;

    #[test]
    fn ap_cases() {
        assert_eq!(ap_from_hits(&[true, true], 2), 1.0);
        assert_eq!(ap_from_hits(&[], 3), 0.0);
        // hits at ranks 1 and 3: recall 0.5 at p=1, recall 1 at p=2/3
        assert!((ap_from_hits(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ap_none_without_ground_truth() {
        let d = Detection::prediction(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 0.5);
        assert_eq!(average_precision(&[(0, d)], &[vec![]], 0, 0.5), None);
    }

    #[test]
    fn stability_flags() {
        let up = [(0, 0.1), (10, 0.3), (20, 0.5)];
        assert!(
            !stability_from_points(&up, StabilityMetric::MeanAp)
                .unwrap()
                .collapsed
        );
        let r = stability_from_points(
            &[(0, 0.2), (10, 0.8), (20, 0.6), (30, 0.4)],
            StabilityMetric::MeanAp,
        )
        .unwrap();
        assert!(r.collapsed);
        assert!((r.relative_drop - 0.5).abs() < 1e-15);
        assert_eq!(r.collapse_step, Some(20));
        assert!(stability_from_points(&[(0, 1.0)], StabilityMetric::MeanAp).is_err());
    }
}
