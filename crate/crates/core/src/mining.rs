//! Dual-threshold pseudo-label filter with prototype adjudication of the
//! mid-confidence band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, norm, roi_align_with, BBox, FeatureMap, RoiAlignConfig};
use crate::prototypes::PrototypeSet;
use crate::store::dataset::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum UpperThreshold {
    Fixed { value: f64 },
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicParams {
    pub beta: f64,
    pub init: f64,
    /// Upper clamp; the lower clamp is `tau_low + 0.1`.
    pub max: f64,
}

impl Default for DynamicParams {
    fn default() -> Self {
        Self {
            beta: 0.99,
            init: 0.7,
            max: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub tau_low: f64,
    pub tau_high: UpperThreshold,
    /// Cosine needed to accept a mid-band prediction. Any value above 1
    /// disables mining, leaving the plain `score >= tau_high` filter.
    pub sim_threshold: f64,
    pub dynamic: DynamicParams,
    pub bins: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tau_low: 0.3,
            tau_high: UpperThreshold::Dynamic,
            sim_threshold: 0.5,
            dynamic: DynamicParams::default(),
            bins: 7,
        }
    }
}

impl MiningConfig {
    /// Single threshold `tau`: accept `score >= tau`, never mine.
    pub fn fixed(tau: f64) -> Self {
        Self {
            tau_low: tau,
            tau_high: UpperThreshold::Fixed { value: tau },
            sim_threshold: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn lower_clamp(&self) -> f64 {
        self.tau_low + 0.1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(m));
        if !(0.0..=1.0).contains(&self.tau_low) {
            return err(format!("tau_low {} outside [0, 1]", self.tau_low));
        }
        match self.tau_high {
            UpperThreshold::Fixed { value } => {
                if !(self.tau_low..=1.0).contains(&value) {
                    return err(format!("fixed tau_high {value} outside [tau_low, 1]"));
                }
            }
            UpperThreshold::Dynamic => {
                let d = &self.dynamic;
                if !(self.lower_clamp() < d.max && d.max <= 1.0) {
                    return err(format!(
                        "dynamic clamp [{}, {}] is empty or exceeds 1",
                        self.lower_clamp(),
                        d.max
                    ));
                }
                if !(0.0..1.0).contains(&d.beta) || !d.init.is_finite() {
                    return err(format!("dynamic beta {} outside [0, 1)", d.beta));
                }
            }
        }
        if self.sim_threshold.is_nan() || self.sim_threshold <= -1.0 {
            return err(format!(
                "sim_threshold {} must exceed -1",
                self.sim_threshold
            ));
        }
        if self.bins == 0 {
            return err("bins must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicThresholdState {
    pub tau_high: f64,
    /// Mean qualifying score of the most recent non-empty batch.
    pub last_batch_mean: Option<f64>,
    pub updates: usize,
}

impl DynamicThresholdState {
    pub fn new(cfg: &MiningConfig) -> Self {
        let tau_high = match cfg.tau_high {
            UpperThreshold::Fixed { value } => value,
            UpperThreshold::Dynamic => cfg.dynamic.init.clamp(cfg.lower_clamp(), cfg.dynamic.max),
        };
        Self {
            tau_high,
            last_batch_mean: None,
            updates: 0,
        }
    }
}

/// `tau_high <- clamp(beta * tau_high + (1 - beta) * mean(s > tau_low))`.
/// Batches without a qualifying score, and fixed mode, leave the state unchanged.
pub fn update_dynamic_threshold(
    state: &DynamicThresholdState,
    scores: &[f64],
    cfg: &MiningConfig,
) -> DynamicThresholdState {
    if cfg.tau_high != UpperThreshold::Dynamic {
        return *state;
    }
    let qualifying: Vec<f64> = scores
        .iter()
        .copied()
        .filter(|s| *s > cfg.tau_low)
        .collect();
    if qualifying.is_empty() {
        return *state;
    }
    let mean = qualifying.iter().sum::<f64>() / qualifying.len() as f64;
    let beta = cfg.dynamic.beta;
    DynamicThresholdState {
        tau_high: (beta * state.tau_high + (1.0 - beta) * mean)
            .clamp(cfg.lower_clamp(), cfg.dynamic.max),
        last_batch_mean: Some(mean),
        updates: state.updates + 1,
    }
}

/// Which model produced a prediction set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub provenance: Provenance,
    pub detections: Vec<Detection>,
}

impl Predictions {
    pub fn teacher(detections: Vec<Detection>) -> Self {
        Self {
            provenance: Provenance::Teacher,
            detections,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptTag {
    Direct,
    Mined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BelowLow,
    SimFail,
    ClassMismatch,
    BgMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptedLabel {
    /// Position in the input prediction list.
    pub index: usize,
    pub detection: Detection,
    pub tag: AcceptTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedLabel {
    pub index: usize,
    pub detection: Detection,
    pub reason: RejectReason,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectCounts {
    pub below_low: usize,
    pub sim_fail: usize,
    pub class_mismatch: usize,
    pub bg_match: usize,
    /// Subset of `sim_fail` caused by a class without prototypes.
    pub absent_prototypes: usize,
}

impl RejectCounts {
    pub fn total(&self) -> usize {
        self.below_low + self.sim_fail + self.class_mismatch + self.bg_match
    }

    fn bump(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::BelowLow => self.below_low += 1,
            RejectReason::SimFail => self.sim_fail += 1,
            RejectReason::ClassMismatch => self.class_mismatch += 1,
            RejectReason::BgMatch => self.bg_match += 1,
        }
    }

    pub fn add(&mut self, other: &RejectCounts) {
        self.below_low += other.below_low;
        self.sim_fail += other.sim_fail;
        self.class_mismatch += other.class_mismatch;
        self.bg_match += other.bg_match;
        self.absent_prototypes += other.absent_prototypes;
    }
}

/// Mining outcome for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinedLabelSet {
    pub accepted: Vec<AcceptedLabel>,
    pub rejected: Vec<RejectedLabel>,
    pub counts: RejectCounts,
    /// Number of predictions pooled and compared against prototypes.
    pub similarity_evaluations: usize,
}

impl MinedLabelSet {
    pub fn accepted_detections(&self) -> Vec<Detection> {
        self.accepted.iter().map(|a| a.detection.clone()).collect()
    }

    pub fn num_direct(&self) -> usize {
        self.accepted
            .iter()
            .filter(|a| a.tag == AcceptTag::Direct)
            .count()
    }

    pub fn num_mined(&self) -> usize {
        self.accepted
            .iter()
            .filter(|a| a.tag == AcceptTag::Mined)
            .count()
    }
}

/// Best-matching prototype over every present class including background.
/// Ties go to the lowest class id, then the lowest component.
pub fn nearest_prototype(feature: &[f64], protos: &PrototypeSet) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (c, k, centroid) in protos.iter_centroids() {
        let Ok(s) = cosine_similarity(feature, centroid) else {
            continue;
        };
        if best.is_none_or(|b| s > b.2) {
            best = Some((c, k, s));
        }
    }
    best
}

/// Filters teacher predictions for one image against its stored VFM map.
///
/// Without prototypes every mid-band prediction is rejected as `sim_fail`.
pub fn mine(
    predictions: &Predictions,
    vfm_map: &FeatureMap<f64>,
    protos: Option<&PrototypeSet>,
    cfg: &MiningConfig,
    state: &DynamicThresholdState,
) -> Result<MinedLabelSet> {
    if predictions.provenance != Provenance::Teacher {
        return Err(Error::Validation(
            "pseudo-labels must come from the teacher".into(),
        ));
    }
    if let Some(p) = protos {
        if p.channels != vfm_map.channels() {
            return Err(Error::Domain(format!(
                "prototypes have {} channels, VFM map has {}",
                p.channels,
                vfm_map.channels()
            )));
        }
    }
    let roi = RoiAlignConfig::with_bins(cfg.bins);
    let mut out = MinedLabelSet::default();
    for (index, det) in predictions.detections.iter().enumerate() {
        let score = det
            .score
            .ok_or_else(|| Error::Validation(format!("prediction {index} has no score")))?;
        let reject = |out: &mut MinedLabelSet, reason| {
            out.counts.bump(reason);
            out.rejected.push(RejectedLabel {
                index,
                detection: det.clone(),
                reason,
            });
        };
        if score >= state.tau_high {
            out.accepted.push(AcceptedLabel {
                index,
                detection: det.clone(),
                tag: AcceptTag::Direct,
                similarity: None,
            });
            continue;
        }
        if score < cfg.tau_low {
            reject(&mut out, RejectReason::BelowLow);
            continue;
        }
        let Some(protos) =
            protos.filter(|p| p.is_present(det.class_id) && det.class_id != p.background_id())
        else {
            out.counts.absent_prototypes += 1;
            reject(&mut out, RejectReason::SimFail);
            continue;
        };
        let bg = protos.background_id();
        out.similarity_evaluations += 1;
        let best = roi_align_with(vfm_map, &det.bbox, roi)
            .ok()
            .and_then(|f| nearest_prototype(&f, protos));
        match best {
            None => reject(&mut out, RejectReason::SimFail),
            Some((_, _, s)) if s < cfg.sim_threshold => reject(&mut out, RejectReason::SimFail),
            Some((c, _, _)) if c == bg => reject(&mut out, RejectReason::BgMatch),
            Some((c, _, _)) if c != det.class_id => reject(&mut out, RejectReason::ClassMismatch),
            Some((_, _, s)) => out.accepted.push(AcceptedLabel {
                index,
                detection: det.clone(),
                tag: AcceptTag::Mined,
                similarity: Some(s),
            }),
        }
    }
    Ok(out)
}

/// Per-cell cosine between the pooled reference box and every cell; zero-norm cells score 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SimilarityMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn similarity_map(vfm_map: &FeatureMap<f64>, reference: &BBox<f64>) -> Result<SimilarityMap> {
    let f = roi_align_with(vfm_map, reference, RoiAlignConfig::default())?;
    let n = norm(&f);
    if n < 1e-12 {
        return Err(Error::DegenerateVector { norm: n });
    }
    let values = vfm_map
        .cells()
        .map(|cell| cosine_similarity(&f, cell).unwrap_or(0.0))
        .collect();
    Ok(SimilarityMap {
        height: vfm_map.height(),
        width: vfm_map.width(),
        values,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub predictions: usize,
    pub ground_truth: usize,
}

impl MatchCounts {
    pub fn add(&mut self, o: &MatchCounts) {
        self.true_positives += o.true_positives;
        self.predictions += o.predictions;
        self.ground_truth += o.ground_truth;
    }

    /// Empty prediction sets have precision 1 by convention.
    pub fn precision(&self) -> f64 {
        if self.predictions == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.predictions as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.ground_truth == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.ground_truth as f64
        }
    }

    pub fn f1(&self) -> f64 {
        if self.true_positives == 0 {
            return 0.0;
        }
        let (p, r) = (self.precision(), self.recall());
        2.0 * p * r / (p + r)
    }
}

/// Greedy matching in descending score order: each prediction takes the
/// unmatched same-class ground-truth box of highest IoU, if that IoU >= `iou`.
/// Returns, per prediction, the matched ground-truth index.
pub fn greedy_match(preds: &[Detection], gt: &[Detection], iou: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (preds[a].score.unwrap_or(1.0), preds[b].score.unwrap_or(1.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || g.class_id != p.class_id {
                continue;
            }
            let v = p.bbox.iou(&g.bbox);
            if v >= iou && best.is_none_or(|b| v > b.1) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

pub fn match_counts(preds: &[Detection], gt: &[Detection], iou: f64) -> MatchCounts {
    MatchCounts {
        true_positives: greedy_match(preds, gt, iou)
            .iter()
            .filter(|m| m.is_some())
            .count(),
        predictions: preds.len(),
        ground_truth: gt.len(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    pub direct: usize,
    pub mined: usize,
    pub rejections: RejectCounts,
    pub similarity_evaluations: usize,
}

/// Pseudo-label quality of mined sets against ground truth, pooled over images.
pub fn mining_report<'a>(
    items: impl IntoIterator<Item = (&'a MinedLabelSet, &'a [Detection])>,
    iou_match: f64,
) -> MiningReport {
    let mut r = MiningReport::default();
    for (mined, gt) in items {
        r.counts
            .add(&match_counts(&mined.accepted_detections(), gt, iou_match));
        r.direct += mined.num_direct();
        r.mined += mined.num_mined();
        r.rejections.add(&mined.counts);
        r.similarity_evaluations += mined.similarity_evaluations;
    }
    r.precision = r.counts.precision();
    r.recall = r.counts.recall();
    r.f1 = r.counts.f1();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::{ClassPrototypes, PrototypeMeta, PROTOTYPE_SCHEMA_VERSION};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// 2 classes + BG with axis-aligned unit prototypes in 3 channels.
    fn protos() -> PrototypeSet {
        let cls = |id: usize, v: Vec<f64>| ClassPrototypes {
            class_id: id,
            present: true,
            centroids: vec![v],
            counts: vec![1],
        };
        PrototypeSet {
            schema_version: PROTOTYPE_SCHEMA_VERSION,
            channels: 3,
            components: 1,
            num_classes: 2,
            classes: vec![
                cls(0, vec![1.0, 0.0, 0.0]),
                cls(1, vec![0.0, 1.0, 0.0]),
                cls(2, vec![0.0, 0.0, 1.0]),
            ],
            meta: PrototypeMeta::default(),
        }
    }

    /// Left half channel 0 (class 0), right half channel 2 (background).
    fn map() -> FeatureMap<f64> {
        FeatureMap::from_fn(4, 8, 3, 1.0, |_, x, c| {
            if (x < 4) == (c == 0) && c != 1 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn cfg() -> MiningConfig {
        MiningConfig {
            tau_high: UpperThreshold::Fixed { value: 0.9 },
            ..MiningConfig::default()
        }
    }

    #[test]
    fn rules_and_partition() {
        let preds = Predictions::teacher(vec![
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 1, 0.96),
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 0, 0.1),
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 0, 0.5),
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 1, 0.5),
            Detection::prediction(b(4.0, 0.0, 8.0, 4.0), 0, 0.5),
        ]);
        let c = cfg();
        let r = mine(
            &preds,
            &map(),
            Some(&protos()),
            &c,
            &DynamicThresholdState::new(&c),
        )
        .unwrap();
        assert_eq!(r.accepted.len() + r.rejected.len(), 5);
        assert_eq!(r.accepted[0].tag, AcceptTag::Direct);
        assert_eq!(r.accepted[1].index, 2);
        assert_eq!(r.accepted[1].tag, AcceptTag::Mined);
        assert_eq!(r.counts.below_low, 1);
        assert_eq!(r.counts.class_mismatch, 1);
        assert_eq!(r.counts.bg_match, 1);
        assert_eq!(r.similarity_evaluations, 3);
    }

    #[test]
    fn student_predictions_refused() {
        let preds = Predictions {
            provenance: Provenance::Student,
            detections: vec![],
        };
        let c = cfg();
        assert!(mine(
            &preds,
            &map(),
            Some(&protos()),
            &c,
            &DynamicThresholdState::new(&c)
        )
        .is_err());
    }

    #[test]
    fn absent_class_is_sim_fail() {
        let mut p = protos();
        p.classes[1] = ClassPrototypes {
            class_id: 1,
            present: false,
            centroids: vec![],
            counts: vec![],
        };
        let preds =
            Predictions::teacher(vec![Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 1, 0.5)]);
        let c = cfg();
        let r = mine(
            &preds,
            &map(),
            Some(&p),
            &c,
            &DynamicThresholdState::new(&c),
        )
        .unwrap();
        assert_eq!(r.counts.sim_fail, 1);
        assert_eq!(r.counts.absent_prototypes, 1);
        assert_eq!(r.similarity_evaluations, 0);
    }

    #[test]
    fn dynamic_threshold_updates() {
        let c = MiningConfig::default();
        let s = DynamicThresholdState::new(&c);
        assert_eq!(update_dynamic_threshold(&s, &[], &c), s);
        assert_eq!(update_dynamic_threshold(&s, &[0.1, 0.2], &c), s);
        let c0 = MiningConfig {
            dynamic: DynamicParams {
                beta: 0.0,
                ..DynamicParams::default()
            },
            ..c
        };
        let s1 = update_dynamic_threshold(&s, &[0.7, 0.9, 0.1], &c0);
        assert!((s1.tau_high - 0.8).abs() < 1e-15);
        assert_eq!(s1.updates, 1);
        let hi = update_dynamic_threshold(&s, &[1.0], &c0);
        assert_eq!(hi.tau_high, 0.95);
    }

    #[test]
    fn fixed_config_never_mines() {
        let c = MiningConfig::fixed(0.4);
        c.validate().unwrap();
        let preds = Predictions::teacher(vec![
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 0, 0.39),
            Detection::prediction(b(0.0, 0.0, 4.0, 4.0), 0, 0.4),
        ]);
        let r = mine(
            &preds,
            &map(),
            Some(&protos()),
            &c,
            &DynamicThresholdState::new(&c),
        )
        .unwrap();
        assert_eq!(r.accepted.len(), 1);
        assert_eq!(r.accepted[0].index, 1);
        assert_eq!(r.similarity_evaluations, 0);
    }

    #[test]
    fn config_validation() {
        assert!(MiningConfig::default().validate().is_ok());
        let bad = MiningConfig {
            tau_low: 0.9,
            ..MiningConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MiningConfig {
            sim_threshold: -1.0,
            ..MiningConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn similarity_map_shapes_and_constant() {
        let m = FeatureMap::new(3, 5, 2, 2.0, vec![0.5; 30]).unwrap();
        let s = similarity_map(&m, &b(0.0, 0.0, 4.0, 4.0)).unwrap();
        assert_eq!((s.height, s.width), (3, 5));
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let z = FeatureMap::new(3, 5, 2, 2.0, vec![0.0; 30]).unwrap();
        assert!(similarity_map(&z, &b(0.0, 0.0, 4.0, 4.0)).is_err());
    }

    #[test]
    fn report_conventions() {
        let gt = vec![
            Detection::annotation(b(0.0, 0.0, 10.0, 10.0), 0),
            Detection::annotation(b(20.0, 20.0, 30.0, 30.0), 1),
        ];
        let perfect = MinedLabelSet {
            accepted: gt
                .iter()
                .enumerate()
                .map(|(i, g)| AcceptedLabel {
                    index: i,
                    detection: Detection::prediction(g.bbox, g.class_id, 0.9),
                    tag: AcceptTag::Direct,
                    similarity: None,
                })
                .collect(),
            ..MinedLabelSet::default()
        };
        let r = mining_report([(&perfect, gt.as_slice())], 0.5);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let empty = MinedLabelSet::default();
        let r = mining_report([(&empty, gt.as_slice())], 0.5);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn greedy_prefers_higher_score() {
        let gt = vec![Detection::annotation(b(0.0, 0.0, 10.0, 10.0), 0)];
        let preds = vec![
            Detection::prediction(b(0.0, 0.0, 10.0, 10.0), 0, 0.4),
            Detection::prediction(b(1.0, 0.0, 10.0, 10.0), 0, 0.8),
        ];
        assert_eq!(greedy_match(&preds, &gt, 0.5), vec![None, Some(0)]);
    }
}
