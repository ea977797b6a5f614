use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    aggregate_backward, aggregate_prototypes, collect_class_queries, contrastive_loss,
    image_alignment_loss, sinkhorn_assign, AssignmentMatrix, BatchPrototypes, ContrastiveConfig,
    SinkhornConfig,
};
use crate::error::{Error, Result};
use crate::mining::{
    match_counts, mine, mining_report, update_dynamic_threshold, DynamicThresholdState,
    MinedLabelSet, MiningConfig, MiningReport, Predictions,
};
use crate::numerics::{argmax, cosine_similarity, streams, FeatureMap, Rng};
use crate::prototypes::{extract_prototypes_from, LabeledImage, PrototypeConfig, PrototypeSet};
use crate::store::runlog::{EvalSummary, LossBreakdown, PseudoLabelStats, RunLog, StepRecord};
use crate::synth::{strong_augment, AugmentConfig, DomainShift, World, WorldConfig};
use crate::teacher::data::Corpus;
use crate::teacher::detector::{backward, forward, Forward, ForwardGrads, Model, ModelDims};
use crate::teacher::ema::ema_update;
use crate::teacher::eval::{evaluate, proposal_predictions};
use crate::teacher::loss::detection_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Unlabeled target data only, fixed-threshold pseudo-labels.
    SourceFree,
    /// Labeled + unlabeled, fixed-threshold pseudo-labels.
    MtSemi,
    /// Labeled + unlabeled, dual-threshold mining against the prototypes.
    Vpm,
    /// Mining plus instance- and image-level alignment.
    FullVg,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SourceFree, Mode::MtSemi, Mode::Vpm, Mode::FullVg];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceFree => "source_free",
            Mode::MtSemi => "mt_semi",
            Mode::Vpm => "vpm",
            Mode::FullVg => "full_vg",
        }
    }

    pub fn uses_labels(self) -> bool {
        self != Mode::SourceFree
    }

    pub fn uses_mining(self) -> bool {
        matches!(self, Mode::Vpm | Mode::FullVg)
    }

    pub fn uses_alignment(self) -> bool {
        self == Mode::FullVg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown mode {s:?} (source_free, mt_semi, vpm, full_vg)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkhornInit {
    /// Standard-normal logits.
    Random,
    /// Cosine to a running mean of each component (random until one exists).
    Affinity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// EMA decay of the teacher.
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    /// Labeled images per step.
    pub batch_size: usize,
    /// Unlabeled images per step.
    pub unlabeled_batch: usize,
    pub unsup_weight: f64,
    pub lambda_con: f64,
    pub lambda_sim: f64,
    /// Used by `vpm` and `full_vg`.
    pub mining: MiningConfig,
    /// Single score threshold of `source_free` and `mt_semi`.
    pub fixed_threshold: f64,
    pub augment: AugmentConfig,
    pub sinkhorn: SinkhornConfig,
    pub sinkhorn_init: SinkhornInit,
    pub contrastive: ContrastiveConfig,
    pub prototypes: PrototypeConfig,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub relu: bool,
    pub bins: usize,
    /// Supervised steps on the unshifted source world before adaptation.
    pub pretrain_steps: usize,
    pub eval_every: usize,
    pub eval_model: EvalModel,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FullVg,
            alpha: 0.999,
            lr: 0.05,
            steps: 2000,
            batch_size: 4,
            unlabeled_batch: 4,
            unsup_weight: 1.0,
            lambda_con: 0.1,
            lambda_sim: 1.0,
            mining: MiningConfig::default(),
            fixed_threshold: 0.3,
            augment: AugmentConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            sinkhorn_init: SinkhornInit::Random,
            contrastive: ContrastiveConfig::default(),
            prototypes: PrototypeConfig::default(),
            feature_dim: 16,
            hidden_dim: 16,
            relu: false,
            bins: 7,
            pretrain_steps: 300,
            eval_every: 100,
            eval_model: EvalModel::Teacher,
            seed: 1,
        }
    }
}

impl TrainerConfig {
    /// Settings of the synthetic benchmarks: a faster teacher so that it keeps
    /// up with the student over a 2000-step horizon.
    pub fn benchmark(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            alpha: 0.99,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Validation(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return err(format!("alpha {} outside [0, 1)", self.alpha));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("unsup_weight", self.unsup_weight),
            ("lambda_con", self.lambda_con),
            ("lambda_sim", self.lambda_sim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.fixed_threshold) {
            return err(format!(
                "fixed_threshold {} outside [0, 1]",
                self.fixed_threshold
            ));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.bins == 0 {
            return err("feature_dim, hidden_dim and bins must be >= 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.mode.uses_labels() && self.batch_size == 0 && self.unlabeled_batch == 0 {
            return err("empty batches".into());
        }
        if !self.mode.uses_labels() && self.unlabeled_batch == 0 {
            return err("source_free needs unlabeled_batch >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.augment.drop_rate) || !(self.augment.noise_sigma >= 0.0) {
            return err("augment drop_rate must lie in [0, 1] and noise_sigma be >= 0".into());
        }
        self.mining.validate()
    }

    /// Mining rule actually applied in this mode.
    pub fn effective_mining(&self) -> MiningConfig {
        if self.mode.uses_mining() {
            MiningConfig {
                bins: self.bins,
                ..self.mining
            }
        } else {
            MiningConfig {
                bins: self.bins,
                ..MiningConfig::fixed(self.fixed_threshold)
            }
        }
    }

    fn lambdas(&self) -> (f64, f64) {
        if self.mode.uses_alignment() {
            (self.lambda_con, self.lambda_sim)
        } else {
            (0.0, 0.0)
        }
    }

    pub fn dims(&self, corpus: &Corpus) -> ModelDims {
        ModelDims {
            input_channels: corpus.input_channels(),
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            vfm_channels: corpus.vfm_channels(),
            num_classes: corpus.num_classes,
            relu: self.relu,
            bins: self.bins,
        }
    }
}

/// Parameter dump written at evaluation points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub student: Model,
    pub teacher: Model,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Hex SHA-256 of [`Checkpoint::to_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn sample(rng: &mut Rng, pool: &[usize], n: usize) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| pool[rng.below(pool.len())]).collect()
}

/// Plain supervised SGD on the labeled split, unaugmented views. Returns the
/// loss of every step.
pub fn fit_supervised(
    model: &mut Model,
    corpus: &Corpus,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed, streams::BATCH);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = sample(&mut rng, &corpus.labeled, batch_size);
        let mut fwds = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for &i in &batch {
            let im = &corpus.images[i];
            let f = forward(&model.detector, &im.input, &im.proposals)?;
            logits.extend(f.logits.iter().cloned());
            targets.extend(f.kept.iter().map(|&p| im.targets[p]));
            fwds.push(f);
        }
        let loss = detection_loss(&logits, &targets)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite(format!("supervised loss {}", loss.value)));
        }
        let mut grad = model.zeros_like();
        let mut offset = 0;
        for (&i, f) in batch.iter().zip(&fwds) {
            let n = f.kept.len();
            let up = ForwardGrads {
                logits: loss.grads[offset..offset + n].to_vec(),
                ..ForwardGrads::default()
            };
            offset += n;
            backward(
                &model.detector,
                &corpus.images[i].input,
                f,
                &up,
                &mut grad.detector,
            );
        }
        model.sgd_step(&grad, lr);
        trace.push(loss.value);
    }
    Ok(trace)
}

struct Slot {
    image: usize,
    view: FeatureMap<f64>,
    fwd: Forward,
    targets: Vec<usize>,
    grads: ForwardGrads,
}

impl Slot {
    fn new(image: usize, view: FeatureMap<f64>, fwd: Forward, targets: Vec<usize>) -> Self {
        let rows = fwd.logits.len();
        let width = fwd.logits.first().map_or(0, Vec::len);
        let dim = fwd.features.first().map_or(0, Vec::len);
        Self {
            image,
            grads: ForwardGrads {
                logits: vec![vec![0.0; width]; rows],
                features: vec![vec![0.0; dim]; rows],
                levels: Vec::new(),
            },
            view,
            fwd,
            targets,
        }
    }
}

/// Mean cross-entropy over the rows of `slots`, its gradient added with `weight`.
fn add_detection_loss(slots: &mut [Slot], weight: f64) -> Result<f64> {
    let logits: Vec<Vec<f64>> = slots
        .iter()
        .flat_map(|s| s.fwd.logits.iter().cloned())
        .collect();
    let targets: Vec<usize> = slots
        .iter()
        .flat_map(|s| s.targets.iter().copied())
        .collect();
    let loss = detection_loss(&logits, &targets)?;
    let mut rows = loss.grads.into_iter();
    for s in slots.iter_mut() {
        for g in s.grads.logits.iter_mut() {
            let src = rows.next().expect("one gradient row per logit row");
            for (a, b) in g.iter_mut().zip(src) {
                *a += weight * b;
            }
        }
    }
    Ok(loss.value)
}

/// Owns student, teacher, threshold state and the run log.
pub struct Trainer<'a> {
    pub cfg: TrainerConfig,
    corpus: &'a Corpus,
    protos: Option<PrototypeSet>,
    mining: MiningConfig,
    pub student: Model,
    pub teacher: Model,
    pub threshold: DynamicThresholdState,
    pub log: RunLog,
    step: usize,
    batch_rng: Rng,
    augment_rng: Rng,
    sinkhorn_rng: Rng,
    running: Vec<Vec<Option<Vec<f64>>>>,
}

const RUNNING_MOMENTUM: f64 = 0.9;

impl<'a> Trainer<'a> {
    /// Student and teacher both start from `init`.
    pub fn new(
        cfg: TrainerConfig,
        corpus: &'a Corpus,
        protos: Option<PrototypeSet>,
        init: Model,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.uses_mining() || cfg.mode.uses_alignment() {
            let p = protos.as_ref().ok_or_else(|| {
                Error::Validation(format!("mode {} needs reference prototypes", cfg.mode))
            })?;
            if p.num_classes != corpus.num_classes || p.channels != corpus.vfm_channels() {
                return Err(Error::Validation(
                    "prototypes do not match the dataset".into(),
                ));
            }
        }
        if cfg.mode.uses_labels() && cfg.batch_size > 0 && corpus.labeled.is_empty() {
            return Err(Error::Validation("labeled split is empty".into()));
        }
        if cfg.unlabeled_batch > 0 && corpus.unlabeled.is_empty() {
            return Err(Error::Validation("unlabeled split is empty".into()));
        }
        let mining = cfg.effective_mining();
        let k = protos
            .as_ref()
            .map_or(cfg.prototypes.components, |p| p.components);
        Ok(Self {
            threshold: DynamicThresholdState::new(&mining),
            mining,
            batch_rng: Rng::new(cfg.seed, streams::BATCH),
            augment_rng: Rng::new(cfg.seed, streams::AUGMENT),
            sinkhorn_rng: Rng::new(cfg.seed, streams::SINKHORN),
            running: vec![vec![None; k]; corpus.num_classes],
            student: init.clone(),
            teacher: init,
            log: RunLog::default(),
            step: 0,
            corpus,
            protos,
            cfg,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
        }
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        let m = match self.cfg.eval_model {
            EvalModel::Teacher => &self.teacher,
            EvalModel::Student => &self.student,
        };
        evaluate(&m.detector, self.corpus, &self.corpus.eval)
    }

    fn eval_record(&self, record: &mut StepRecord) -> Result<()> {
        record.eval = Some(self.evaluate()?);
        record.checkpoint_hash = Some(self.checkpoint().hash());
        Ok(())
    }

    /// Step-0 record: evaluation of the initial model.
    pub fn record_initial(&mut self) -> Result<()> {
        if !self.log.records.is_empty() {
            return Ok(());
        }
        let mut r = StepRecord {
            step: 0,
            loss: LossBreakdown::default(),
            tau_high: self.threshold.tau_high,
            pseudo: PseudoLabelStats::default(),
            eval: None,
            checkpoint_hash: None,
        };
        if !self.corpus.eval.is_empty() {
            self.eval_record(&mut r)?;
        }
        self.log.push(r)
    }

    /// Runs the configured number of steps, evaluating every `eval_every`
    /// steps and at the end.
    pub fn run(&mut self) -> Result<&RunLog> {
        self.record_initial()?;
        for _ in 0..self.cfg.steps {
            let mut r = self.train_step()?;
            if (self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps)
                && !self.corpus.eval.is_empty()
            {
                self.eval_record(&mut r)?;
            }
            self.log.push(r)?;
        }
        Ok(&self.log)
    }

    fn pseudo_labels(&mut self, image: usize) -> Result<(MinedLabelSet, Vec<usize>, Vec<f64>)> {
        let im = &self.corpus.images[image];
        let c = self.corpus.num_classes;
        let (dets, _) = proposal_predictions(&self.teacher.detector, im, c)?;
        let scores: Vec<f64> = dets.iter().map(|d| d.score.unwrap_or(0.0)).collect();
        let mined = mine(
            &Predictions::teacher(dets),
            &im.vfm,
            self.protos.as_ref(),
            &self.mining,
            &self.threshold,
        )?;
        let mut targets = vec![c; scores.len()];
        for a in &mined.accepted {
            targets[a.index] = a.detection.class_id;
        }
        Ok((mined, targets, scores))
    }

    fn sinkhorn_init(&mut self, class: usize, queries: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = queries.len();
        let running = &self.running[class];
        if self.cfg.sinkhorn_init == SinkhornInit::Affinity && running.iter().all(Option::is_some) {
            let mut init = Vec::with_capacity(n * k);
            for q in queries {
                for m in running.iter().flatten() {
                    init.push(cosine_similarity(q, m).unwrap_or(0.0));
                }
            }
            return init;
        }
        (0..n * k).map(|_| self.sinkhorn_rng.normal()).collect()
    }

    /// Instance-level term: per-class Sinkhorn prototypes of the foreground
    /// queries contrasted with the references. Adds `weight`-scaled gradients
    /// to the slots and to `grad`.
    fn contrastive_term(
        &mut self,
        slots: &mut [Slot],
        grad: &mut Model,
        weight: f64,
    ) -> Result<f64> {
        let protos = self.protos.as_ref().expect("checked in new");
        let c = self.corpus.num_classes;
        let k = protos.components;
        let mut owners = Vec::new();
        let mut features = Vec::new();
        let mut logits = Vec::new();
        for (s, slot) in slots.iter().enumerate() {
            for (r, l) in slot.fwd.logits.iter().enumerate() {
                if argmax(l) != Some(c) {
                    owners.push((s, r));
                    features.push(slot.fwd.features[r].clone());
                    logits.push(l[..c].to_vec());
                }
            }
        }
        let batch = crate::align::QueryBatch::new(features, logits)?;
        let mut batch_protos: BatchPrototypes = vec![vec![None; k]; c];
        let mut assignments: Vec<Option<(Vec<usize>, AssignmentMatrix)>> = vec![None; c];
        for class in 0..c {
            let (idx, q) = collect_class_queries(&batch, class);
            if q.is_empty() {
                continue;
            }
            let init = self.sinkhorn_init(class, &q, k);
            let a = sinkhorn_assign(&init, q.len(), k, &self.cfg.sinkhorn)?;
            batch_protos[class] = aggregate_prototypes(&q, &a)?;
            assignments[class] = Some((idx, a));
        }
        let protos = self.protos.as_ref().expect("checked in new");
        let out = contrastive_loss(
            &batch_protos,
            protos,
            &self.student.head,
            &self.cfg.contrastive,
        )?;
        for (class, slot) in assignments.iter().enumerate() {
            let Some((idx, a)) = slot else { continue };
            let g = aggregate_backward(&out.grad_prototypes[class], a, self.cfg.feature_dim);
            for (row, gq) in idx.iter().zip(g) {
                let (s, r) = owners[*row];
                for (d, v) in slots[s].grads.features[r].iter_mut().zip(gq) {
                    *d += weight * v;
                }
            }
        }
        for (dst, src) in grad.head.layers.iter_mut().zip(&out.grad_head.layers) {
            for (d, v) in dst.weight.iter_mut().zip(&src.weight) {
                *d += weight * v;
            }
            for (d, v) in dst.bias.iter_mut().zip(&src.bias) {
                *d += weight * v;
            }
        }
        for (class, row) in batch_protos.iter().enumerate() {
            for (comp, p) in row.iter().enumerate() {
                if let Some(p) = p {
                    let m = &mut self.running[class][comp];
                    *m = Some(match m.take() {
                        Some(old) => old
                            .iter()
                            .zip(p)
                            .map(|(o, v)| RUNNING_MOMENTUM * o + (1.0 - RUNNING_MOMENTUM) * v)
                            .collect(),
                        None => p.clone(),
                    });
                }
            }
        }
        Ok(out.loss)
    }

    /// Image-level term averaged over the batch images.
    fn alignment_term(&self, slots: &mut [Slot], grad: &mut Model, weight: f64) -> Result<f64> {
        let n = slots.len() as f64;
        let mut total = 0.0;
        for slot in slots.iter_mut() {
            let vfm = &self.corpus.images[slot.image].vfm;
            let out = image_alignment_loss(&slot.fwd.levels, vfm, &self.student.convs)?;
            total += out.loss / n;
            let w = weight / n;
            slot.grads.levels = out
                .grad_maps
                .into_iter()
                .map(|g| g.into_iter().map(|v| w * v).collect())
                .collect();
            for (dst, src) in grad.convs.iter_mut().zip(&out.grad_convs) {
                for (d, v) in dst.weight.iter_mut().zip(&src.weight) {
                    *d += w * v;
                }
                for (d, v) in dst.bias.iter_mut().zip(&src.bias) {
                    *d += w * v;
                }
            }
        }
        Ok(total)
    }

    /// One optimization step; the record is returned, not logged.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let cfg = self.cfg.clone();
        let corpus = self.corpus;
        let labeled = if cfg.mode.uses_labels() {
            sample(&mut self.batch_rng, &corpus.labeled, cfg.batch_size)
        } else {
            Vec::new()
        };
        let unlabeled = sample(&mut self.batch_rng, &corpus.unlabeled, cfg.unlabeled_batch);

        let mut sup_slots = Vec::with_capacity(labeled.len());
        for &i in &labeled {
            let im = &corpus.images[i];
            let fwd = forward(&self.student.detector, &im.input, &im.proposals)?;
            let targets = fwd.kept.iter().map(|&p| im.targets[p]).collect();
            sup_slots.push(Slot::new(i, im.input.clone(), fwd, targets));
        }

        let mut unsup_slots = Vec::with_capacity(unlabeled.len());
        let mut pseudo = PseudoLabelStats::default();
        let mut counts = crate::mining::MatchCounts::default();
        let mut scores = Vec::new();
        for &i in &unlabeled {
            let (mined, targets, s) = self.pseudo_labels(i)?;
            let im = &corpus.images[i];
            pseudo.predictions += s.len();
            pseudo.accepted += mined.accepted.len();
            pseudo.direct += mined.num_direct();
            pseudo.mined += mined.num_mined();
            counts.add(&match_counts(&mined.accepted_detections(), &im.gt, 0.5));
            scores.extend(s);
            let view = strong_augment(&im.input, &cfg.augment, &mut self.augment_rng);
            let fwd = forward(&self.student.detector, &view, &im.proposals)?;
            if fwd.kept.len() != targets.len() {
                return Err(Error::Domain(
                    "teacher and student kept different proposals".into(),
                ));
            }
            unsup_slots.push(Slot::new(i, view, fwd, targets));
        }
        pseudo.precision = counts.precision();
        pseudo.recall = counts.recall();
        pseudo.f1 = counts.f1();
        let tau_used = self.threshold.tau_high;
        self.threshold = update_dynamic_threshold(&self.threshold, &scores, &self.mining);

        let (lambda_con, lambda_sim) = cfg.lambdas();
        let mut grad = self.student.zeros_like();
        let mut loss = LossBreakdown {
            unsup_weight: cfg.unsup_weight,
            lambda_con,
            lambda_sim,
            ..LossBreakdown::default()
        };
        if !sup_slots.is_empty() {
            loss.sup = add_detection_loss(&mut sup_slots, 1.0)?;
        }
        if !unsup_slots.is_empty() {
            loss.unsup = add_detection_loss(&mut unsup_slots, cfg.unsup_weight)?;
        }
        let mut slots = sup_slots;
        slots.append(&mut unsup_slots);
        if lambda_sim > 0.0 && !slots.is_empty() {
            loss.sim = self.alignment_term(&mut slots, &mut grad, lambda_sim)?;
        }
        if lambda_con > 0.0 && !slots.is_empty() {
            loss.con = self.contrastive_term(&mut slots, &mut grad, lambda_con)?;
        }
        loss.total = loss.weighted_sum();
        if !loss.total.is_finite() {
            return Err(self.non_finite(&slots, &loss));
        }

        for slot in &slots {
            backward(
                &self.student.detector,
                &slot.view,
                &slot.fwd,
                &slot.grads,
                &mut grad.detector,
            );
        }
        self.student.sgd_step(&grad, cfg.lr);
        if !self.student.is_finite() {
            return Err(self.non_finite(&slots, &loss));
        }
        ema_update(&mut self.teacher, &self.student, cfg.alpha)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            tau_high: tau_used,
            pseudo,
            eval: None,
            checkpoint_hash: None,
        })
    }

    fn non_finite(&self, slots: &[Slot], loss: &LossBreakdown) -> Error {
        let dump = serde_json::json!({
            "step": self.step + 1,
            "mode": self.cfg.mode,
            "images": slots.iter().map(|s| &self.corpus.images[s.image].id).collect::<Vec<_>>(),
            "targets": slots.iter().map(|s| &s.targets).collect::<Vec<_>>(),
            "logits": slots.iter().map(|s| &s.fwd.logits).collect::<Vec<_>>(),
            "loss": loss,
            "tau_high": self.threshold.tau_high,
        });
        Error::NonFinite(format!("training diverged; batch dump: {dump}"))
    }
}

/// Source world: same structure seed, fresh images, no domain shift.
pub fn source_world_config(target: &WorldConfig) -> WorldConfig {
    WorldConfig {
        domain_shift: DomainShift::NONE,
        image_seed: Some(target.image_seed() ^ 0x5eed_5eed),
        ..target.clone()
    }
}

/// Initial model fitted on every image of the source world.
pub fn pretrain_source(
    world_cfg: &WorldConfig,
    cfg: &TrainerConfig,
    workers: usize,
) -> Result<Model> {
    let source = World::generate_with_workers(&source_world_config(world_cfg), workers)?;
    let corpus = Corpus::from_world(&source)?.all_labeled();
    let mut model = Model::init(&cfg.dims(&corpus), cfg.seed);
    fit_supervised(
        &mut model,
        &corpus,
        cfg.pretrain_steps,
        cfg.batch_size.max(1),
        cfg.lr,
        cfg.seed,
    )?;
    Ok(model)
}

/// Reference prototypes from the VFM maps of the labeled split.
pub fn corpus_prototypes(
    corpus: &Corpus,
    cfg: &PrototypeConfig,
    seed: u64,
) -> Result<PrototypeSet> {
    let images: Vec<LabeledImage<'_>> = corpus
        .labeled
        .iter()
        .map(|&i| {
            let im = &corpus.images[i];
            LabeledImage {
                map: &im.vfm,
                annotations: &im.gt,
                width: im.width,
                height: im.height,
            }
        })
        .collect();
    extract_prototypes_from(&images, corpus.num_classes, cfg, seed, "labeled split")
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub log: RunLog,
    pub checkpoint: Checkpoint,
    pub prototypes: Option<PrototypeSet>,
}

/// Generates the target world, pretrains on the source world and adapts.
pub fn simulate(
    world_cfg: &WorldConfig,
    cfg: &TrainerConfig,
    workers: usize,
) -> Result<Simulation> {
    world_cfg.validate()?;
    cfg.validate()?;
    let world = World::generate_with_workers(world_cfg, workers)?;
    let corpus = Corpus::from_world(&world)?;
    let init = pretrain_source(world_cfg, cfg, workers)?;
    simulate_from(&corpus, cfg, init)
}

/// Adaptation only, from an already pretrained model.
pub fn simulate_from(corpus: &Corpus, cfg: &TrainerConfig, init: Model) -> Result<Simulation> {
    let protos = if cfg.mode.uses_mining() || cfg.mode.uses_alignment() {
        Some(corpus_prototypes(
            corpus,
            &PrototypeConfig {
                bins: cfg.bins,
                ..cfg.prototypes
            },
            cfg.seed,
        )?)
    } else {
        None
    };
    let mut trainer = Trainer::new(cfg.clone(), corpus, protos.clone(), init)?;
    trainer.run()?;
    Ok(Simulation {
        checkpoint: trainer.checkpoint(),
        log: trainer.log,
        prototypes: protos,
    })
}

/// Benchmark world with a strong rotation and heavy noise between source and target.
pub fn high_shift_world(seed: u64) -> WorldConfig {
    WorldConfig {
        domain_shift: DomainShift {
            rotation: 0.9,
            noise_sigma: 0.8,
        },
        seed,
        ..WorldConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignMetrics {
    pub images: usize,
    /// Mean image-level loss over the images.
    pub image_alignment: f64,
    /// Instance-level loss of all foreground queries pooled into one batch.
    pub contrastive: f64,
    pub queries: usize,
}

/// Both alignment losses of `model` on unaugmented views, without any update.
/// Sinkhorn logits are drawn from the seeded stream.
pub fn alignment_metrics(
    model: &Model,
    corpus: &Corpus,
    images: &[usize],
    protos: &PrototypeSet,
    cfg: &TrainerConfig,
) -> Result<AlignMetrics> {
    if images.is_empty() {
        return Err(Error::Validation("no images to evaluate".into()));
    }
    if protos.num_classes != corpus.num_classes || protos.channels != corpus.vfm_channels() {
        return Err(Error::Validation(
            "prototypes do not match the dataset".into(),
        ));
    }
    let c = corpus.num_classes;
    let mut image_alignment = 0.0;
    let mut features = Vec::new();
    let mut logits = Vec::new();
    for &i in images {
        let im = &corpus.images[i];
        let fwd = forward(&model.detector, &im.input, &im.proposals)?;
        image_alignment +=
            image_alignment_loss(&fwd.levels, &im.vfm, &model.convs)?.loss / images.len() as f64;
        for (r, l) in fwd.logits.iter().enumerate() {
            if argmax(l) != Some(c) {
                features.push(fwd.features[r].clone());
                logits.push(l[..c].to_vec());
            }
        }
    }
    let queries = features.len();
    let batch = crate::align::QueryBatch::new(features, logits)?;
    let mut rng = Rng::new(cfg.seed, streams::SINKHORN);
    let k = protos.components;
    let mut batch_protos: BatchPrototypes = vec![vec![None; k]; c];
    for (class, slot) in batch_protos.iter_mut().enumerate() {
        let (_, q) = collect_class_queries(&batch, class);
        if q.is_empty() {
            continue;
        }
        let init: Vec<f64> = (0..q.len() * k).map(|_| rng.normal()).collect();
        let a = sinkhorn_assign(&init, q.len(), k, &cfg.sinkhorn)?;
        *slot = aggregate_prototypes(&q, &a)?;
    }
    let out = contrastive_loss(&batch_protos, protos, &model.head, &cfg.contrastive)?;
    Ok(AlignMetrics {
        images: images.len(),
        image_alignment,
        contrastive: out.loss,
        queries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningComparison {
    pub tau_low: f64,
    pub fixed: MiningReport,
    pub mined: MiningReport,
}

/// Pseudo-label quality of the source-trained teacher on the unlabeled split:
/// a single threshold at `tau_low` against dual-threshold mining with the same
/// lower bound.
pub fn mining_benchmark(
    corpus: &Corpus,
    teacher: &Model,
    protos: &PrototypeSet,
    base: &MiningConfig,
    taus: &[f64],
) -> Result<Vec<MiningComparison>> {
    let c = corpus.num_classes;
    let mut preds = Vec::with_capacity(corpus.unlabeled.len());
    for &i in &corpus.unlabeled {
        preds.push(Predictions::teacher(
            proposal_predictions(&teacher.detector, &corpus.images[i], c)?.0,
        ));
    }
    let run = |m: &MiningConfig| -> Result<MiningReport> {
        m.validate()?;
        let state = DynamicThresholdState::new(m);
        let sets = corpus
            .unlabeled
            .iter()
            .zip(&preds)
            .map(|(&i, p)| mine(p, &corpus.images[i].vfm, Some(protos), m, &state))
            .collect::<Result<Vec<_>>>()?;
        Ok(mining_report(
            sets.iter()
                .zip(&corpus.unlabeled)
                .map(|(s, &i)| (s, corpus.images[i].gt.as_slice())),
            0.5,
        ))
    };
    taus.iter()
        .map(|&tau| {
            Ok(MiningComparison {
                tau_low: tau,
                fixed: run(&MiningConfig {
                    bins: base.bins,
                    ..MiningConfig::fixed(tau)
                })?,
                mined: run(&MiningConfig {
                    tau_low: tau,
                    ..*base
                })?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            num_images: 24,
            labeled_fraction: 0.25,
            eval_fraction: 0.25,
            ..WorldConfig::default()
        }
    }

    fn quick(mode: Mode) -> TrainerConfig {
        TrainerConfig {
            mode,
            steps: 6,
            eval_every: 3,
            pretrain_steps: 5,
            prototypes: PrototypeConfig {
                kmeans: crate::prototypes::KMeansConfig {
                    n_init: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("mt".parse::<Mode>().is_err());
    }

    #[test]
    fn every_mode_runs_and_logs_consistently() {
        let world = World::generate(&tiny_world()).unwrap();
        let corpus = Corpus::from_world(&world).unwrap();
        for mode in Mode::ALL {
            let cfg = quick(mode);
            let init = Model::init(&cfg.dims(&corpus), 3);
            let sim = simulate_from(&corpus, &cfg, init).unwrap();
            let recs = &sim.log.records;
            assert_eq!(recs.len(), 7);
            assert_eq!(
                sim.log
                    .eval_points()
                    .iter()
                    .map(|p| p.0)
                    .collect::<Vec<_>>(),
                vec![0, 3, 6]
            );
            for r in &recs[1..] {
                assert!((r.loss.total - r.loss.weighted_sum()).abs() < 1e-9);
                if !mode.uses_alignment() {
                    assert_eq!((r.loss.con, r.loss.sim), (0.0, 0.0));
                }
                if !mode.uses_labels() {
                    assert_eq!(r.loss.sup, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_weights_match_supervised_trainer() {
        let world = World::generate(&tiny_world()).unwrap();
        let corpus = Corpus::from_world(&world).unwrap();
        let cfg = TrainerConfig {
            unlabeled_batch: 0,
            lambda_con: 0.0,
            lambda_sim: 0.0,
            ..quick(Mode::FullVg)
        };
        let init = Model::init(&cfg.dims(&corpus), 9);
        let sim = simulate_from(&corpus, &cfg, init.clone()).unwrap();
        let mut plain = init;
        let trace = fit_supervised(
            &mut plain,
            &corpus,
            cfg.steps,
            cfg.batch_size,
            cfg.lr,
            cfg.seed,
        )
        .unwrap();
        let logged: Vec<f64> = sim.log.records[1..].iter().map(|r| r.loss.total).collect();
        assert_eq!(logged, trace);
        assert_eq!(sim.checkpoint.student, plain);
    }

    #[test]
    fn zero_learning_rate_freezes_student() {
        let world = World::generate(&tiny_world()).unwrap();
        let corpus = Corpus::from_world(&world).unwrap();
        let cfg = TrainerConfig {
            lr: 0.0,
            alpha: 0.5,
            ..quick(Mode::Vpm)
        };
        let init = Model::init(&cfg.dims(&corpus), 4);
        let protos = corpus_prototypes(&corpus, &cfg.prototypes, 1).unwrap();
        let mut t = Trainer::new(cfg, &corpus, Some(protos), init.clone()).unwrap();
        t.train_step().unwrap();
        t.train_step().unwrap();
        assert_eq!(t.student, init);
        assert_eq!(t.teacher, init);
    }

    #[test]
    fn mining_modes_need_prototypes() {
        let world = World::generate(&tiny_world()).unwrap();
        let corpus = Corpus::from_world(&world).unwrap();
        let cfg = quick(Mode::Vpm);
        let init = Model::init(&cfg.dims(&corpus), 4);
        assert!(Trainer::new(cfg, &corpus, None, init).is_err());
    }

    #[test]
    fn checkpoint_hash_is_stable() {
        let world = World::generate(&tiny_world()).unwrap();
        let corpus = Corpus::from_world(&world).unwrap();
        let cfg = quick(Mode::MtSemi);
        let a = simulate_from(&corpus, &cfg, Model::init(&cfg.dims(&corpus), 2)).unwrap();
        let b = simulate_from(&corpus, &cfg, Model::init(&cfg.dims(&corpus), 2)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.hash().len(), 64);
    }
}
