//! Command-line front end. Settings resolve as flag > `--config` file > default;
//! the config file is a JSON object with optional `seed`, `workers`, `world`,
//! `trainer`, `prototypes` and `mining` sections, each a partial override.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mining::{
    mine, mining_report, update_dynamic_threshold, DynamicThresholdState, MinedLabelSet,
    MiningConfig, MiningReport, Predictions, UpperThreshold,
};
use crate::prototypes::{extract_prototypes, PrototypeConfig};
use crate::store::{
    load_dataset, read_prototypes, read_runlog, write_prototypes, write_runlog, Detection, Split,
};
use crate::synth::{World, WorldConfig};
use crate::teacher::{
    alignment_metrics, high_shift_world, pretrain_source, proposal_predictions, simulate_from,
    stability_report, Checkpoint, Corpus, Mode, StabilityMetric, TrainerConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "vfm-guide",
    version,
    about = "Prototype-guided pseudo-label mining and mean-teacher simulation"
)]
pub struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for world generation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and write it as a dataset.
    Generate(GenerateArgs),
    /// Cluster reference prototypes from the labeled split of a dataset.
    ExtractPrototypes(ExtractArgs),
    /// Fit the initial model on the unshifted source world.
    Pretrain(PretrainArgs),
    /// Filter teacher predictions with dual thresholds and prototype similarity.
    Mine(MineArgs),
    /// Report both alignment losses of a checkpoint on a dataset.
    AlignEval(AlignEvalArgs),
    /// Run mean-teacher adaptation on a synthetic world.
    Simulate(SimulateArgs),
    /// Convert a run log to CSV and summarize its stability.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Standard,
    HighShift,
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    /// World config JSON (partial; missing fields keep their defaults).
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    /// Fraction of images in the labeled split.
    #[arg(long, value_parser = unit_interval)]
    pub labeled: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub images: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Components per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: Option<u64>,
    /// Maximum IoU of a background box with any object.
    #[arg(long, value_parser = unit_interval)]
    pub bg_iou: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Labeled,
    Unlabeled,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Labeled => Split::Labeled,
            SplitArg::Unlabeled => Split::Unlabeled,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub protos: PathBuf,
    /// Teacher checkpoint; predictions come from its detector.
    #[arg(
        long,
        conflicts_with = "predictions",
        required_unless_present = "predictions"
    )]
    pub checkpoint: Option<PathBuf>,
    /// JSON object mapping image ids to scored detections.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Unlabeled)]
    pub split: SplitArg,
    #[arg(long, value_parser = unit_interval)]
    pub tau_low: Option<f64>,
    /// Fixed upper threshold.
    #[arg(long, value_parser = unit_interval, conflicts_with = "dynamic")]
    pub tau_high: Option<f64>,
    /// Dynamic upper threshold.
    #[arg(long)]
    pub dynamic: bool,
    #[arg(long)]
    pub sim: Option<f64>,
    /// Mined label sets per image.
    #[arg(long)]
    pub out: PathBuf,
    /// Precision/recall against the annotations.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Student,
    Teacher,
}

#[derive(Debug, Args)]
pub struct AlignEvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub protos: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Which::Student)]
    pub model: Which,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start from this checkpoint's teacher instead of pretraining.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run log (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Final checkpoint JSON.
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    MeanAp,
    Accuracy,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// CSV output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stability summary JSON.
    #[arg(long)]
    pub stability: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::MeanAp)]
    pub metric: MetricArg,
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    world: Option<Value>,
    trainer: Option<Value>,
    prototypes: Option<Value>,
    mining: Option<Value>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with every override applied in order, validated by deserialization.
fn layered<T: Serialize + DeserializeOwned>(
    base: T,
    overrides: impl IntoIterator<Item = Value>,
    what: &str,
) -> Result<T> {
    let mut v =
        serde_json::to_value(base).map_err(|e| Error::Validation(format!("{what}: {e}")))?;
    for o in overrides {
        merge(&mut v, o);
    }
    serde_json::from_value(v).map_err(|e| Error::Validation(format!("{what}: {e}")))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Context {
    seed: Option<u64>,
    workers: usize,
    file: FileConfig,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self> {
        let file: FileConfig = match &cli.config {
            Some(p) => read_json(p)?,
            None => FileConfig::default(),
        };
        Ok(Self {
            seed: cli.seed.or(file.seed),
            workers: cli
                .workers
                .map(|w| w as usize)
                .or(file.workers)
                .unwrap_or(1)
                .max(1),
            file,
        })
    }

    fn world(&self, args: &WorldArgs) -> Result<WorldConfig> {
        let base = match args.preset {
            Preset::Standard => WorldConfig::default(),
            Preset::HighShift => high_shift_world(1),
        };
        let mut layers: Vec<Value> = self.file.world.iter().cloned().collect();
        if let Some(p) = &args.world {
            layers.push(read_json(p)?);
        }
        let mut cfg = layered(base, layers, "world config")?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = args.labeled {
            cfg.labeled_fraction = l;
        }
        if let Some(n) = args.images {
            cfg.num_images = n as usize;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn trainer(&self) -> Result<TrainerConfig> {
        let mut cfg = layered(
            TrainerConfig::default(),
            self.file.trainer.clone(),
            "trainer config",
        )?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn prototypes(&self) -> Result<PrototypeConfig> {
        layered(
            PrototypeConfig::default(),
            self.file.prototypes.clone(),
            "prototype config",
        )
    }

    fn mining(&self) -> Result<MiningConfig> {
        layered(
            MiningConfig::default(),
            self.file.mining.clone(),
            "mining config",
        )
    }

    fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

/// Parses `argv` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::ExtractPrototypes(a) => extract(&ctx, a),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Mine(a) => mine_cmd(&ctx, a),
        Command::AlignEval(a) => align_eval(&ctx, a),
        Command::Simulate(a) => simulate_cmd(&ctx, a),
        Command::Report(a) => report(a),
    }
}

fn generate(ctx: &Context, a: &GenerateArgs) -> Result<()> {
    let cfg = ctx.world(&a.world)?;
    log::info!(
        "generating {} images into {}",
        cfg.num_images,
        a.out.display()
    );
    World::generate_with_workers(&cfg, ctx.workers)?.write(&a.out)?;
    Ok(())
}

fn extract(ctx: &Context, a: &ExtractArgs) -> Result<()> {
    let mut cfg = ctx.prototypes()?;
    if let Some(k) = a.k {
        cfg.components = k as usize;
    }
    if let Some(b) = a.bins {
        cfg.bins = b as usize;
    }
    if let Some(v) = a.bg_iou {
        cfg.bg_iou = v;
    }
    let index = load_dataset(&a.index)?;
    let set = extract_prototypes(&index, &cfg, ctx.seed_or_default())?;
    log::info!(
        "{} classes x {} components",
        set.num_classes,
        set.components
    );
    write_prototypes(&a.out, &set)
}

fn pretrain(ctx: &Context, a: &PretrainArgs) -> Result<()> {
    let world = ctx.world(&a.world)?;
    let mut cfg = ctx.trainer()?;
    if let Some(s) = a.steps {
        cfg.pretrain_steps = s;
    }
    cfg.validate()?;
    let model = pretrain_source(&world, &cfg, ctx.workers)?;
    let ckpt = Checkpoint {
        step: 0,
        student: model.clone(),
        teacher: model,
    };
    fs::write(&a.out, ckpt.to_json() + "\n").map_err(|e| Error::io(&a.out, e))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

#[derive(Serialize)]
struct MinedOutput<'a> {
    config: &'a MiningConfig,
    final_tau_high: f64,
    images: BTreeMap<&'a str, MinedLabelSet>,
}

fn mine_cmd(ctx: &Context, a: &MineArgs) -> Result<()> {
    let mut cfg = ctx.mining()?;
    if let Some(t) = a.tau_low {
        cfg.tau_low = t;
    }
    if let Some(t) = a.tau_high {
        cfg.tau_high = UpperThreshold::Fixed { value: t };
    }
    if a.dynamic {
        cfg.tau_high = UpperThreshold::Dynamic;
    }
    if let Some(s) = a.sim {
        cfg.sim_threshold = s;
    }
    cfg.validate()?;
    let index = load_dataset(&a.index)?;
    let protos = read_prototypes(&a.protos)?;
    let ids = index.splits.ids(a.split.into()).to_vec();
    if ids.is_empty() {
        return Err(Error::Validation(format!("split {:?} is empty", a.split)));
    }
    let predictions: BTreeMap<String, Vec<Detection>> = match (&a.checkpoint, &a.predictions) {
        (Some(p), _) => {
            let ckpt = read_checkpoint(p)?;
            let corpus = Corpus::from_index(&index)?;
            ids.iter()
                .map(|id| {
                    let im = corpus
                        .images
                        .iter()
                        .find(|im| &im.id == id)
                        .expect("split ids resolved by from_index");
                    Ok((
                        id.clone(),
                        proposal_predictions(&ckpt.teacher.detector, im, corpus.num_classes)?.0,
                    ))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(p)) => read_json(p)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut state = DynamicThresholdState::new(&cfg);
    let mut images = BTreeMap::new();
    for id in &ids {
        let entry = index
            .image(id)
            .ok_or_else(|| Error::Validation(format!("split references unknown image {id}")))?;
        let preds = predictions
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no predictions for image {id}")))?;
        let map = crate::store::read_feature_map(index.feature_path(entry))?;
        let set = mine(
            &Predictions::teacher(preds.clone()),
            &map,
            Some(&protos),
            &cfg,
            &state,
        )?;
        let scores: Vec<f64> = preds.iter().filter_map(|d| d.score).collect();
        state = update_dynamic_threshold(&state, &scores, &cfg);
        images.insert(entry.image_id.as_str(), set);
    }
    if let Some(p) = &a.report {
        let rep: MiningReport = mining_report(
            ids.iter()
                .map(|id| (&images[id.as_str()], index.annotations_of(id))),
            0.5,
        );
        write_json(p, &rep)?;
    }
    write_json(
        &a.out,
        &MinedOutput {
            config: &cfg,
            final_tau_high: state.tau_high,
            images,
        },
    )
}

fn align_eval(ctx: &Context, a: &AlignEvalArgs) -> Result<()> {
    let cfg = ctx.trainer()?;
    cfg.validate()?;
    let index = load_dataset(&a.index)?;
    let protos = read_prototypes(&a.protos)?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let corpus = Corpus::from_index(&index)?;
    let images = match a.split {
        SplitArg::Labeled => &corpus.labeled,
        SplitArg::Unlabeled => &corpus.unlabeled,
        SplitArg::Eval => &corpus.eval,
    };
    let model = match a.model {
        Which::Student => &ckpt.student,
        Which::Teacher => &ckpt.teacher,
    };
    write_json(
        &a.out,
        &alignment_metrics(model, &corpus, images, &protos, &cfg)?,
    )
}

fn simulate_cmd(ctx: &Context, a: &SimulateArgs) -> Result<()> {
    let world_cfg = ctx.world(&a.world)?;
    let mut cfg = ctx.trainer()?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let world = World::generate_with_workers(&world_cfg, ctx.workers)?;
    let corpus = Corpus::from_world(&world)?;
    let init = match &a.init {
        Some(p) => read_checkpoint(p)?.teacher,
        None => pretrain_source(&world_cfg, &cfg, ctx.workers)?,
    };
    if init.dims() != cfg.dims(&corpus) {
        return Err(Error::Validation(
            "initial model does not match the world and trainer dimensions".into(),
        ));
    }
    log::info!("simulating {} for {} steps", cfg.mode, cfg.steps);
    let sim = simulate_from(&corpus, &cfg, init)?;
    write_runlog(&a.out, &sim.log)?;
    if let Some(p) = &a.checkpoint_out {
        fs::write(p, sim.checkpoint.to_json() + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report(a: &ReportArgs) -> Result<()> {
    let log = read_runlog(&a.log)?;
    let mut csv = String::from(
        "step,total,sup,unsup,con,sim,tau_high,predictions,accepted,direct,mined,pseudo_precision,pseudo_recall,pseudo_f1,mean_ap,accuracy\n",
    );
    for r in &log.records {
        let l = &r.loss;
        let p = &r.pseudo;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            l.total,
            l.sup,
            l.unsup,
            l.con,
            l.sim,
            r.tau_high,
            p.predictions,
            p.accepted,
            p.direct,
            p.mined,
            p.precision,
            p.recall,
            p.f1,
            csv_opt(r.eval.as_ref().map(|e| e.mean_ap)),
            csv_opt(r.eval.as_ref().map(|e| e.accuracy)),
        )
        .expect("writing to a string");
    }
    if let Some(p) = &a.stability {
        let metric = match a.metric {
            MetricArg::MeanAp => StabilityMetric::MeanAp,
            MetricArg::Accuracy => StabilityMetric::Accuracy,
        };
        write_json(p, &stability_report(&log, metric)?)?;
    }
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_unknown_commands() {
        assert_eq!(run(["vfm-guide", "--help"]), 0);
        assert_eq!(run(["vfm-guide", "frobnicate"]), 1);
        assert_eq!(run(["vfm-guide", "generate", "--out", "x", "--bogus"]), 1);
        assert_eq!(
            run(["vfm-guide", "simulate", "--out", "x", "--mode", "nope"]),
            1
        );
    }

    #[test]
    fn merge_is_deep() {
        let mut a = serde_json::json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut a, serde_json::json!({"a": {"c": 5}}));
        assert_eq!(a, serde_json::json!({"a": {"b": 1, "c": 5}, "d": 3}));
    }

    #[test]
    fn partial_world_layers_and_rejects_unknown_fields() {
        let cfg = layered(
            WorldConfig::default(),
            [serde_json::json!({"domain_shift": {"rotation": 0.1}})],
            "w",
        )
        .unwrap();
        assert_eq!(cfg.domain_shift.rotation, 0.1);
        assert_eq!(
            cfg.domain_shift.noise_sigma,
            WorldConfig::default().domain_shift.noise_sigma
        );
        assert!(layered(
            WorldConfig::default(),
            [serde_json::json!({"nope": 1})],
            "w"
        )
        .is_err());
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let code = run(["vfm-guide", "report", "--log", "/nonexistent/run.jsonl"]);
        assert_eq!(code, 2);
    }
}
