//! Command implementations behind the `wsovod` binary.
//!
//! Each command is a plain function returning structured results so the
//! binary, the integration tests and scripts share one code path. Exit codes:
//! 2 bad flags or configuration, 3 I/O or malformed files, 4 non-finite loss,
//! 5 checkpoint/model shape mismatch, 6 gradient check failure, 1 anything
//! else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use wsovod::diffcore::{grad_check, Checkpoint, ParamSet, GradCheckOptions, GradCheckReport};
use wsovod::evalmetrics::{MetricReport, RecallMetrics, Split};
use wsovod::geometry::BBox;
use wsovod::model::{oracle_scene, Model, ModelConfig, Plan, PlanInputs, Supervision, Terms};
use wsovod::proposals::{oracle_grid_proposals, ProposalSource};
use wsovod::seed;
use wsovod::synthdata::{generate, read_dataset, write_dataset, BiasProfile, GenSpec, GtObject, Image, ImageRecord, ImageStorage, LabelPolicy, Vocabulary};
use wsovod::train::{evaluate, resolve_vocab, run_training, vocab_sidecar, EvalOptions, Sampler, TrainConfig, TrainData, TrainOutputs};
use wsovod::Error;

pub const EXIT_FLAGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => EXIT_IO,
            Error::NonFinite { .. } => EXIT_NON_FINITE,
            Error::TensorShape { .. } | Error::MissingTensor(_) | Error::Shape { .. } => EXIT_SHAPE,
            Error::Config(_) | Error::DuplicateName(_) | Error::UnknownCategory(_) => EXIT_FLAGS,
            Error::NoLabels => 1,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::from(Error::io(path, e)))
}

#[derive(Debug, Parser)]
#[command(name = "wsovod", version, about = "Weakly supervised open-vocabulary detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its vocabulary file.
    Gen(GenArgs),
    /// Train a detector from image-level labels.
    Train(TrainArgs),
    /// Evaluate a checkpoint (mAP, AP@[.5:.95], CorLoc, per split).
    Eval(EvalArgs),
    /// Run a paired ablation on self-generated data.
    Ablate(AblateArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Proposal recall per proposal source.
    Recall(RecallArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// object-centric | scene-centric
    #[arg(long, default_value = "scene-centric")]
    pub profile: String,
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    /// Number of base categories (1..=8).
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    /// Number of mixture-defined novel categories placed in the scenes.
    #[arg(long, default_value_t = 0)]
    pub novel: usize,
    /// Keep each present category's label with this probability.
    #[arg(long)]
    pub federated: Option<f64>,
    /// Zipf exponent of the category frequency.
    #[arg(long, default_value_t = 0.0)]
    pub skew: f64,
    #[arg(long, default_value_t = 0)]
    pub dataset_id: u32,
    /// Store pixels in sibling binary files instead of inline JSON.
    #[arg(long)]
    pub binary: bool,
    #[arg(long, env = "WSOVOD_SEED", default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub images: usize,
    pub objects: usize,
    /// Mean fraction of categories labeled positive per image.
    pub label_density: f64,
    pub vocab_path: PathBuf,
}

pub fn gen_spec(args: &GenArgs) -> CliResult<GenSpec> {
    let mut profile = BiasProfile::by_name(&args.profile).ok_or_else(|| CliError::new(EXIT_FLAGS, format!("unknown profile `{}`", args.profile)))?;
    profile = profile.with_skew(args.skew);
    let vocab = Vocabulary::builtin(args.categories, args.novel)?;
    let policy = match args.federated {
        None => LabelPolicy::Full,
        Some(p) if (0.0..=1.0).contains(&p) => LabelPolicy::Federated(p),
        Some(p) => return Err(CliError::new(EXIT_FLAGS, format!("--federated must be in [0, 1], got {p}"))),
    };
    Ok(GenSpec {
        profile,
        vocab,
        images: args.images,
        policy,
        seed: args.seed,
        dataset_id: args.dataset_id,
    })
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<GenSummary> {
    let spec = gen_spec(args)?;
    let records = generate(&spec);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let storage = if args.binary { ImageStorage::Binary } else { ImageStorage::Inline };
    write_dataset(&args.out, &records, storage)?;
    let vocab_path = vocab_sidecar(&args.out);
    write_file(&vocab_path, &spec.vocab.to_file_text())?;
    let objects = records.iter().map(|r| r.gt.len()).sum();
    let positives: usize = records.iter().map(|r| r.labels.iter().filter(|&&l| l == 1).count()).sum();
    let label_density = if records.is_empty() { 0.0 } else { positives as f64 / (records.len() * spec.vocab.len()) as f64 };
    Ok(GenSummary {
        images: records.len(),
        objects,
        label_density,
        vocab_path,
    })
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Dataset file; repeat for joint training.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Directory for per-epoch checkpoints (default: `<out-ckpt>.epochs`).
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// Loss log CSV (default: `<out-ckpt>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// random | bcas
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub dafe_off: bool,
    /// learned-only | segmenter-only | merged
    #[arg(long)]
    pub proposal_source: Option<String>,
    /// Refinement branches K.
    #[arg(long)]
    pub branches: Option<usize>,
    /// Proposals per image R.
    #[arg(long)]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, env = "WSOVOD_SEED")]
    pub seed: Option<u64>,
    /// Any config key, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub quiet: bool,
}

/// Defaults, then the config file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let flag = |e: Error| CliError::new(EXIT_FLAGS, e.to_string());
    if !args.data.is_empty() {
        cfg.data = args.data.clone();
    }
    if let Some(v) = &args.vocab {
        cfg.vocab = Some(v.clone());
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = &args.sampler {
        cfg.set("sampler", v).map_err(flag)?;
    }
    if args.dafe_off {
        cfg.dafe = false;
    }
    if let Some(v) = &args.proposal_source {
        cfg.set("proposal_source", v).map_err(flag)?;
    }
    if let Some(v) = args.branches {
        cfg.branches = v;
    }
    if let Some(v) = args.proposals {
        cfg.proposals = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::new(EXIT_FLAGS, format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(flag)?;
    }
    if cfg.data.is_empty() {
        return Err(CliError::new(EXIT_FLAGS, "no training data: pass --data or set data= in the config"));
    }
    cfg.validate().map_err(flag)?;
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub steps: u64,
    pub final_losses: Option<(f64, f64, f64)>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let cfg = resolve_train_config(args)?;
    if !args.quiet {
        println!("# resolved config\n{}", cfg.to_text());
    }
    let data = TrainData::load(&cfg.data, cfg.vocab.as_deref())?;
    let ckpt_dir = args.ckpt_dir.clone().unwrap_or_else(|| with_suffix(&args.out_ckpt, ".epochs"));
    let log = args.log.clone().unwrap_or_else(|| with_suffix(&args.out_ckpt, ".log.csv"));
    let outputs = TrainOutputs {
        checkpoint_dir: Some(ckpt_dir),
        log_csv: Some(log.clone()),
    };
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let quiet = args.quiet;
    let mut epoch_sum = (0usize, 0.0, 0.0, 0.0, 0usize);
    let outcome = run_training(&cfg, &data, &outputs, resume.as_ref(), |row| {
        if row.epoch != epoch_sum.0 {
            epoch_sum = (row.epoch, 0.0, 0.0, 0.0, 0);
        }
        epoch_sum.1 += row.losses.pg;
        epoch_sum.2 += row.losses.om;
        epoch_sum.3 += row.losses.ir;
        epoch_sum.4 += 1;
        if !quiet && (row.step + 1) % 50 == 0 {
            let n = epoch_sum.4 as f64;
            println!("epoch {} step {} L_PG {:.4} L_OM {:.4} L_IR {:.4} lr {}", row.epoch, row.step + 1, epoch_sum.1 / n, epoch_sum.2 / n, epoch_sum.3 / n, row.lr);
        }
    })?;
    if let Some(dir) = args.out_ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    outcome.checkpoint.save(&args.out_ckpt)?;
    let final_losses = outcome.log.last().map(|r| (r.losses.pg, r.losses.om, r.losses.ir));
    if !quiet {
        println!("trained {} steps; checkpoint {}", outcome.step, args.out_ckpt.display());
    }
    Ok(TrainSummary {
        config: cfg,
        steps: outcome.step,
        final_losses,
        checkpoint: args.out_ckpt.clone(),
        log,
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary the data's category indices refer to (default: the
    /// data file's `.vocab` sidecar).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// base | novel | all
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Report prefix; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Proposals scored by the detector.
    #[arg(long, default_value = "learned-only")]
    pub proposal_source: String,
    #[arg(long, default_value_t = 64)]
    pub proposals: usize,
    #[arg(long, env = "WSOVOD_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub quiet: bool,
}

fn parse_source(s: &str) -> CliResult<ProposalSource> {
    ProposalSource::parse(s).ok_or_else(|| CliError::new(EXIT_FLAGS, format!("unknown proposal source `{s}`")))
}

fn load_eval_inputs(ckpt: &Path, data: &Path, vocab: Option<&Path>) -> CliResult<(Model, Vec<ImageRecord>, Vocabulary)> {
    let model = Model::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let records = read_dataset(data)?;
    let vocab = resolve_vocab(vocab, Some(data), std::slice::from_ref(&records))?;
    Ok((model, records, vocab))
}

fn eval_options(source: ProposalSource, proposals: usize, split: Split, seed: u64) -> EvalOptions {
    let defaults = TrainConfig::default();
    EvalOptions {
        source,
        max_proposals: proposals,
        split,
        segmenter_grid: defaults.segmenter_grid,
        segmenter_jitter: defaults.segmenter_jitter,
        seed: seed::derive_str(seed, "eval"),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<MetricReport> {
    let split = Split::parse(&args.split).ok_or_else(|| CliError::new(EXIT_FLAGS, format!("unknown split `{}`", args.split)))?;
    let source = parse_source(&args.proposal_source)?;
    if !args.quiet {
        println!("# eval ckpt={} data={} split={} proposal_source={} proposals={} seed={}", args.ckpt.display(), args.data.display(), args.split, source.as_str(), args.proposals, args.seed);
    }
    let (model, records, vocab) = load_eval_inputs(&args.ckpt, &args.data, args.vocab.as_deref())?;
    let ev = evaluate(&model, &records, &vocab, &eval_options(source, args.proposals, split, args.seed))?;
    let report = ev.report;
    if let Some(out) = &args.out {
        write_file(&with_suffix(out, ".json"), &report.to_json())?;
        write_file(&with_suffix(out, ".csv"), &report.to_csv())?;
    }
    if !args.quiet {
        println!("{}", report.table());
        let s = match split {
            Split::Base => &report.base,
            Split::Novel => &report.novel,
            Split::All => &report.all,
        };
        println!(
            "mAP {}  CorLoc {}  AP@[.5:.95] {}  AP_base {}  AP_novel {}",
            fmt_opt(s.map50),
            fmt_opt(s.corloc),
            fmt_opt(s.ap_range),
            fmt_opt(report.base.map50),
            fmt_opt(report.novel.map50)
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct RecallArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// AR table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "WSOVOD_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub source: ProposalSource,
    pub metrics: RecallMetrics,
}

pub const RECALL_SOURCES: [ProposalSource; 3] = [ProposalSource::LearnedOnly, ProposalSource::SegmenterOnly, ProposalSource::Merged];

pub fn recall_csv(rows: &[RecallRow]) -> String {
    let mut out = String::from("source,n,ar_50,ar_50_95\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.source.as_str(), r.metrics.n, r.metrics.at50, r.metrics.averaged);
    }
    out
}

pub fn cmd_recall(args: &RecallArgs) -> CliResult<Vec<RecallRow>> {
    if !args.quiet {
        println!("# recall ckpt={} data={} seed={}", args.ckpt.display(), args.data.display(), args.seed);
    }
    let (model, records, vocab) = load_eval_inputs(&args.ckpt, &args.data, args.vocab.as_deref())?;
    let ev = evaluate(&model, &records, &vocab, &eval_options(ProposalSource::LearnedOnly, 64, Split::All, args.seed))?;
    let gts: Vec<Vec<BBox>> = records.iter().map(ImageRecord::gt_boxes).collect();
    let rows: Vec<RecallRow> = RECALL_SOURCES
        .iter()
        .flat_map(|&source| ev.proposals.recall_table(source, &gts).into_iter().map(move |metrics| RecallRow { source, metrics }))
        .collect();
    let csv = recall_csv(&rows);
    if let Some(out) = &args.out {
        write_file(out, &csv)?;
    }
    if !args.quiet {
        print!("{csv}");
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Dafe,
    Proposals,
    Bcas,
}

impl Study {
    pub fn parse(s: &str) -> Option<Study> {
        match s {
            "dafe" => Some(Study::Dafe),
            "proposals" => Some(Study::Proposals),
            "bcas" => Some(Study::Bcas),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// dafe | proposals | bcas
    #[arg(long)]
    pub study: String,
    /// Comparison CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Training images per generated dataset.
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    /// Test images per generated dataset.
    #[arg(long, default_value_t = 100)]
    pub test_images: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, env = "WSOVOD_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub map50: f64,
    pub corloc: f64,
    pub ar100: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,mAP,CorLoc,AR@100\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.config, r.map50, r.corloc, r.ar100);
    }
    out
}

/// Datasets and paired configurations of one ablation study.
pub struct StudySetup {
    pub train: TrainData,
    pub test: Vec<ImageRecord>,
    pub configs: Vec<(String, TrainConfig)>,
}

pub fn study_setup(study: Study, images: usize, test_images: usize, epochs: usize, run_seed: u64) -> CliResult<StudySetup> {
    let vocab = Vocabulary::builtin(8, 0)?;
    let data_seed = seed::derive_str(run_seed, "ablation-data");
    let make = |profile: BiasProfile, n: usize, policy: LabelPolicy, id: u32, split: &str| {
        generate(&GenSpec {
            profile,
            vocab: vocab.clone(),
            images: n,
            policy,
            seed: seed::derive_str(seed::derive(data_seed, u64::from(id)), split),
            dataset_id: id,
        })
    };
    let base = TrainConfig {
        epochs,
        seed: run_seed,
        ..TrainConfig::default()
    };
    let (datasets, test, configs) = match study {
        Study::Dafe => {
            let profiles = [BiasProfile::object_centric(), BiasProfile::scene_centric()];
            let datasets: Vec<Vec<ImageRecord>> = profiles.iter().enumerate().map(|(i, p)| make(p.clone(), images, LabelPolicy::Full, i as u32, "train")).collect();
            let test: Vec<ImageRecord> = profiles.iter().enumerate().flat_map(|(i, p)| make(p.clone(), test_images, LabelPolicy::Full, i as u32, "test")).collect();
            let configs = vec![("dafe-on".to_string(), base.clone()), ("dafe-off".to_string(), TrainConfig { dafe: false, ..base })];
            (datasets, test, configs)
        }
        Study::Proposals => {
            let scene = BiasProfile::scene_centric();
            let configs = [ProposalSource::LearnedOnly, ProposalSource::SegmenterOnly, ProposalSource::Merged]
                .into_iter()
                .map(|s| {
                    let cfg = TrainConfig {
                        proposal_source: s,
                        infer_segmenter: true,
                        ..base.clone()
                    };
                    (s.as_str().to_string(), cfg)
                })
                .collect();
            (vec![make(scene.clone(), images, LabelPolicy::Full, 0, "train")], make(scene, test_images, LabelPolicy::Full, 0, "test"), configs)
        }
        Study::Bcas => {
            let scene = BiasProfile::scene_centric();
            let configs = vec![
                ("random".to_string(), base.clone()),
                (
                    "bcas".to_string(),
                    TrainConfig {
                        sampler: Sampler::Bcas,
                        ..base
                    },
                ),
            ];
            (vec![make(scene.clone(), images, LabelPolicy::Federated(0.5), 0, "train")], make(scene, test_images, LabelPolicy::Full, 0, "test"), configs)
        }
    };
    Ok(StudySetup {
        train: TrainData::new(datasets, vocab)?,
        test,
        configs,
    })
}

/// Train and evaluate one configuration of a study.
pub fn run_study_config(setup: &StudySetup, cfg: &TrainConfig) -> CliResult<AblationRow> {
    let outcome = run_training(cfg, &setup.train, &TrainOutputs::default(), None, |_| {})?;
    let opts = EvalOptions::from_train(cfg, Split::All);
    let ev = evaluate(&outcome.model, &setup.test, &setup.train.vocab, &opts)?;
    let ar100 = ev.report.recall.iter().find(|r| r.n == 100).map_or(0.0, |r| r.averaged);
    Ok(AblationRow {
        config: String::new(),
        map50: ev.report.all.map50.unwrap_or(0.0),
        corloc: ev.report.all.corloc.unwrap_or(0.0),
        ar100,
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    let study = Study::parse(&args.study).ok_or_else(|| CliError::new(EXIT_FLAGS, format!("unknown study `{}` (dafe | proposals | bcas)", args.study)))?;
    if !args.quiet {
        println!("# ablate study={} images={} test_images={} epochs={} seed={}", args.study, args.images, args.test_images, args.epochs, args.seed);
    }
    let setup = study_setup(study, args.images, args.test_images, args.epochs, args.seed)?;
    let mut rows = Vec::new();
    for (name, cfg) in &setup.configs {
        let mut row = run_study_config(&setup, cfg)?;
        row.config = name.clone();
        if !args.quiet {
            println!("{name}: mAP {:.4} CorLoc {:.4} AR@100 {:.4}", row.map50, row.corloc, row.ar100);
        }
        rows.push(row);
    }
    write_file(&args.out, &ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "WSOVOD_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Test hook: corrupt one analytic gradient coordinate of this tensor.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub quiet: bool,
}

/// A small labeled image with two objects and the matching model.
pub fn micro_instance(run_seed: u64) -> (Model, ImageRecord) {
    let mut rng = seed::rng(seed::derive_str(run_seed, "micro"));
    let size = 24;
    let mut image = Image::filled(size, size, 0.0);
    for v in image.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let gt = vec![
        GtObject {
            bbox: BBox::new(2.0, 3.0, 13.0, 12.0),
            category: 0,
        },
        GtObject {
            bbox: BBox::new(10.0, 11.0, 22.0, 21.0),
            category: 2,
        },
    ];
    for g in &gt {
        let color = [0.9 * (g.category == 0) as u8 as f32, 0.5, 0.9 * (g.category == 2) as u8 as f32];
        for y in g.bbox.y0 as usize..g.bbox.y1 as usize {
            for x in g.bbox.x0 as usize..g.bbox.x1 as usize {
                for (c, v) in color.iter().enumerate() {
                    image.data[(y * size + x) * 3 + c] = *v;
                }
            }
        }
    }
    let record = ImageRecord {
        image,
        labels: vec![1, 0, 1],
        dataset_id: 0,
        gt,
    };
    let config = ModelConfig {
        stride: 4,
        feat_dim: 4,
        context: true,
        bins: 2,
        embed_dim: 8,
        rpn_width: 4,
        dafe_hidden: 4,
        prototypes: 3,
        branches: 3,
        categories: vec!["red".into(), "green".into(), "blue".into()],
        init_seed: run_seed,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config).expect("categories present");
    model.perturb(0.1, &mut rng);
    (model, record)
}

/// Supervision for the micro instance, derived once and then held fixed.
pub fn micro_plan(model: &mut Model, record: &ImageRecord, run_seed: u64) -> wsovod::Result<Plan> {
    let scene = oracle_scene(record);
    let segmenter = oracle_grid_proposals(&scene, 4, 0.1, run_seed);
    let inputs = PlanInputs {
        source: ProposalSource::Merged,
        max_proposals: 12,
        segmenter: &segmenter,
        scene: &scene,
        warmup: false,
        refine_seed: run_seed,
        pg_gate: 0.0,
        pg_score: 0.5,
        iou_fg: 0.5,
    };
    let (_, plan) = model.objective_terms(&record.image, &record.labels, Supervision::Derive(inputs), None, None)?;
    Ok(plan)
}

pub const GRADCHECK_TERMS: [(&str, Terms); 4] = [
    ("L_OM", Terms { pg: false, om: true, ir: false }),
    ("L_IR", Terms { pg: false, om: false, ir: true }),
    ("L_PG", Terms { pg: true, om: false, ir: false }),
    ("L_WSOVOD", Terms::ALL),
];

pub fn gradcheck_reports(run_seed: u64, corrupt: Option<&str>) -> CliResult<Vec<(&'static str, GradCheckReport)>> {
    let (mut model, record) = micro_instance(run_seed);
    if let Some(t) = corrupt {
        if !ParamSet::params(&model).iter().any(|p| p.name == t) {
            return Err(CliError::new(EXIT_FLAGS, format!("--corrupt: no tensor named `{t}`")));
        }
    }
    let plan = micro_plan(&mut model, &record, run_seed)?;
    let mut reports = Vec::new();
    for (name, terms) in GRADCHECK_TERMS {
        let opts = GradCheckOptions {
            seed: run_seed,
            corrupt: corrupt.map(|t| (t.to_string(), 0, 1e-2)),
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &mut model,
            |m: &mut Model, grad: bool| {
                let (parts, _) = m.objective_terms(&record.image, &record.labels, Supervision::Fixed(&plan), None, grad.then_some(terms))?;
                Ok(terms.total(&parts))
            },
            &opts,
        )?;
        reports.push((name, report));
    }
    Ok(reports)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<(&'static str, GradCheckReport)>> {
    let reports = gradcheck_reports(args.seed, args.corrupt.as_deref())?;
    if !args.quiet {
        println!("# gradcheck seed={} eps=1e-5 tolerance=1e-4", args.seed);
        println!("{:<10} {:>6} {:>12}  worst tensor[coord]", "loss", "result", "max rel err");
        for (name, r) in &reports {
            let worst = r.worst().map_or_else(String::new, |w| format!("{}[{}]", w.name, w.worst_coord));
            println!("{:<10} {:>6} {:>12.3e}  {}", name, if r.passed() { "pass" } else { "FAIL" }, r.max_rel_err(), worst);
        }
    }
    if let Some((name, r)) = reports.iter().find(|(_, r)| !r.passed()) {
        let w = r.worst().expect("a failing report has tensors");
        return Err(CliError::new(
            EXIT_GRADCHECK,
            format!("{name}: gradient mismatch in tensor `{}` at coordinate {}: analytic {:e}, numeric {:e}", w.name, w.worst_coord, w.analytic, w.numeric),
        ));
    }
    Ok(reports)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => {
            let s = cmd_gen(a)?;
            println!("# gen out={} profile={} images={} categories={} novel={} federated={:?} skew={} seed={}", a.out.display(), a.profile, a.images, a.categories, a.novel, a.federated, a.skew, a.seed);
            println!("images {} objects {} label density {:.4} (vocabulary {})", s.images, s.objects, s.label_density, s.vocab_path.display());
        }
        Command::Train(a) => {
            cmd_train(a)?;
        }
        Command::Eval(a) => {
            cmd_eval(a)?;
        }
        Command::Ablate(a) => {
            cmd_ablate(a)?;
        }
        Command::Gradcheck(a) => {
            cmd_gradcheck(a)?;
        }
        Command::Recall(a) => {
            cmd_recall(a)?;
        }
    }
    Ok(())
}
