//! Training loop: configuration, batch samplers, the summed-loss SGD step,
//! epoch orchestration with logging and checkpoints, and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, Matrix, ParamSet, Sgd, SgdConfig, TensorRecord};
use crate::error::{Error, Result};
use crate::evalmetrics::{iou_grid, max_matching, Detection, MetricReport, RecallMetrics, Split, RECALL_POINTS};
use crate::geometry::BBox;
use crate::milheads::build_embeddings;
use crate::model::{oracle_scene, LossParts, Model, ModelConfig, PlanInputs, Supervision};
use crate::proposals::{merge_proposals, oracle_grid_proposals, Proposal, ProposalSource};
use crate::seed;
use crate::synthdata::{read_dataset, ImageRecord, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Random,
    Bcas,
}

impl Sampler {
    pub fn parse(s: &str) -> Option<Sampler> {
        match s {
            "random" => Some(Sampler::Random),
            "bcas" => Some(Sampler::Bcas),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Random => "random",
            Sampler::Bcas => "bcas",
        }
    }
}

/// Every field is addressable as `key=value` in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Global gradient-norm ceiling applied before each update; 0 disables.
    pub clip_norm: f64,
    /// Fraction of total steps after which the decay applies.
    pub decay_at: f64,
    pub warmup_epochs: usize,
    pub sampler: Sampler,
    pub data: Vec<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dafe: bool,
    pub proposal_source: ProposalSource,
    /// Also feed segmenter proposals to the detector at evaluation time.
    pub infer_segmenter: bool,
    pub branches: usize,
    pub proposals: usize,
    pub tau: f64,
    pub seed: u64,
    pub dropout: f64,
    pub feat_dim: usize,
    pub context: bool,
    pub embed_dim: usize,
    pub rpn_width: usize,
    pub dafe_hidden: usize,
    pub prototypes: usize,
    pub pooled_bins: usize,
    pub segmenter_grid: usize,
    pub segmenter_jitter: f64,
    pub pg_gate: f64,
    pub pg_score: f64,
    pub iou_fg: f64,
    pub embed_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            clip_norm: 2.0,
            decay_at: 0.75,
            warmup_epochs: 1,
            sampler: Sampler::Random,
            data: Vec::new(),
            vocab: None,
            dafe: true,
            proposal_source: ProposalSource::Merged,
            infer_segmenter: false,
            branches: m.branches,
            proposals: 64,
            tau: m.tau,
            seed: 42,
            dropout: 0.0,
            feat_dim: m.feat_dim,
            context: m.context,
            embed_dim: m.embed_dim,
            rpn_width: m.rpn_width,
            dafe_hidden: m.dafe_hidden,
            prototypes: m.prototypes,
            pooled_bins: m.bins,
            segmenter_grid: 8,
            segmenter_jitter: 0.1,
            pg_gate: 0.1,
            pg_score: 0.5,
            iou_fg: 0.5,
            embed_seed: m.embed_seed,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "epochs" => num!(self.epochs),
            "batch_size" => num!(self.batch_size),
            "lr" => num!(self.lr),
            "momentum" => num!(self.momentum),
            "weight_decay" => num!(self.weight_decay),
            "lr_decay" => num!(self.lr_decay),
            "clip_norm" => num!(self.clip_norm),
            "decay_at" => num!(self.decay_at),
            "warmup_epochs" => num!(self.warmup_epochs),
            "sampler" => self.sampler = Sampler::parse(value).ok_or_else(bad)?,
            "data" => self.data = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "dafe" => self.dafe = parse_bool(value).ok_or_else(bad)?,
            "proposal_source" => self.proposal_source = ProposalSource::parse(value).ok_or_else(bad)?,
            "infer_segmenter" => self.infer_segmenter = parse_bool(value).ok_or_else(bad)?,
            "branches" => num!(self.branches),
            "proposals" => num!(self.proposals),
            "tau" => num!(self.tau),
            "seed" => num!(self.seed),
            "dropout" => num!(self.dropout),
            "feat_dim" => num!(self.feat_dim),
            "context" => self.context = parse_bool(value).ok_or_else(bad)?,
            "embed_dim" => num!(self.embed_dim),
            "rpn_width" => num!(self.rpn_width),
            "dafe_hidden" => num!(self.dafe_hidden),
            "prototypes" => num!(self.prototypes),
            "pooled_bins" => num!(self.pooled_bins),
            "segmenter_grid" => num!(self.segmenter_grid),
            "segmenter_jitter" => num!(self.segmenter_jitter),
            "pg_gate" => num!(self.pg_gate),
            "pg_score" => num!(self.pg_score),
            "iou_fg" => num!(self.iou_fg),
            "embed_seed" => num!(self.embed_seed),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Flat `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let data: Vec<String> = self.data.iter().map(|p| p.display().to_string()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("decay_at", self.decay_at.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("sampler", self.sampler.as_str().into());
        kv("data", data.join(","));
        if let Some(v) = &self.vocab {
            kv("vocab", v.display().to_string());
        }
        kv("dafe", self.dafe.to_string());
        kv("proposal_source", self.proposal_source.as_str().into());
        kv("infer_segmenter", self.infer_segmenter.to_string());
        kv("branches", self.branches.to_string());
        kv("proposals", self.proposals.to_string());
        kv("tau", self.tau.to_string());
        kv("seed", self.seed.to_string());
        kv("dropout", self.dropout.to_string());
        kv("feat_dim", self.feat_dim.to_string());
        kv("context", self.context.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("rpn_width", self.rpn_width.to_string());
        kv("dafe_hidden", self.dafe_hidden.to_string());
        kv("prototypes", self.prototypes.to_string());
        kv("pooled_bins", self.pooled_bins.to_string());
        kv("segmenter_grid", self.segmenter_grid.to_string());
        kv("segmenter_jitter", self.segmenter_jitter.to_string());
        kv("pg_gate", self.pg_gate.to_string());
        kv("pg_score", self.pg_score.to_string());
        kv("iou_fg", self.iou_fg.to_string());
        kv("embed_seed", self.embed_seed.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.branches == 0 {
            return fail("branches must be >= 1");
        }
        if self.proposals == 0 {
            return fail("proposals must be >= 1");
        }
        if !(self.tau > 0.0) {
            return fail("tau must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !(self.clip_norm >= 0.0) {
            return fail("clip_norm must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return fail("decay_at must be in [0, 1]");
        }
        if self.pooled_bins == 0 || self.feat_dim == 0 || self.embed_dim == 0 {
            return fail("layer sizes must be >= 1");
        }
        self.sgd(0).validate()
    }

    pub fn sgd(&self, total_steps: u64) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            decay_step: (self.decay_at * total_steps as f64).floor() as u64,
        }
    }

    pub fn model_config(&self, categories: Vec<String>) -> ModelConfig {
        ModelConfig {
            stride: 4,
            feat_dim: self.feat_dim,
            context: self.context,
            bins: self.pooled_bins,
            embed_dim: self.embed_dim,
            rpn_width: self.rpn_width,
            dafe_hidden: self.dafe_hidden,
            prototypes: self.prototypes,
            branches: self.branches,
            tau: self.tau,
            dafe: self.dafe,
            dropout: self.dropout,
            categories,
            embed_seed: self.embed_seed,
            init_seed: seed::derive_str(self.seed, "init"),
        }
    }
}

/// Datasets held in memory together with the label mapping onto the
/// model's training categories.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub datasets: Vec<Vec<ImageRecord>>,
    pub vocab: Vocabulary,
    /// Vocabulary index of each training category (base categories only).
    pub train_categories: Vec<usize>,
}

impl TrainData {
    pub fn new(datasets: Vec<Vec<ImageRecord>>, vocab: Vocabulary) -> Result<TrainData> {
        vocab.validate()?;
        if datasets.iter().all(Vec::is_empty) {
            return Err(Error::Config("no training images".into()));
        }
        let train_categories = vocab.base_indices();
        if train_categories.is_empty() {
            return Err(Error::NoLabels);
        }
        Ok(TrainData {
            datasets,
            vocab,
            train_categories,
        })
    }

    /// Reads every dataset; the vocabulary comes from `vocab`, else from the
    /// first dataset's sibling `.vocab` file, else the built-in palette sized
    /// to the label vectors.
    pub fn load(paths: &[PathBuf], vocab: Option<&Path>) -> Result<TrainData> {
        let datasets = paths.iter().map(|p| read_dataset(p)).collect::<Result<Vec<_>>>()?;
        let vocab = resolve_vocab(vocab, paths.first().map(PathBuf::as_path), &datasets)?;
        TrainData::new(datasets, vocab)
    }

    pub fn category_names(&self) -> Vec<String> {
        self.train_categories.iter().map(|&c| self.vocab.categories[c].name.clone()).collect()
    }

    /// Labels restricted to the training categories.
    pub fn labels(&self, rec: &ImageRecord) -> Vec<u8> {
        self.train_categories.iter().map(|&c| rec.labels.get(c).copied().unwrap_or(0)).collect()
    }
}

/// Sidecar vocabulary path written next to a dataset file.
pub fn vocab_sidecar(dataset: &Path) -> PathBuf {
    dataset.with_extension("vocab")
}

pub fn resolve_vocab(explicit: Option<&Path>, dataset: Option<&Path>, datasets: &[Vec<ImageRecord>]) -> Result<Vocabulary> {
    if let Some(p) = explicit {
        return Vocabulary::load(p);
    }
    if let Some(d) = dataset {
        let side = vocab_sidecar(d);
        if side.exists() {
            return Vocabulary::load(&side);
        }
    }
    let n = datasets.iter().flatten().map(|r| r.labels.len()).max().unwrap_or(0);
    Vocabulary::builtin(n.min(8), 0)
}

/// One epoch of uniformly shuffled batches over `n` images.
pub fn random_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Batch-class-aware draw: a category uniformly among those with labeled
/// images, then `batch` images labeled with it (without replacement when
/// enough exist).
pub fn bcas_batch(labels: &[Vec<u8>], batch: usize, rng: &mut impl Rng) -> Result<(usize, Vec<usize>)> {
    let categories = labels.iter().map(Vec::len).max().unwrap_or(0);
    let pools: Vec<Vec<usize>> = (0..categories).map(|c| (0..labels.len()).filter(|&i| labels[i].get(c) == Some(&1)).collect()).collect();
    let usable: Vec<usize> = (0..categories).filter(|&c| !pools[c].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::NoLabels);
    }
    let c = usable[rng.gen_range(0..usable.len())];
    let pool = &pools[c];
    let picked = if pool.len() >= batch {
        pool.choose_multiple(rng, batch).copied().collect()
    } else {
        (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    Ok((c, picked))
}

/// `(dataset, image indices)` for one epoch, interleaving datasets
/// round-robin.
pub fn epoch_schedule(data: &TrainData, cfg: &TrainConfig, epoch: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut rng = seed::rng(seed::derive(seed::derive_str(cfg.seed, "sampler"), epoch as u64));
    let mut per_dataset: Vec<Vec<Vec<usize>>> = Vec::new();
    for ds in &data.datasets {
        let batches = match cfg.sampler {
            Sampler::Random => random_batches(ds.len(), cfg.batch_size, &mut rng),
            Sampler::Bcas => {
                let labels: Vec<Vec<u8>> = ds.iter().map(|r| data.labels(r)).collect();
                (0..ds.len().div_ceil(cfg.batch_size))
                    .map(|_| bcas_batch(&labels, cfg.batch_size, &mut rng).map(|(_, b)| b))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        per_dataset.push(batches);
    }
    let rounds = per_dataset.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for k in 0..rounds {
        for (d, batches) in per_dataset.iter().enumerate() {
            if let Some(b) = batches.get(k) {
                out.push((d, b.clone()));
            }
        }
    }
    Ok(out)
}

pub fn steps_per_epoch(data: &TrainData, batch: usize) -> usize {
    data.datasets.iter().map(|d| d.len().div_ceil(batch)).sum()
}

fn image_key(dataset: usize, index: usize) -> u64 {
    ((dataset as u64) << 32) | index as u64
}

pub fn segmenter_proposals(rec: &ImageRecord, cfg: &TrainConfig, key: u64) -> Vec<Proposal> {
    oracle_grid_proposals(&oracle_scene(rec), cfg.segmenter_grid, cfg.segmenter_jitter, seed::derive(seed::derive_str(cfg.seed, "segmenter"), key))
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossParts,
    pub lr: f64,
    pub grad_norms: Vec<(&'static str, f64)>,
}

/// Forward/backward over the batch with summed losses, then one SGD step.
pub fn train_step(model: &mut Model, sgd: &mut Sgd, data: &TrainData, batch: (usize, &[usize]), cfg: &TrainConfig, sgd_cfg: &SgdConfig, epoch: usize, step: u64) -> Result<StepLog> {
    let (d, indices) = batch;
    let mut total = LossParts::default();
    let warmup = epoch < cfg.warmup_epochs;
    model.zero_grad();
    for &i in indices {
        let rec = &data.datasets[d][i];
        let key = image_key(d, i);
        let y = data.labels(rec);
        let segmenter = if cfg.proposal_source.uses_segmenter() { segmenter_proposals(rec, cfg, key) } else { Vec::new() };
        let scene = oracle_scene(rec);
        let inputs = PlanInputs {
            source: cfg.proposal_source,
            max_proposals: cfg.proposals,
            segmenter: &segmenter,
            scene: &scene,
            warmup,
            refine_seed: seed::derive(seed::derive(seed::derive_str(cfg.seed, "refine"), step), key),
            pg_gate: cfg.pg_gate,
            pg_score: cfg.pg_score,
            iou_fg: cfg.iou_fg,
        };
        let mut drop_rng: Option<ChaCha8Rng> = (cfg.dropout > 0.0).then(|| seed::rng(seed::derive(seed::derive(seed::derive_str(cfg.seed, "dropout"), step), key)));
        let (parts, _) = model.objective(&rec.image, &y, Supervision::Derive(inputs), drop_rng.as_mut().map(|r| r as &mut dyn rand::RngCore), true)?;
        if !parts.total().is_finite() {
            return Err(Error::NonFinite {
                image_id: i,
                value: parts.total(),
                detail: format!("dataset {d}, step {step}, L_PG={} L_OM={} L_IR={}", parts.pg, parts.om, parts.ir),
            });
        }
        total.add(&parts);
    }
    let grad_norms = model.grad_norms();
    if cfg.clip_norm > 0.0 {
        let total = grad_norms.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        if total > cfg.clip_norm {
            let scale = cfg.clip_norm / total;
            for p in model.params_mut() {
                p.grad.mapv_inplace(|g| g * scale);
            }
        }
    }
    let lr = sgd_cfg.lr_at(step);
    sgd.step(model.params_mut(), sgd_cfg, lr);
    Ok(StepLog {
        epoch,
        step,
        losses: total,
        lr,
        grad_norms,
    })
}

pub const LOG_MODULES: [&str; 6] = ["extractor", "rpn", "mlp", "dafe", "mining", "refine"];

pub fn log_header() -> String {
    let mut h = String::from("epoch,step,L_PG,L_OM,L_IR,lr");
    for m in LOG_MODULES {
        let _ = write!(h, ",grad_{m}");
    }
    h
}

pub fn log_row(row: &StepLog) -> String {
    let mut s = format!("{},{},{},{},{},{}", row.epoch, row.step, row.losses.pg, row.losses.om, row.losses.ir, row.lr);
    for m in LOG_MODULES {
        let v = row.grad_norms.iter().find(|(n, _)| *n == m).map_or(0.0, |(_, v)| *v);
        let _ = write!(s, ",{v}");
    }
    s
}

const VELOCITY_PREFIX: &str = "sgd.velocity/";

/// Model tensors plus optimizer velocity.
pub fn training_checkpoint(model: &Model, sgd: &Sgd, step: u64) -> Checkpoint {
    let mut ckpt = model.to_checkpoint(step);
    for (name, v) in sgd.velocity() {
        ckpt.tensors.insert(
            format!("{VELOCITY_PREFIX}{name}"),
            TensorRecord {
                shape: v.shape().to_vec(),
                values: v.iter().copied().collect(),
            },
        );
    }
    ckpt
}

fn restore_velocity(ckpt: &Checkpoint) -> Result<Sgd> {
    let mut sgd = Sgd::new();
    for (name, rec) in &ckpt.tensors {
        if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
            let m = Matrix::from_shape_vec((rec.shape[0], rec.shape[1]), rec.values.clone()).map_err(|_| Error::TensorShape {
                name: name.clone(),
                expected: vec![rec.shape[0], rec.shape[1]],
                found: vec![rec.values.len()],
            })?;
            sgd.set_velocity(param, m);
        }
    }
    Ok(sgd)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub step: u64,
    pub log: Vec<StepLog>,
    pub checkpoint: Checkpoint,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory for per-epoch checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
}

/// Runs `cfg.epochs` epochs (or the remainder when resuming from an epoch
/// boundary checkpoint). Epoch 0's initial state is always checkpointed.
pub fn run_training(cfg: &TrainConfig, data: &TrainData, outputs: &TrainOutputs, resume: Option<&Checkpoint>, mut progress: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spe = steps_per_epoch(data, cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let sgd_cfg = cfg.sgd(total);
    let (mut model, mut sgd, mut step) = match resume {
        Some(ckpt) => {
            let model = Model::from_checkpoint(ckpt)?;
            if model.config.categories != data.category_names() {
                return Err(Error::Config(format!("checkpoint categories {:?} differ from data {:?}", model.config.categories, data.category_names())));
            }
            (model, restore_velocity(ckpt)?, ckpt.step)
        }
        None => (Model::new(cfg.model_config(data.category_names()))?, Sgd::new(), 0),
    };
    if spe > 0 && step % spe != 0 {
        return Err(Error::Config(format!("resume step {step} is not an epoch boundary ({spe} steps per epoch)")));
    }
    let start_epoch = if spe == 0 { 0 } else { (step / spe) as usize };
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if resume.is_none() {
            let path = dir.join("epoch_000.json");
            training_checkpoint(&model, &sgd, step).save(&path)?;
        }
    }
    let mut log_text = String::new();
    if outputs.log_csv.is_some() {
        log_text.push_str(&log_header());
        log_text.push('\n');
    }
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        for (d, batch) in epoch_schedule(data, cfg, epoch)? {
            let row = train_step(&mut model, &mut sgd, data, (d, &batch), cfg, &sgd_cfg, epoch, step)?;
            step += 1;
            progress(&row);
            if outputs.log_csv.is_some() {
                log_text.push_str(&log_row(&row));
                log_text.push('\n');
            }
            log.push(row);
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            let path = dir.join(format!("epoch_{:03}.json", epoch + 1));
            training_checkpoint(&model, &sgd, step).save(&path)?;
        }
    }
    if let Some(p) = &outputs.log_csv {
        fs::write(p, log_text).map_err(|e| Error::io(p, e))?;
    }
    let checkpoint = training_checkpoint(&model, &sgd, step);
    Ok(TrainOutcome {
        model,
        step,
        log,
        checkpoint,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Proposal set the detector scores.
    pub source: ProposalSource,
    pub max_proposals: usize,
    pub split: Split,
    pub segmenter_grid: usize,
    pub segmenter_jitter: f64,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_train(cfg: &TrainConfig, split: Split) -> EvalOptions {
        let source = match (cfg.proposal_source, cfg.infer_segmenter) {
            (ProposalSource::SegmenterOnly, _) => ProposalSource::SegmenterOnly,
            (ProposalSource::Merged, true) => ProposalSource::Merged,
            _ => ProposalSource::LearnedOnly,
        };
        EvalOptions {
            source,
            max_proposals: cfg.proposals,
            split,
            segmenter_grid: cfg.segmenter_grid,
            segmenter_jitter: cfg.segmenter_jitter,
            seed: seed::derive_str(cfg.seed, "eval"),
        }
    }
}

/// Per-image proposal sets used for recall evaluation.
#[derive(Debug, Clone, Default)]
pub struct ProposalSets {
    /// Learned proposals, best first, all grid cells.
    pub learned: Vec<Vec<BBox>>,
    pub segmenter: Vec<Vec<BBox>>,
}

impl ProposalSets {
    /// Boxes of one image under `source` at budget `n`: learned top-n,
    /// segmenter first-n, or the segmenter set plus learned top-n.
    pub fn candidates(&self, source: ProposalSource, image: usize, n: usize) -> Vec<BBox> {
        let learned = self.learned.get(image).map_or(&[][..], |v| &v[..n.min(v.len())]);
        let seg = self.segmenter.get(image).map_or(&[][..], Vec::as_slice);
        match source {
            ProposalSource::LearnedOnly => learned.to_vec(),
            ProposalSource::SegmenterOnly => seg[..n.min(seg.len())].to_vec(),
            ProposalSource::Merged => seg.iter().chain(learned).copied().collect(),
        }
    }

    pub fn recall(&self, source: ProposalSource, gts: &[Vec<BBox>], n: usize, thrs: &[f64]) -> f64 {
        let total: usize = gts.iter().map(Vec::len).sum();
        if total == 0 || thrs.is_empty() {
            return 0.0;
        }
        let per_thr: Vec<f64> = thrs
            .iter()
            .map(|&t| {
                let hit: usize = gts.iter().enumerate().map(|(i, g)| max_matching(g, &self.candidates(source, i, n), t)).sum();
                hit as f64 / total as f64
            })
            .collect();
        per_thr.iter().sum::<f64>() / per_thr.len() as f64
    }

    pub fn recall_table(&self, source: ProposalSource, gts: &[Vec<BBox>]) -> Vec<RecallMetrics> {
        RECALL_POINTS
            .iter()
            .map(|&n| RecallMetrics {
                n,
                at50: self.recall(source, gts, n, &[0.5]),
                averaged: self.recall(source, gts, n, &iou_grid()),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub detections: Vec<Detection>,
    pub proposals: ProposalSets,
}

/// Detect on every record and score against its ground truth. Category
/// indices of `records` refer to `vocab`.
pub fn evaluate(model: &Model, records: &[ImageRecord], vocab: &Vocabulary, opts: &EvalOptions) -> Result<Evaluation> {
    let table = build_embeddings(vocab, model.config.embed_dim, model.config.embed_seed)?;
    let wr = table.with_background();
    let mut detections = Vec::new();
    let mut sets = ProposalSets::default();
    for (i, rec) in records.iter().enumerate() {
        let fmap = model.features(&rec.image)?;
        let learned = model.propose(&fmap, fmap.cells())?;
        let seg = oracle_grid_proposals(&oracle_scene(rec), opts.segmenter_grid, opts.segmenter_jitter, seed::derive(opts.seed, i as u64));
        let used_learned: &[Proposal] = if opts.source.uses_learned() { &learned } else { &[] };
        let used_seg: &[Proposal] = if opts.source.uses_segmenter() { &seg } else { &[] };
        let boxes: Vec<BBox> = merge_proposals(used_learned, used_seg, opts.max_proposals).iter().map(|p| p.bbox).collect();
        for d in model.detect(&fmap, &wr, &boxes)? {
            detections.push(Detection {
                image: i,
                bbox: d.bbox,
                category: d.category,
                score: d.score,
            });
        }
        sets.learned.push(learned.iter().map(|p| p.bbox).collect());
        sets.segmenter.push(seg.iter().map(|p| p.bbox).collect());
    }
    let gts: Vec<Vec<crate::synthdata::GtObject>> = records.iter().map(|r| r.gt.clone()).collect();
    let mut report = MetricReport::compute(&detections, &gts, &table.names, &table.novel, opts.split, None);
    let gt_boxes: Vec<Vec<BBox>> = records.iter().map(|r| r.gt_boxes()).collect();
    report.recall = sets.recall_table(opts.source, &gt_boxes);
    Ok(Evaluation {
        report,
        detections,
        proposals: sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, BiasProfile, GenSpec, LabelPolicy};

    fn small_data(images: usize, policy: LabelPolicy) -> TrainData {
        let vocab = Vocabulary::builtin(4, 0).unwrap();
        let spec = GenSpec {
            profile: BiasProfile::scene_centric(),
            vocab: vocab.clone(),
            images,
            policy,
            seed: 5,
            dataset_id: 0,
        };
        TrainData::new(vec![generate(&spec)], vocab).unwrap()
    }

    #[test]
    fn config_round_trip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.set("sampler", "bcas").unwrap();
        cfg.set("data", "a.jsonl, b.jsonl").unwrap();
        cfg.set("proposal_source", "segmenter-only").unwrap();
        cfg.set("dafe", "off").unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("cfg")).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("epochs", "-1").is_err());
        let err = back.apply_text("epochs=2\nbatch_size\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_epoch_touches_every_image_once() {
        let mut rng = seed::rng(1);
        let batches = random_batches(23, 4, &mut rng);
        assert_eq!(batches.len(), 6);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn bcas_batches_share_the_drawn_category() {
        let data = small_data(40, LabelPolicy::Federated(0.5));
        let labels: Vec<Vec<u8>> = data.datasets[0].iter().map(|r| data.labels(r)).collect();
        let mut rng = seed::rng(2);
        for _ in 0..200 {
            let (c, batch) = bcas_batch(&labels, 4, &mut rng).unwrap();
            assert_eq!(batch.len(), 4);
            assert!(batch.iter().all(|&i| labels[i][c] == 1));
        }
        assert!(matches!(bcas_batch(&[vec![0, 0], vec![0, 0]], 4, &mut rng), Err(Error::NoLabels)));
        // one labeled image: drawn with replacement
        let (_, b) = bcas_batch(&[vec![0, 1], vec![0, 0]], 3, &mut rng).unwrap();
        assert_eq!(b, vec![0, 0, 0]);
    }

    #[test]
    fn bcas_category_draw_is_uniform() {
        let labels = vec![vec![1, 0, 0, 0], vec![1, 1, 0, 0], vec![1, 1, 1, 0], vec![1, 0, 0, 0], vec![0, 0, 0, 1]];
        let mut rng = seed::rng(3);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[bcas_batch(&labels, 2, &mut rng).unwrap().0] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn round_robin_interleaves_datasets() {
        let mut data = small_data(10, LabelPolicy::Full);
        let second = data.datasets[0][..6].to_vec();
        data.datasets.push(second);
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let sched = epoch_schedule(&data, &cfg, 0).unwrap();
        let order: Vec<usize> = sched.iter().map(|(d, _)| *d).collect();
        assert_eq!(order, vec![0, 1, 0, 1, 0]);
        assert_eq!(sched.len(), steps_per_epoch(&data, 4));
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            feat_dim: 8,
            embed_dim: 16,
            rpn_width: 8,
            dafe_hidden: 8,
            prototypes: 4,
            proposals: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_checkpoint_only() {
        let data = small_data(4, LabelPolicy::Full);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let outputs = TrainOutputs {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            log_csv: Some(dir.path().join("log.csv")),
        };
        let out = run_training(&cfg, &data, &outputs, None, |_| {}).unwrap();
        assert_eq!(out.step, 0);
        let files: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        assert!(files.contains(&"epoch_000.json".to_string()));
        assert!(!files.iter().any(|f| f == "epoch_001.json"));
        assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap(), log_header() + "\n");
    }

    #[test]
    fn resume_continues_exactly() {
        let data = small_data(6, LabelPolicy::Full);
        // lr decay depends on the total step count, so keep it out of the way
        let cfg = TrainConfig { epochs: 2, decay_at: 1.0, ..tiny_cfg() };
        let full = run_training(&cfg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        let first = run_training(&TrainConfig { epochs: 1, ..cfg.clone() }, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        assert_eq!(first.step, 3);
        let resumed = run_training(&cfg, &data, &TrainOutputs::default(), Some(&first.checkpoint), |_| {}).unwrap();
        assert_eq!(resumed.step, 6);
        assert_eq!(resumed.log.first().unwrap().step, 3);
        assert_eq!(resumed.checkpoint.to_json(), full.checkpoint.to_json());
    }

    #[test]
    fn gradient_reaches_every_enabled_module() {
        let data = small_data(4, LabelPolicy::Full);
        let cfg = tiny_cfg();
        let out = run_training(&cfg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        for row in &out.log {
            for (name, norm) in &row.grad_norms {
                assert!(*norm > 0.0, "{name} at step {}", row.step);
            }
        }
        let seg = TrainConfig {
            proposal_source: ProposalSource::SegmenterOnly,
            ..tiny_cfg()
        };
        let out = run_training(&seg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        for row in &out.log {
            let rpn = row.grad_norms.iter().find(|(n, _)| *n == "rpn").unwrap().1;
            assert_eq!(rpn, 0.0);
        }
    }

    #[test]
    fn dafe_off_checkpoint_has_no_dafe_tensors() {
        let data = small_data(2, LabelPolicy::Full);
        let cfg = TrainConfig { dafe: false, ..tiny_cfg() };
        let out = run_training(&cfg, &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        assert!(out.checkpoint.tensors.keys().all(|k| !k.contains("dafe")));
        let on = run_training(&tiny_cfg(), &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        assert!(on.checkpoint.tensors.keys().any(|k| k.starts_with("dafe.")));
    }

    #[test]
    fn evaluation_metrics_are_bounded() {
        let data = small_data(6, LabelPolicy::Full);
        let out = run_training(&tiny_cfg(), &data, &TrainOutputs::default(), None, |_| {}).unwrap();
        let opts = EvalOptions::from_train(&tiny_cfg(), Split::All);
        let ev = evaluate(&out.model, &data.datasets[0], &data.vocab, &opts).unwrap();
        let r = &ev.report;
        for v in [r.all.map50, r.all.corloc, r.all.ap_range].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        let mut last = 0.0;
        for m in &r.recall {
            assert!((0.0..=1.0).contains(&m.averaged));
            assert!(m.averaged >= last);
            last = m.averaged;
        }
        let gts: Vec<Vec<BBox>> = data.datasets[0].iter().map(|r| r.gt_boxes()).collect();
        for n in RECALL_POINTS {
            let l = ev.proposals.recall(ProposalSource::LearnedOnly, &gts, n, &iou_grid());
            let m = ev.proposals.recall(ProposalSource::Merged, &gts, n, &iou_grid());
            assert!(m >= l);
        }
    }
}
