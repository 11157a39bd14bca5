//! Experiment driver behind the `rfvae` binary.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.json         effective config, defaults filled in
//! <out>/metadata.json       wall-clock timestamps (the only nondeterministic file)
//! <out>/checkpoints/        ckpt_<step>.rfvl and last.rfvl
//! <out>/logs/loss.csv       per-step loss breakdown
//! <out>/logs/train.log
//! <out>/eval/metrics.csv    long-format scores, plus report.txt
//! <out>/traversals/         dim_<j>.pgm and manifest.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{make_multishape_sprites, make_oval_sprites, FactorDataset, SpriteGeometry};
use crate::disent::{train_step, DisentConfig, LossBreakdown, ObjectiveKind, TrainState, TrainerConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    expected_prior_kl_report, metric1, metric2, metric3, relevance_report, LatentTable, MetricReport,
    RelevanceSummary, VoteParams, CSV_HEADER,
};
use crate::nn::AdamConfig;
use crate::rng::Rng;
use crate::vae::{latent_traversal, max_pixel_std, traversal_pgm, traversal_values, VaeModel};

/// Extra stream ids on top of [`crate::disent::streams`].
pub const EVAL_STREAM: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    OvalSprites,
    MultishapeSprites,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub resolution: usize,
    /// Scale, rotation, x and y.
    pub cardinalities: [usize; 4],
    pub antialias: bool,
    /// Defaults to `<out>/dataset.rfds`.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::OvalSprites,
            resolution: 16,
            cardinalities: [4, 8, 8, 8],
            antialias: false,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn num_factors(&self) -> usize {
        match self.kind {
            DatasetKind::OvalSprites => 4,
            DatasetKind::MultishapeSprites => 5,
        }
    }

    pub fn build(&self) -> Result<FactorDataset> {
        let geom = SpriteGeometry {
            resolution: self.resolution,
            cardinalities: self.cardinalities,
            antialias: self.antialias,
        };
        match self.kind {
            DatasetKind::OvalSprites => make_oval_sprites(geom),
            DatasetKind::MultishapeSprites => make_multishape_sprites(geom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub vae_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub disc_hidden: Vec<usize>,
    pub disc_slope: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            vae_lr: 1e-3,
            disc_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            disc_hidden: vec![128, 128, 128],
            disc_slope: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: u64,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            iterations: 20_000,
            seed: 1,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vote: VoteParams,
    pub lasso_alpha: f64,
    pub encode_batch: usize,
    pub traversal_span: f64,
    pub traversal_count: usize,
    pub seed_image: usize,
    pub relevance_hi: f64,
    pub relevance_lo: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            vote: VoteParams::default(),
            lasso_alpha: 0.01,
            encode_batch: 256,
            traversal_span: 2.0,
            traversal_count: 10,
            seed_image: 0,
            relevance_hi: 0.9,
            relevance_lo: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub objective: DisentConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    /// Oval sprites (4, 8, 8, 8) at 16×16, d = 8, 2×10⁴ iterations.
    pub fn desk() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            objective: DisentConfig {
                eta_s: 1.0,
                lambda_min: 1.0,
                ..DisentConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale settings: 64×64 ovals, d = 10, 3×10⁵ iterations.
    pub fn paper() -> Self {
        ExperimentConfig {
            name: "paper".into(),
            dataset: DatasetConfig {
                resolution: 64,
                cardinalities: [6, 40, 32, 32],
                ..DatasetConfig::default()
            },
            model: ModelConfig {
                latent_dim: 10,
                encoder_hidden: vec![1200, 1200],
                decoder_hidden: vec![1200, 1200],
            },
            objective: DisentConfig::default(),
            training: TrainingConfig {
                iterations: 300_000,
                checkpoint_every: 25_000,
                log_every: 500,
                ..TrainingConfig::default()
            },
            ..ExperimentConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "paper" => Ok(ExperimentConfig::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk, paper)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_json(&read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains([',', '\n', '\r']) {
            return bad(format!("name {:?} must be non-empty without commas or newlines", self.name));
        }
        let ds = &self.dataset;
        if ds.resolution < 8 {
            return bad(format!("dataset.resolution {} < 8", ds.resolution));
        }
        if let Some(c) = ds.cardinalities.iter().find(|&&c| c < 2) {
            return bad(format!(
                "dataset.cardinalities contains {c}; every factor needs ≥ 2 values to be varied"
            ));
        }
        let m = &self.model;
        if m.latent_dim < ds.num_factors() {
            return bad(format!(
                "model.latent_dim {} is below the {} true factors",
                m.latent_dim,
                ds.num_factors()
            ));
        }
        if m.encoder_hidden.contains(&0) || m.decoder_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        self.objective.validate(m.latent_dim)?;
        self.trainer_config().vae_adam.validate()?;
        self.trainer_config().disc_adam.validate()?;
        let o = &self.optimizer;
        if o.disc_hidden.contains(&0) || !(o.disc_slope >= 0.0) {
            return bad("optimizer.disc_hidden must be positive and disc_slope ≥ 0".into());
        }
        let t = &self.training;
        let min_batch = if self.objective.uses_discriminator() { 4 } else { 1 };
        if t.batch_size < min_batch {
            return bad(format!(
                "training.batch_size {} below {min_batch} for objective {}",
                t.batch_size,
                self.objective.kind.name()
            ));
        }
        if t.checkpoint_every == 0 || t.log_every == 0 {
            return bad("training.checkpoint_every and log_every must be ≥ 1".into());
        }
        let e = &self.eval;
        if e.vote.l < 2 || e.vote.num_pairs == 0 || e.vote.repeats == 0 {
            return bad("eval.vote needs l ≥ 2, num_pairs ≥ 1, repeats ≥ 1".into());
        }
        if !(e.lasso_alpha >= 0.0) || e.encode_batch == 0 {
            return bad("eval.lasso_alpha must be ≥ 0 and encode_batch ≥ 1".into());
        }
        if e.traversal_count < 2 || !(e.traversal_span > 0.0) {
            return bad("eval needs traversal_count ≥ 2 and traversal_span > 0".into());
        }
        if !(0.0..=1.0).contains(&e.relevance_lo) || !(e.relevance_lo < e.relevance_hi) || e.relevance_hi > 1.0 {
            return bad("eval relevance thresholds must satisfy 0 ≤ lo < hi ≤ 1".into());
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let o = &self.optimizer;
        let adam = |lr| AdamConfig {
            lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        };
        TrainerConfig {
            objective: self.objective.clone(),
            vae_adam: adam(o.vae_lr),
            disc_adam: adam(o.disc_lr),
            disc_hidden: o.disc_hidden.clone(),
            disc_slope: o.disc_slope,
        }
    }

    pub fn new_model(&self) -> Result<VaeModel> {
        let mut rng = Rng::with_stream(self.training.seed, crate::disent::streams::MODEL_INIT);
        VaeModel::new(
            self.dataset.resolution,
            self.model.latent_dim,
            &self.model.encoder_hidden,
            &self.model.decoder_hidden,
            &mut rng,
        )
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metadata(&self) -> PathBuf {
        self.root.join("metadata.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.rfvl")
    }

    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("ckpt_{step:08}.rfvl"))
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("logs").join("loss.csv")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("logs").join("train.log")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("eval").join("metrics.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("eval").join("report.txt")
    }

    pub fn traversals(&self) -> PathBuf {
        self.root.join("traversals")
    }

    pub fn dataset(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.dataset.path.clone().unwrap_or_else(|| self.root.join("dataset.rfds"))
    }
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_at(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    Ok(())
}

/// Write through a temporary sibling and rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_at(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_at(path, e))
}

fn stamp(run: &RunDir, command: &str, started: u64) -> Result<()> {
    let now = unix_seconds();
    let path = run.metadata();
    let mut meta: BTreeMap<String, serde_json::Value> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    meta.insert(
        command.to_string(),
        serde_json::json!({ "started_unix": started, "finished_unix": now }),
    );
    write_atomic(&path, serde_json::to_string_pretty(&meta).expect("json").as_bytes())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub images: usize,
    pub bytes: usize,
}

pub fn cmd_generate(cfg: &ExperimentConfig, run: &RunDir) -> Result<GenerateSummary> {
    let started = unix_seconds();
    cfg.validate()?;
    let ds = cfg.dataset.build()?;
    let bytes = ds.to_bytes();
    let path = run.dataset(cfg);
    write_atomic(&path, &bytes)?;
    stamp(run, "generate", started)?;
    Ok(GenerateSummary {
        path,
        images: ds.len(),
        bytes: bytes.len(),
    })
}

fn load_dataset(cfg: &ExperimentConfig, run: &RunDir) -> Result<FactorDataset> {
    let path = run.dataset(cfg);
    let bytes = fs::read(&path).map_err(|e| io_at(&path, e))?;
    let ds = FactorDataset::from_bytes(&bytes)?;
    if ds.resolution != cfg.dataset.resolution || ds.space.cardinalities[ds.space.num_factors() - 4..] != cfg.dataset.cardinalities {
        return Err(Error::Config(format!(
            "{} holds a {}px {:?} dataset, config asks for {}px {:?}",
            path.display(),
            ds.resolution,
            ds.space.cardinalities,
            cfg.dataset.resolution,
            cfg.dataset.cardinalities
        )));
    }
    Ok(ds)
}

/// `step,recon,kl_*,weighted_kl,tc,l1_r,entropy_r,total[,r_*]`.
pub fn loss_csv_header(d: usize, with_r: bool) -> String {
    let mut h = String::from("step,recon");
    for j in 0..d {
        let _ = write!(h, ",kl_{j}");
    }
    h.push_str(",weighted_kl,tc,l1_r,entropy_r,total");
    if with_r {
        for j in 0..d {
            let _ = write!(h, ",r_{j}");
        }
    }
    h
}

pub fn loss_csv_row(step: u64, b: &LossBreakdown) -> String {
    let mut row = format!("{step},{}", b.recon);
    for v in &b.kl_per_dim {
        let _ = write!(row, ",{v}");
    }
    let _ = write!(
        row,
        ",{},{},{},{},{}",
        b.weighted_kl, b.tc_estimate, b.l1_r, b.entropy_r, b.total
    );
    for v in &b.relevance {
        let _ = write!(row, ",{v}");
    }
    row
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub resumed_from: Option<u64>,
    pub final_step: u64,
    pub last: Option<LossBreakdown>,
}

/// Trains to `training.iterations`, resuming from `checkpoints/last.rfvl`
/// when present. A non-finite loss aborts without touching the last saved
/// checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, run: &RunDir) -> Result<TrainSummary> {
    let started = unix_seconds();
    cfg.validate()?;
    let echo = cfg.to_json();
    if let Ok(existing) = fs::read_to_string(run.config()) {
        let mut prev = ExperimentConfig::from_json(&existing)?;
        prev.training.iterations = cfg.training.iterations;
        if prev != *cfg {
            return Err(Error::Config(format!(
                "{} was created with a different config",
                run.root.display()
            )));
        }
    }
    let ds = load_dataset(cfg, run)?;
    write_atomic(&run.config(), echo.as_bytes())?;
    let tc = cfg.trainer_config();

    let last = run.last_checkpoint();
    let (mut state, mut data_rng, resumed_from) = if last.exists() {
        let ck = Checkpoint::load(&last)?;
        check_model_matches(cfg, &ck.state.model)?;
        let data = ck
            .extra_rng("data")
            .ok_or_else(|| Error::Format {
                offset: 0,
                reason: "checkpoint lacks the data stream".into(),
            })?;
        let step = ck.state.step;
        (ck.state, data, Some(step))
    } else {
        let state = TrainState::new(cfg.new_model()?, &tc, cfg.training.seed)?;
        (state, Rng::with_stream(cfg.training.seed, crate::disent::streams::DATA), None)
    };

    let d = cfg.model.latent_dim;
    let with_r = cfg.objective.kind == ObjectiveKind::RfVae;
    let header = loss_csv_header(d, with_r);
    let mut kept = vec![header.clone()];
    if let Some(step) = resumed_from {
        if let Ok(old) = fs::read_to_string(run.loss_csv()) {
            kept = vec![header];
            kept.extend(old.lines().skip(1).filter(|l| {
                l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step)
            }).map(str::to_string));
        }
    }
    ensure_parent(&run.loss_csv())?;
    let csv_path = run.loss_csv();
    write_atomic(&csv_path, (kept.join("\n") + "\n").as_bytes())?;
    let mut csv = fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| io_at(&csv_path, e))?;

    let mut log = String::new();
    match resumed_from {
        Some(s) => { let _ = writeln!(log, "resumed at step {s}"); }
        None => { let _ = writeln!(log, "fresh start, seed {}", cfg.training.seed); }
    }
    let _ = writeln!(
        log,
        "objective {}; discriminator: {}",
        cfg.objective.kind.name(),
        match &state.discriminator {
            Some(disc) => format!("{:?}", disc.mlp.spec().layer_widths),
            None => "none".into(),
        }
    );

    let t = &cfg.training;
    let mut last_breakdown = None;
    let mut failure = None;
    while state.step < t.iterations {
        let step = state.step;
        let idx: Vec<usize> = (0..t.batch_size).map(|_| data_rng.below(ds.len())).collect();
        let breakdown = match train_step(&mut state, &ds.batch(&idx), &tc) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if step % t.log_every == 0 {
            writeln!(csv, "{}", loss_csv_row(step, &breakdown)).map_err(|e| io_at(&csv_path, e))?;
        }
        last_breakdown = Some(breakdown);
        if state.step % t.checkpoint_every == 0 || state.step == t.iterations {
            save_checkpoint(run, &state, &data_rng)?;
        }
    }
    if let Some(e) = &failure {
        let _ = writeln!(log, "aborted: {e}");
    } else {
        let _ = writeln!(log, "finished at step {}", state.step);
    }
    append_text(&run.train_log(), &log)?;
    if resumed_from.is_none() && t.iterations == 0 {
        save_checkpoint(run, &state, &data_rng)?;
    }
    stamp(run, "train", started)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainSummary {
        resumed_from,
        final_step: state.step,
        last: last_breakdown,
    })
}

fn save_checkpoint(run: &RunDir, state: &TrainState, data_rng: &Rng) -> Result<()> {
    let bytes = Checkpoint {
        state: state.clone(),
        extra_rngs: vec![("data".into(), data_rng.state())],
    }
    .to_bytes();
    write_atomic(&run.checkpoint_at(state.step), &bytes)?;
    write_atomic(&run.last_checkpoint(), &bytes)
}

fn append_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_at(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_at(path, e))
}

fn check_model_matches(cfg: &ExperimentConfig, model: &VaeModel) -> Result<()> {
    let want = cfg.new_model()?;
    if model.encoder.spec() != want.encoder.spec()
        || model.decoder.spec() != want.decoder.spec()
        || model.resolution != want.resolution
    {
        return Err(Error::Format {
            offset: 0,
            reason: format!(
                "checkpoint model {:?}/{:?} does not match config {:?}/{:?}",
                model.encoder.spec().layer_widths,
                model.decoder.spec().layer_widths,
                want.encoder.spec().layer_widths,
                want.decoder.spec().layer_widths
            ),
        });
    }
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, run: &RunDir, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map_or_else(|| run.last_checkpoint(), Path::to_path_buf);
    let bytes = fs::read(&path).map_err(|e| io_at(&path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    check_model_matches(cfg, &ck.state.model)?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub relevance: Option<RelevanceSummary>,
    pub kl_active: usize,
}

/// Scores a checkpoint, or with `oracle` set, the ground-truth factors
/// themselves in place of the encoder.
pub fn cmd_eval(cfg: &ExperimentConfig, run: &RunDir, checkpoint: Option<&Path>, oracle: bool) -> Result<EvalOutcome> {
    let started = unix_seconds();
    cfg.validate()?;
    let ds = load_dataset(cfg, run)?;
    let e = &cfg.eval;
    let (table, kl, r, model_name) = if oracle {
        let space = ds.space.clone();
        let t = LatentTable::from_fn(&space, |tu| space.scaled(tu))?;
        (t, Vec::new(), None, format!("{}-oracle", cfg.name))
    } else {
        let ck = load_checkpoint(cfg, run, checkpoint)?;
        let model = &ck.state.model;
        let t = LatentTable::from_model(model, &ds, e.encode_batch)?;
        let kl = expected_prior_kl_report(model, &ds, e.encode_batch)?.per_dim;
        let r = ck.state.relevance.as_ref().map(|r| r.values());
        (t, kl, r, cfg.name.clone())
    };
    let rng = Rng::with_stream(cfg.training.seed, EVAL_STREAM);
    let m1 = metric1(&table, &ds.space, e.vote, &rng.derive(EVAL_STREAM + 1))?;
    let m2 = metric2(&table, &ds.space, e.vote, &rng.derive(EVAL_STREAM + 2))?;
    let m3 = metric3(&table, &ds.space, e.lasso_alpha, &rng.derive(EVAL_STREAM + 3))?;
    let report = MetricReport {
        dataset: ds.name.clone(),
        model: model_name,
        metric1_mean: m1.mean,
        metric1_std: m1.std,
        metric2_mean: m2.mean,
        metric2_std: m2.std,
        metric3_d: m3.d,
        metric3_c: m3.c,
        metric3_i: m3.i,
        kl_per_dim: kl.clone(),
        relevance: r.clone(),
    };
    let relevance = match &r {
        Some(r) => Some(relevance_report(r, &kl, e.relevance_hi, e.relevance_lo)?),
        None => None,
    };
    let kl_active = kl.iter().filter(|v| **v > crate::metrics::ACTIVE_KL).count();

    let mut text = report.to_text();
    if m3.degenerate {
        text.push_str("note: all LASSO importances are zero; D and C set to 0\n");
    }
    if !m3.all_converged {
        text.push_str("note: LASSO hit the sweep limit for at least one factor\n");
    }
    let _ = writeln!(text, "dims with expected prior KL > 0.5: {kl_active}");
    if let Some(s) = &relevance {
        let _ = writeln!(
            text,
            "relevant {:?}  nuisance {:?}  undecided {:?}",
            s.relevant, s.nuisance, s.undecided
        );
        let _ = writeln!(text, "            KL>0.5  KL<=0.5");
        for (name, row) in ["relevant", "nuisance", "undecided"].iter().zip(s.cross) {
            let _ = writeln!(text, "{name:<11} {:>6}  {:>7}", row[0], row[1]);
        }
    }
    text.push_str("Metric I contingency (rows latent, columns factor), first repeat:\n");
    for row in &m1.tables[0].counts {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
        let _ = writeln!(text, "{}", cells.join(""));
    }
    write_atomic(&run.metrics_csv(), report.to_csv().as_bytes())?;
    write_atomic(&run.report_txt(), text.as_bytes())?;
    stamp(run, "eval", started)?;
    Ok(EvalOutcome {
        report,
        relevance,
        kl_active,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalDim {
    pub dim: usize,
    pub relevance: Option<f64>,
    pub relevant: bool,
    pub max_pixel_std: f64,
    pub path: PathBuf,
}

/// One P5 grid per latent dimension, sweeping it around the seed image's
/// posterior mean, and a manifest flagging relevant dims.
pub fn cmd_traverse(
    cfg: &ExperimentConfig,
    run: &RunDir,
    checkpoint: Option<&Path>,
    seed_image: Option<usize>,
) -> Result<Vec<TraversalDim>> {
    let started = unix_seconds();
    cfg.validate()?;
    let ds = load_dataset(cfg, run)?;
    let ck = load_checkpoint(cfg, run, checkpoint)?;
    let index = seed_image.unwrap_or(cfg.eval.seed_image);
    if index >= ds.len() {
        return Err(Error::Index(format!("seed image {index} of {}", ds.len())));
    }
    let model = &ck.state.model;
    let values = traversal_values(cfg.eval.traversal_span, cfg.eval.traversal_count);
    let r = ck.state.relevance.as_ref().map(|r| r.values());
    let dir = run.traversals();
    let mut dims = Vec::with_capacity(model.latent_dim);
    let mut manifest = format!(
        "seed image {index}; values {:?}\ndim  r       relevant  max_pixel_std  file\n",
        values
    );
    for j in 0..model.latent_dim {
        let images = latent_traversal(model, ds.image(index), j, &values)?;
        let path = dir.join(format!("dim_{j}.pgm"));
        write_atomic(&path, &traversal_pgm(&images, model.resolution))?;
        let rj = r.as_ref().map(|r| r[j]);
        let relevant = rj.is_some_and(|v| v > cfg.eval.relevance_hi);
        let std = max_pixel_std(&images);
        let _ = writeln!(
            manifest,
            "{j:<4} {:<7} {:<9} {std:<14.6} dim_{j}.pgm",
            rj.map_or("n/a".into(), |v| format!("{v:.4}")),
            if relevant { "[x]" } else { "" },
        );
        dims.push(TraversalDim {
            dim: j,
            relevance: rj,
            relevant,
            max_pixel_std: std,
            path,
        });
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
    stamp(run, "traverse", started)?;
    Ok(dims)
}

/// Scores in the order they are tabulated; `false` marks lower-is-better.
pub const REPORT_COLUMNS: [(&str, &str, bool); 5] = [
    ("metric1", "Metric I", true),
    ("metric2", "Metric II", true),
    ("metric3_d", "D", true),
    ("metric3_c", "C", true),
    ("metric3_i_nrmse", "I(nRMSE)", false),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub values: BTreeMap<String, (f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedReport {
    pub rows: Vec<ReportRow>,
    /// Per column, (best row, second-best row).
    pub marks: BTreeMap<String, (Option<usize>, Option<usize>)>,
}

/// Reads a `metrics.csv` (or a run directory containing one).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let file = if path.is_dir() { RunDir::new(path).metrics_csv() } else { path.to_path_buf() };
    let text = read_text(&file)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format {
            offset: 0,
            reason: format!("{} does not start with {CSV_HEADER:?}", file.display()),
        });
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut offset = CSV_HEADER.len() + 1;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().ok();
        let (Some(value), true) = (f.get(3).copied().and_then(parse), f.len() == 5) else {
            return Err(Error::Format {
                offset,
                reason: format!("{}: bad row {line:?}", file.display()),
            });
        };
        let std = if f[4].is_empty() { None } else { parse(f[4]) };
        match rows.iter_mut().find(|r| r.dataset == f[0] && r.model == f[1]) {
            Some(r) => {
                r.values.insert(f[2].to_string(), (value, std));
            }
            None => rows.push(ReportRow {
                dataset: f[0].to_string(),
                model: f[1].to_string(),
                values: BTreeMap::from([(f[2].to_string(), (value, std))]),
            }),
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}

/// Merges reports in input order and marks the best and second-best row of
/// each score; on ties the earlier row wins.
pub fn merge_reports(inputs: Vec<ReportRow>) -> Result<MergedReport> {
    if inputs.is_empty() {
        return Err(Error::Merge("no metric reports given".into()));
    }
    let mut missing = Vec::new();
    for row in &inputs {
        let absent: Vec<&str> = REPORT_COLUMNS
            .iter()
            .map(|c| c.0)
            .filter(|c| !row.values.contains_key(*c))
            .collect();
        if !absent.is_empty() {
            missing.push(format!("{}/{} lacks {}", row.dataset, row.model, absent.join(" ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Merge(missing.join("; ")));
    }
    let mut marks = BTreeMap::new();
    for (key, _, higher) in REPORT_COLUMNS {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let score = |i: usize| {
            let v = inputs[i].values[key].0;
            if higher { v } else { -v }
        };
        // stable sort keeps earlier rows ahead on ties
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
        marks.insert(key.to_string(), (order.first().copied(), order.get(1).copied()));
    }
    Ok(MergedReport { rows: inputs, marks })
}

impl MergedReport {
    /// Fixed-width table; `*` marks the best cell of a column, `+` the
    /// second best.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16} {:<20}", "dataset", "model");
        for (_, title, _) in REPORT_COLUMNS {
            let _ = write!(out, " {title:>12}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<16} {:<20}", row.dataset, row.model);
            for (key, _, _) in REPORT_COLUMNS {
                let (best, second) = self.marks[key];
                let mark = if best == Some(i) {
                    "*"
                } else if second == Some(i) {
                    "+"
                } else {
                    " "
                };
                let _ = write!(out, " {:>11.4}{mark}", row.values[key].0);
            }
            out.push('\n');
        }
        out.push_str("* best, + second best; I is a normalized error, lower is better\n");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model");
        for (key, _, _) in REPORT_COLUMNS {
            let _ = write!(out, ",{key},{key}_rank");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{},{}", row.dataset, row.model);
            for (key, _, _) in REPORT_COLUMNS {
                let (best, second) = self.marks[key];
                let rank = if best == Some(i) {
                    "best"
                } else if second == Some(i) {
                    "second"
                } else {
                    ""
                };
                let _ = write!(out, ",{},{rank}", row.values[key].0);
            }
            out.push('\n');
        }
        out
    }
}

pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<MergedReport> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_metrics_csv(p)?);
    }
    let merged = merge_reports(rows)?;
    if let Some(dir) = out {
        write_atomic(&dir.join("report.txt"), merged.to_text().as_bytes())?;
        write_atomic(&dir.join("report.csv"), merged.to_csv().as_bytes())?;
    }
    Ok(merged)
}
