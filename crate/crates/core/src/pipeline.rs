//! File-based stages behind the `aan` tool: data generation, training,
//! anonymization, evaluation, the λ sweep and the gradient check.
//!
//! All stages of one run share an output directory with fixed file names.
//! Every random draw is seeded from [`RunConfig::seed`] through
//! [`derive_seed`], so each stage can be rerun on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aan::{
    build_aan, gradcheck, load_model, save_model, tiny_gradcheck_problem, train, AanDims, AanModel,
    EpochRecord, GradcheckReport, TrainConfig, TrainingHistory,
};
use crate::anonymizer::{anonymize_corpus, AnonymizationMethod, PseudoPool, DEFAULT_TOP_K};
use crate::asv::{evaluate_conditions, EvalSet, MetricsReport, TrialConfig};
use crate::dataset::{
    format_f64, generate_corpus, read_corpus, split_corpus, write_corpus, Corpus, CorpusSpec,
};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const TRAIN_FILE: &str = "train.csv";
pub const VALID_FILE: &str = "valid.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MODEL_FILE: &str = "model.aan";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// First eight bytes (little endian) of `sha256(seed_le ‖ stage)`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Layer widths; input and class counts come from the training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    pub branch_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = AanDims::desk(1, 1, 1, 1);
        ModelConfig {
            hidden: d.hidden,
            latent: d.latent,
            branch_hidden: d.branch_hidden,
        }
    }
}

impl ModelConfig {
    pub fn dims_for(&self, corpus: &Corpus) -> AanDims {
        AanDims {
            hidden: self.hidden,
            latent: self.latent,
            branch_hidden: self.branch_hidden,
            ..AanDims::for_corpus(corpus)
        }
    }
}

/// The anonymization systems known to the tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Identity,
    Baseline,
    Aan1,
    Aan2,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Identity => "identity",
            MethodKind::Baseline => "baseline",
            MethodKind::Aan1 => "aan1",
            MethodKind::Aan2 => "aan2",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MethodKind::Identity),
            "baseline" => Ok(MethodKind::Baseline),
            "aan1" => Ok(MethodKind::Aan1),
            "aan2" => Ok(MethodKind::Aan2),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnonymizeConfig {
    pub top_k: usize,
    /// Checkpoint for the AAN methods; the run's own `model.aan` when unset
    /// (evaluate only).
    pub model: Option<PathBuf>,
    /// Embedding CSV used as the pseudo-speaker pool; the run's training
    /// split when unset (evaluate only).
    pub pool: Option<PathBuf>,
}

impl Default for AnonymizeConfig {
    fn default() -> Self {
        AnonymizeConfig {
            top_k: DEFAULT_TOP_K,
            model: None,
            pool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub dataset: String,
    pub systems: Vec<MethodKind>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            dataset: "desk".into(),
            systems: vec![MethodKind::Baseline, MethodKind::Aan1, MethodKind::Aan2],
        }
    }
}

/// Everything a run needs. The `seed` fields of the nested sections are
/// ignored; [`RunConfig::resolved`] fills them from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSpec,
    /// Utterances per speaker held out for each of valid and test.
    pub n_heldout: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub anonymize: AnonymizeConfig,
    pub trials: TrialConfig,
    pub evaluate: EvaluateConfig,
    pub sweep_lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            corpus: CorpusSpec::default(),
            n_heldout: 5,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            anonymize: AnonymizeConfig::default(),
            trials: TrialConfig::default(),
            evaluate: EvaluateConfig::default(),
            sweep_lambdas: vec![0.0, 1.0, 8.0],
        }
    }
}

const STAGE_SEEDS: [&str; 5] = ["corpus", "init", "train", "trials", "probe"];

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Per-stage seeds derived from [`RunConfig::seed`].
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        STAGE_SEEDS
            .iter()
            .map(|s| (s.to_string(), derive_seed(self.seed, s)))
            .collect()
    }

    /// Copy with every nested seed replaced by its derived stage seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.corpus.seed = derive_seed(self.seed, "corpus");
        c.train.seed = derive_seed(self.seed, "train");
        c.trials.seed = derive_seed(self.seed, "trials");
        c.trials.probe_seed = derive_seed(self.seed, "probe");
        c
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.dims_for_check()?;
        self.train.validate()?;
        if self.n_heldout == 0 {
            return Err(Error::invalid("n_heldout", "must be at least 1"));
        }
        if self.anonymize.top_k == 0 {
            return Err(Error::invalid("top_k", "must be at least 1"));
        }
        if self
            .sweep_lambdas
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::invalid("sweep_lambdas", "must be finite and >= 0"));
        }
        if self.trials.n_nontarget_per_target == 0 {
            return Err(Error::invalid(
                "n_nontarget_per_target",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

impl ModelConfig {
    fn dims_for_check(&self) -> Result<()> {
        AanDims {
            hidden: self.hidden,
            latent: self.latent,
            branch_hidden: self.branch_hidden,
            ..AanDims::desk(1, 1, 1, 1)
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: file_digest(path)?,
        })
    }
}

/// Record written next to the outputs of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub details: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub elapsed_ms: u64,
}

impl RunManifest {
    fn new(stage: &str, config: &RunConfig) -> Self {
        RunManifest {
            stage: stage.into(),
            tool_version: TOOL_VERSION.into(),
            config: config.clone(),
            seeds: config.stage_seeds(),
            details: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            elapsed_ms: 0,
        }
    }

    fn finish(mut self, started: Instant, path: &Path) -> Result<Self> {
        self.elapsed_ms = started.elapsed().as_millis() as u64;
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        Ok(self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose current digest differs from the recorded one.
    pub fn stale_files(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for d in self.inputs.iter().chain(&self.outputs) {
            if file_digest(&d.path)? != d.sha256 {
                stale.push(d.path.clone());
            }
        }
        Ok(stale)
    }
}

fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.manifest.json"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the train/valid/test splits of a freshly generated corpus.
pub fn gen_data(config: &RunConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg = config.resolved();
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let (train_c, valid, test) = split_corpus(&corpus, cfg.n_heldout)?;
    let mut m = RunManifest::new("gen-data", &cfg);
    for (name, c) in [
        (TRAIN_FILE, &train_c),
        (VALID_FILE, &valid),
        (TEST_FILE, &test),
    ] {
        let path = cfg.path(name);
        write_corpus(c, &path)?;
        m.outputs.push(FileDigest::of(&path)?);
    }
    log::info!(
        "wrote {} train, {} valid, {} test utterances to {}",
        train_c.len(),
        valid.len(),
        test.len(),
        cfg.out_dir.display()
    );
    m.finish(started, &manifest_path(&cfg.out_dir, "gen-data"))
}

/// Reads a corpus file and maps its labels onto `reference`'s vocabularies.
pub fn read_aligned(path: impl AsRef<Path>, reference: &Corpus) -> Result<Corpus> {
    read_corpus(path)?.reindexed(reference.vocabs())
}

/// The three splits written by [`gen_data`], sharing the training vocabularies.
pub fn load_splits(config: &RunConfig) -> Result<(Corpus, Corpus, Corpus)> {
    let train_c = read_corpus(config.path(TRAIN_FILE))?;
    let valid = read_aligned(config.path(VALID_FILE), &train_c)?;
    let test = read_aligned(config.path(TEST_FILE), &train_c)?;
    Ok((train_c, valid, test))
}

pub fn history_csv(history: &TrainingHistory) -> String {
    let mut out = String::from(
        "epoch,train_l_au,train_l_gender,train_l_accent,train_l_speaker,\
         valid_l_au,valid_l_gender,valid_l_accent,valid_l_speaker,\
         valid_acc_gender,valid_acc_accent,valid_acc_speaker\n",
    );
    for r in &history.epochs {
        let vals = [
            r.train.l_au,
            r.train.l_gender,
            r.train.l_accent,
            r.train.l_speaker,
            r.valid.l_au,
            r.valid.l_gender,
            r.valid.l_accent,
            r.valid.l_speaker,
            r.valid_accuracy.gender,
            r.valid_accuracy.accent,
            r.valid_accuracy.speaker,
        ];
        out.push_str(&r.epoch.to_string());
        for v in vals {
            out.push(',');
            out.push_str(&format_f64(v));
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_model(
    cfg: &RunConfig,
    train_c: &Corpus,
    valid: &Corpus,
) -> Result<(AanModel, TrainingHistory)> {
    let model = build_aan(
        cfg.model.dims_for(train_c),
        cfg.train.lambda,
        cfg.init_seed(),
    )?;
    let (model, history) = train(&model, train_c, valid, &cfg.train)?;
    let best = history.best();
    log::info!(
        "λ={} best epoch {} of {}: valid l_au {:.4}, speaker head acc {:.3}",
        cfg.train.lambda,
        history.best_epoch,
        history.epochs.len() - 1,
        best.valid.l_au,
        best.valid_accuracy.speaker
    );
    Ok((model, history))
}

/// Trains on the run's splits and writes the checkpoint and the history.
/// On divergence both are still written and the divergence error returned.
pub fn train_stage(config: &RunConfig) -> Result<(RunManifest, TrainingHistory)> {
    let started = Instant::now();
    let cfg = config.resolved();
    cfg.validate()?;
    let (train_c, valid, _) = load_splits(&cfg)?;
    let (model, history) = train_model(&cfg, &train_c, &valid)?;
    let mut m = RunManifest::new("train", &cfg);
    for name in [TRAIN_FILE, VALID_FILE] {
        m.inputs.push(FileDigest::of(cfg.path(name))?);
    }
    save_model(&model, cfg.path(MODEL_FILE))?;
    write_text(&cfg.path(HISTORY_FILE), &history_csv(&history))?;
    m.outputs.push(FileDigest::of(cfg.path(MODEL_FILE))?);
    m.outputs.push(FileDigest::of(cfg.path(HISTORY_FILE))?);
    m.details
        .insert("best_epoch".into(), history.best_epoch.to_string());
    if let Some(reason) = &history.diverged {
        m.details.insert("diverged".into(), reason.clone());
    }
    let m = m.finish(started, &manifest_path(&cfg.out_dir, "train"))?;
    if let Some(reason) = &history.diverged {
        return Err(Error::Divergence(reason.clone()));
    }
    Ok((m, history))
}

fn load_pool(path: &Path) -> Result<Arc<PseudoPool>> {
    let corpus = read_corpus(path)?;
    Ok(Arc::new(PseudoPool::from_corpus(
        &corpus,
        path.display().to_string(),
    )?))
}

fn require<'a>(p: Option<&'a Path>, kind: MethodKind, what: &str) -> Result<&'a Path> {
    p.ok_or_else(|| Error::Config(format!("method `{}` requires a {what}", kind.name())))
}

/// Builds a method from explicit model and pool paths.
pub fn build_method(
    kind: MethodKind,
    model: Option<&Path>,
    pool: Option<&Path>,
    top_k: usize,
) -> Result<AnonymizationMethod> {
    Ok(match kind {
        MethodKind::Identity => AnonymizationMethod::Identity,
        MethodKind::Baseline => AnonymizationMethod::BaselineFarthest {
            pool: load_pool(require(pool, kind, "pool")?)?,
            top_k,
        },
        MethodKind::Aan1 => AnonymizationMethod::Aan1 {
            model: Arc::new(load_model(require(model, kind, "model")?)?),
        },
        MethodKind::Aan2 => {
            let (model, pool) = (require(model, kind, "model")?, require(pool, kind, "pool")?);
            AnonymizationMethod::Aan2 {
                model: Arc::new(load_model(model)?),
                pool: load_pool(pool)?,
                top_k,
            }
        }
    })
}

/// Anonymizes one embedding file. The identity method copies the file
/// byte for byte after checking that it parses.
pub fn anonymize_stage(
    config: &RunConfig,
    kind: MethodKind,
    input: &Path,
    output: &Path,
) -> Result<RunManifest> {
    let started = Instant::now();
    let cfg = config.resolved();
    let method = build_method(
        kind,
        cfg.anonymize.model.as_deref(),
        cfg.anonymize.pool.as_deref(),
        cfg.anonymize.top_k,
    )?;
    let corpus = read_corpus(input)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if kind == MethodKind::Identity {
        std::fs::copy(input, output).map_err(|e| Error::io(output, e))?;
    } else {
        write_corpus(&anonymize_corpus(&corpus, &method)?, output)?;
    }
    let mut m = RunManifest::new("anonymize", &cfg);
    m.details.insert("method".into(), kind.name().into());
    m.details
        .insert("top_k".into(), cfg.anonymize.top_k.to_string());
    m.inputs.push(FileDigest::of(input)?);
    for p in [&cfg.anonymize.model, &cfg.anonymize.pool]
        .into_iter()
        .flatten()
    {
        if kind != MethodKind::Identity {
            m.inputs.push(FileDigest::of(p)?);
        }
    }
    m.outputs.push(FileDigest::of(output)?);
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    m.finish(started, &output.with_file_name(name))
}

fn systems_for(
    cfg: &RunConfig,
    kinds: &[MethodKind],
    model: Option<Arc<AanModel>>,
    pool: Arc<PseudoPool>,
) -> Result<Vec<(String, AnonymizationMethod)>> {
    let top_k = cfg.anonymize.top_k;
    let need_model = || {
        model
            .clone()
            .ok_or_else(|| Error::Config("AAN systems require a model".into()))
    };
    kinds
        .iter()
        .map(|&k| {
            let method = match k {
                MethodKind::Identity => AnonymizationMethod::Identity,
                MethodKind::Baseline => AnonymizationMethod::BaselineFarthest {
                    pool: pool.clone(),
                    top_k,
                },
                MethodKind::Aan1 => AnonymizationMethod::Aan1 {
                    model: need_model()?,
                },
                MethodKind::Aan2 => AnonymizationMethod::Aan2 {
                    model: need_model()?,
                    pool: pool.clone(),
                    top_k,
                },
            };
            Ok((k.name().to_string(), method))
        })
        .collect()
}

fn write_report(report: &MetricsReport, dir: &Path, suffix: &str) -> Result<Vec<FileDigest>> {
    let csv = dir.join(format!("report{suffix}.csv"));
    let txt = dir.join(format!("report{suffix}.txt"));
    let json = dir.join(format!("report{suffix}.json"));
    report.write_csv(&csv)?;
    write_text(&txt, &report.to_text())?;
    write_text(&json, &serde_json::to_string_pretty(report)?)?;
    [csv, txt, json].iter().map(FileDigest::of).collect()
}

/// Evaluates the configured systems on the run's splits: enrollment from
/// the valid split, trials from the test split, probes trained on the
/// training split.
pub fn evaluate_stage(config: &RunConfig) -> Result<(RunManifest, MetricsReport)> {
    let started = Instant::now();
    let cfg = config.resolved();
    cfg.validate()?;
    let (train_c, valid, test) = load_splits(&cfg)?;
    let mut m = RunManifest::new("evaluate", &cfg);
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE] {
        m.inputs.push(FileDigest::of(cfg.path(name))?);
    }
    let needs_model = cfg
        .evaluate
        .systems
        .iter()
        .any(|k| matches!(k, MethodKind::Aan1 | MethodKind::Aan2));
    let model = if needs_model {
        let path = cfg
            .anonymize
            .model
            .clone()
            .unwrap_or_else(|| cfg.path(MODEL_FILE));
        let model = load_model(&path)?;
        m.inputs.push(FileDigest::of(&path)?);
        Some(Arc::new(model))
    } else {
        None
    };
    let pool = match &cfg.anonymize.pool {
        Some(p) => {
            m.inputs.push(FileDigest::of(p)?);
            load_pool(p)?
        }
        None => Arc::new(PseudoPool::from_corpus(&train_c, TRAIN_FILE)?),
    };
    let systems = systems_for(&cfg, &cfg.evaluate.systems, model, pool)?;
    let set = EvalSet {
        tag: cfg.evaluate.dataset.clone(),
        train: train_c,
        enroll: valid,
        trial: test,
    };
    let report = evaluate_conditions(&set, &systems, &cfg.trials)?;
    m.outputs = write_report(&report, &cfg.out_dir, "")?;
    let m = m.finish(started, &manifest_path(&cfg.out_dir, "evaluate"))?;
    Ok((m, report))
}

/// Outcome of one λ of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub best_epoch: usize,
    /// Record of the returned (selected) epoch.
    pub selected: EpochRecord,
    pub diverged: Option<String>,
    pub report: MetricsReport,
}

fn lambda_tag(lambda: f64) -> String {
    format!("_lambda{lambda}")
}

/// Trains and evaluates one model per λ, writing a checkpoint, a history
/// and a report for each plus a summary `sweep.csv`.
pub fn sweep_lambda(config: &RunConfig, lambdas: &[f64]) -> Result<(RunManifest, Vec<SweepPoint>)> {
    let started = Instant::now();
    let mut cfg = config.resolved();
    if lambdas.is_empty() {
        return Err(Error::invalid("lambdas", "must not be empty"));
    }
    cfg.sweep_lambdas = lambdas.to_vec();
    cfg.validate()?;
    let (train_c, valid, test) = load_splits(&cfg)?;
    let mut m = RunManifest::new("sweep-lambda", &cfg);
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE] {
        m.inputs.push(FileDigest::of(cfg.path(name))?);
    }
    let pool = Arc::new(PseudoPool::from_corpus(&train_c, TRAIN_FILE)?);
    let set = EvalSet {
        tag: cfg.evaluate.dataset.clone(),
        train: train_c,
        enroll: valid,
        trial: test,
    };
    let mut points = Vec::new();
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        let (model, history) = train_model(&c, &set.train, &set.enroll)?;
        let tag = lambda_tag(lambda);
        let model_path = cfg.path(&format!("model{tag}.aan"));
        let history_path = cfg.path(&format!("history{tag}.csv"));
        save_model(&model, &model_path)?;
        write_text(&history_path, &history_csv(&history))?;
        m.outputs.push(FileDigest::of(&model_path)?);
        m.outputs.push(FileDigest::of(&history_path)?);
        let systems = systems_for(
            &c,
            &cfg.evaluate.systems,
            Some(Arc::new(model)),
            pool.clone(),
        )?;
        let report = evaluate_conditions(&set, &systems, &c.trials)?;
        m.outputs.extend(write_report(&report, &cfg.out_dir, &tag)?);
        points.push(SweepPoint {
            lambda,
            best_epoch: history.best_epoch,
            selected: *history.best(),
            diverged: history.diverged.clone(),
            report,
        });
    }
    let summary = cfg.path(SWEEP_FILE);
    write_text(&summary, &sweep_csv(&points))?;
    m.outputs.push(FileDigest::of(&summary)?);
    let m = m.finish(started, &manifest_path(&cfg.out_dir, "sweep-lambda"))?;
    Ok((m, points))
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("lambda,best_epoch,valid_l_au,valid_acc_gender,valid_acc_accent,valid_acc_speaker,diverged\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.lambda,
            p.best_epoch,
            format_f64(p.selected.valid.l_au),
            format_f64(p.selected.valid_accuracy.gender),
            format_f64(p.selected.valid_accuracy.accent),
            format_f64(p.selected.valid_accuracy.speaker),
            u8::from(p.diverged.is_some())
        );
    }
    out
}

/// Finite-difference check of a small random model.
pub fn gradcheck_stage(seed: u64, lambda: f64, eps: f64) -> Result<GradcheckReport> {
    let (model, x, labels) = tiny_gradcheck_problem(derive_seed(seed, "gradcheck"), lambda)?;
    gradcheck(&model, &x, &labels, eps)
}

/// Text rendering of the run's evaluation report.
pub fn report_stage(config: &RunConfig) -> Result<String> {
    let path = config.path(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: MetricsReport = serde_json::from_str(&text)?;
    Ok(report.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stage_and_are_stable() {
        assert_eq!(derive_seed(7, "train"), derive_seed(7, "train"));
        assert_ne!(derive_seed(7, "train"), derive_seed(7, "trials"));
        assert_ne!(derive_seed(7, "train"), derive_seed(8, "train"));
    }

    #[test]
    fn resolved_config_overwrites_nested_seeds() {
        let mut cfg = RunConfig::default();
        cfg.corpus.seed = 123;
        let r = cfg.resolved();
        assert_eq!(r.corpus.seed, derive_seed(0, "corpus"));
        assert_eq!(r.train.seed, derive_seed(0, "train"));
        assert_eq!(r.resolved(), r);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 5, "train": {"lambda": 1.0}}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.train.lambda, 1.0);
        assert_eq!(partial.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 5}"#).is_err());
    }

    #[test]
    fn invalid_lambda_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.train.lambda = -1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda"), "{msg}");
    }

    #[test]
    fn method_names_round_trip() {
        for k in [
            MethodKind::Identity,
            MethodKind::Baseline,
            MethodKind::Aan1,
            MethodKind::Aan2,
        ] {
            assert_eq!(k.name().parse::<MethodKind>().unwrap(), k);
        }
        assert!("aan3".parse::<MethodKind>().is_err());
    }

    #[test]
    fn aan2_without_pool_is_an_error() {
        let err = build_method(MethodKind::Aan2, Some(Path::new("m.aan")), None, 10).unwrap_err();
        assert!(err.to_string().contains("pool"), "{err}");
        assert!(build_method(MethodKind::Aan1, None, None, 10).is_err());
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let history = TrainingHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 0,
                    train: Default::default(),
                    valid: Default::default(),
                    valid_accuracy: Default::default(),
                };
                3
            ],
            best_epoch: 0,
            diverged: None,
        };
        let csv = history_csv(&history);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 12);
    }
}
