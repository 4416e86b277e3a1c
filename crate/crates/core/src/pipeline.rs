//! Staged on-disk pipeline: generate or ingest tracks, extract features,
//! train both flows, score, mine, evaluate and sweep ablations.
//!
//! Each stage reads the previous stage's artifacts from the output directory
//! and writes its own atomically. Every artifact records the hash of the
//! upstream configuration (data, features, flow, training, seed); mining
//! ratios, `lambda` and Kalman settings are left out so trained models can be
//! reused across sweeps.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ingest_csv, window_examples_for, Example, LengthUnit, VehicleTrack};
use crate::error::{Error, Result};
use crate::eval::{self, build_report, ErrorMode, EvalReport, KalmanConfig, ReportInputs};
use crate::features::{extract_all, FeatureMatrix, FeatureVector, PartitionScheme, Scope, Standardizer};
use crate::flow::{FlowConfig, FlowModel};
use crate::io::{read_bytes, write_atomic};
use crate::mining::{self, mine_all, MinedSummary, ScoreTable};
use crate::synth::{gen_dataset_with, write_tracks_csv, SynthConfig};
use crate::train::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Trajectory table, when `source = "csv"`.
    pub path: Option<PathBuf>,
    pub unit: LengthUnit,
    /// Frames between consecutive example windows of one track.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: SourceKind::Synth, path: None, unit: LengthUnit::Meters, stride: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub scheme: PartitionScheme,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { scheme: PartitionScheme::FixSegNum(5) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub lambda: f64,
    pub r: Vec<f64>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { lambda: 0.5, r: vec![0.05, 0.1, 0.15, 0.2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub kalman: KalmanConfig,
    pub error_mode: ErrorMode,
    pub histogram_bins: usize,
    /// Optional `example_index,error_m` file from another predictor.
    pub external_errors: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { kalman: KalmanConfig::default(), error_mode: ErrorMode::Terminal, histogram_bins: 40, external_errors: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub schemes: Vec<PartitionScheme>,
    pub lambdas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            schemes: vec![
                PartitionScheme::FixSegNum(1),
                PartitionScheme::FixSegNum(3),
                PartitionScheme::FixSegNum(5),
                PartitionScheme::FixSegLen(0.6),
                PartitionScheme::FixSegLen(1.0),
                PartitionScheme::FixSegLen(1.4),
            ],
            lambdas: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

/// Everything one pipeline directory is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Master seed; generation, both trainings and the random baseline
    /// derive their seeds from it.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub flow: FlowConfig,
    pub training: TrainConfig,
    pub mining: MiningConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("trajmine_out"),
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            flow: FlowConfig::default(),
            training: TrainConfig::default(),
            mining: MiningConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub r: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub scheme: Option<PartitionScheme>,
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: PipelineConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
            })?
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            Error::Config(format!("{at}{}", e.message()))
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = &o.r {
            self.mining.r = r.clone();
        }
        if let Some(l) = o.lambda {
            self.mining.lambda = l;
        }
        if let Some(s) = o.scheme {
            self.features.scheme = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mining.r.is_empty() {
            return Err(Error::Config("mining.r needs at least one ratio".into()));
        }
        for &r in &self.mining.r {
            mining::check_ratio(r).map_err(|_| Error::Config(format!("mining ratio {r} outside (0, 1]")))?;
        }
        if !self.mining.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride must be at least 1".into()));
        }
        if self.data.source == SourceKind::Csv && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"csv\" needs data.path".into()));
        }
        self.eval.kalman.validate()?;
        crate::features::partition(Scope::X.window_frames(), self.features.scheme)?;
        Ok(())
    }

    /// SHA-256 over the upstream parts of the configuration.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Upstream<'a> {
            seed: u64,
            data: &'a DataConfig,
            synth: Option<&'a SynthConfig>,
            features: &'a FeatureConfig,
            flow: &'a FlowConfig,
            training: &'a TrainConfig,
        }
        let u = Upstream {
            seed: self.seed,
            data: &self.data,
            synth: (self.data.source == SourceKind::Synth).then_some(&self.synth),
            features: &self.features,
            flow: &self.flow,
            training: &self.training,
        };
        let json = serde_json::to_vec(&u).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn synth_seed(&self) -> u64 {
        self.seed
    }

    fn train_config(&self, scope: Scope) -> TrainConfig {
        let offset = match scope {
            Scope::X => 1,
            Scope::Z => 2,
        };
        TrainConfig { seed: self.seed.wrapping_add(offset), ..self.training.clone() }
    }

    fn random_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Ingest,
    Features,
    Train,
    Score,
    Mine,
    Eval,
    Ablate,
    /// Every stage from generation (or ingest) through evaluation.
    All,
}

impl Stage {
    pub const ALL: [Stage; 9] =
        [Stage::Gen, Stage::Ingest, Stage::Features, Stage::Train, Stage::Score, Stage::Mine, Stage::Eval, Stage::Ablate, Stage::All];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Mine => "mine",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stage {s:?}")))
    }
}

pub mod files {
    pub const TRACKS_CSV: &str = "tracks.csv";
    pub const RARE_FLAGS: &str = "rare_flags.json";
    pub const TRACKS: &str = "tracks.jsonl";
    pub const EXAMPLES: &str = "examples.jsonl";
    pub const LABELS: &str = "labels.json";
    pub const FEATURES_X: &str = "features_x.bin";
    pub const FEATURES_Z: &str = "features_z.bin";
    pub const FLOW_X: &str = "flow_x.flow";
    pub const FLOW_Z: &str = "flow_z.flow";
    pub const TRAINLOG_X: &str = "trainlog_x.csv";
    pub const TRAINLOG_Z: &str = "trainlog_z.csv";
    pub const TRAIN_SUMMARY: &str = "train_summary.json";
    pub const SCORES: &str = "scores.csv";
    pub const MINED_SUMMARY: &str = "mined_summary.json";
    pub const ERRORS: &str = "errors.csv";
    pub const EVAL_REPORT: &str = "eval_report.json";
    pub const HISTOGRAM: &str = "histogram.csv";
    pub const ABLATE_DIR: &str = "ablate";
    pub const ABLATE_SUMMARY: &str = "ablate/summary.csv";
}

/// File name of the mined subsets for ratio `r`.
pub fn mined_file(r: f64) -> String {
    format!("mined_r{r}.csv")
}

const HASH_PREFIX: &str = "# config_hash: ";

fn with_hash_line(hash: &str, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    out.extend(body);
    out
}

/// Hash on the leading comment line of a CSV artifact.
pub fn csv_hash(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    std::str::from_utf8(first)
        .ok()
        .and_then(|l| l.strip_prefix(HASH_PREFIX))
        .map(|h| h.trim().to_string())
        .ok_or_else(|| Error::Schema(format!("{}: missing config hash line", path.display())))
}

/// Hash-stamped JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub body: T,
}

fn write_json<T: Serialize>(path: &Path, hash: &str, body: T) -> Result<()> {
    let doc = Stamped { config_hash: hash.to_string(), body };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Stamped<T>> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonlHeader {
    config_hash: String,
}

fn write_jsonl<T: Serialize>(path: &Path, hash: &str, records: &[T]) -> Result<()> {
    let mut bytes = serde_json::to_vec(&JsonlHeader { config_hash: hash.to_string() })?;
    bytes.push(b'\n');
    bytes.extend(crate::io::to_jsonl(records)?);
    write_atomic(path, &bytes)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(String, Vec<T>)> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::Schema(format!("{}: not UTF-8", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: JsonlHeader = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| Error::Schema(format!("{}: header line: {e}", path.display())))?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Schema(format!("{}: line {}: {e}", path.display(), i + 2))))
        .collect::<Result<Vec<T>>>()?;
    Ok((header.config_hash, records))
}

/// Per-example rare labels, when the data source provides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub rare: Option<Vec<bool>>,
    pub rejected_rows: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareFlags {
    pub flags: std::collections::BTreeMap<i64, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub x: TrainLog,
    pub z: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSummaries {
    pub subsets: Vec<MinedSummary>,
}

/// Fraction of rare-labelled examples in each subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareRecall {
    pub r: f64,
    pub d_x: f64,
    pub d_z: f64,
    pub d_yx: f64,
    pub random: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    /// Mean relative error change over 20 seeded random subsets, per ratio.
    pub random_mean_delta_err: Vec<f64>,
    pub rare_recall: Option<Vec<RareRecall>>,
}

/// Paths of every artifact in one output directory.
pub struct Layout<'a> {
    root: &'a Path,
}

impl<'a> Layout<'a> {
    pub fn new(root: &'a Path) -> Self {
        Layout { root }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an input, or a prerequisite error naming the producing stage.
    fn need(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Prerequisite { stage: stage.name().to_string(), path: p })
        }
    }
}

fn check_hash(expected: &str, found: &str, path: &Path) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} was produced by config {found}, current config is {expected}; rerun the earlier stages",
            path.display()
        )))
    }
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    log::info!("stage {stage} -> {}", cfg.out_dir.display());
    match stage {
        Stage::Gen => stage_gen(cfg),
        Stage::Ingest => stage_ingest(cfg),
        Stage::Features => stage_features(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Score => stage_score(cfg),
        Stage::Mine => stage_mine(cfg),
        Stage::Eval => stage_eval(cfg),
        Stage::Ablate => stage_ablate(cfg),
        Stage::All => {
            let mut out = Vec::new();
            if cfg.data.source == SourceKind::Synth {
                out.extend(stage_gen(cfg)?);
            }
            for s in [Stage::Ingest, Stage::Features, Stage::Train, Stage::Score, Stage::Mine, Stage::Eval] {
                out.extend(run_stage(s, cfg)?);
            }
            Ok(out)
        }
    }
}

fn stage_gen(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    if cfg.data.source != SourceKind::Synth {
        return Err(Error::Config("`gen` needs data.source = \"synth\"".into()));
    }
    let l = Layout::new(&cfg.out_dir);
    let hash = cfg.config_hash();
    let ds = gen_dataset_with(&SynthConfig { seed: cfg.synth_seed(), ..cfg.synth.clone() })?;
    let mut body = Vec::new();
    write_tracks_csv(&ds.tracks, &mut body)?;
    let csv = l.path(files::TRACKS_CSV);
    write_atomic(&csv, &with_hash_line(&hash, body))?;
    let flags = l.path(files::RARE_FLAGS);
    write_json(&flags, &hash, RareFlags { flags: ds.rare_flags() })?;
    Ok(vec![csv, flags])
}

fn stage_ingest(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let hash = cfg.config_hash();
    let (ingested, targets) = match cfg.data.source {
        SourceKind::Synth => {
            let csv = l.need(files::TRACKS_CSV, Stage::Gen)?;
            check_hash(&hash, &csv_hash(&csv)?, &csv)?;
            let flags_path = l.need(files::RARE_FLAGS, Stage::Gen)?;
            let flags: Stamped<RareFlags> = read_json(&flags_path)?;
            check_hash(&hash, &flags.config_hash, &flags_path)?;
            (ingest_csv(&csv, LengthUnit::Meters)?, Some(flags.body.flags))
        }
        SourceKind::Csv => {
            let path = cfg.data.path.as_ref().expect("validated");
            if !path.exists() {
                return Err(Error::Config(format!("data.path {} does not exist", path.display())));
            }
            (ingest_csv(path, cfg.data.unit)?, None)
        }
    };
    if !ingested.rejected_rows.is_empty() {
        log::warn!("skipped {} rows with non-finite positions", ingested.rejected_rows.len());
    }
    let target_ids: Option<BTreeSet<i64>> = targets.as_ref().map(|m| m.keys().copied().collect());
    let examples = window_examples_for(&ingested.tracks, cfg.data.stride, target_ids.as_ref())?;
    if examples.is_empty() {
        return Err(Error::Data("no track is long enough for an 8 s example".into()));
    }
    let rare = targets.map(|m| examples.iter().map(|e| m.get(&e.target_id).copied().unwrap_or(false)).collect());

    let tracks = l.path(files::TRACKS);
    write_jsonl(&tracks, &hash, &ingested.tracks)?;
    let ex = l.path(files::EXAMPLES);
    write_jsonl(&ex, &hash, &examples)?;
    let labels = l.path(files::LABELS);
    write_json(&labels, &hash, Labels { rare, rejected_rows: ingested.rejected_rows })?;
    log::info!("{} tracks, {} examples", ingested.tracks.len(), examples.len());
    Ok(vec![tracks, ex, labels])
}

fn load_examples(cfg: &PipelineConfig, l: &Layout<'_>) -> Result<Vec<Example>> {
    let path = l.need(files::EXAMPLES, Stage::Ingest)?;
    let (h, examples) = read_jsonl(&path)?;
    check_hash(&cfg.config_hash(), &h, &path)?;
    Ok(examples)
}

fn load_scene(cfg: &PipelineConfig, l: &Layout<'_>) -> Result<(Vec<VehicleTrack>, Vec<Example>)> {
    let path = l.need(files::TRACKS, Stage::Ingest)?;
    let (h, tracks) = read_jsonl(&path)?;
    check_hash(&cfg.config_hash(), &h, &path)?;
    Ok((tracks, load_examples(cfg, l)?))
}

fn feature_matrices(
    tracks: &[VehicleTrack],
    examples: &[Example],
    scheme: PartitionScheme,
    hash: &str,
) -> Result<[FeatureMatrix; 2]> {
    let build = |scope| -> Result<FeatureMatrix> {
        Ok(FeatureMatrix { scope, scheme, rows: extract_all(examples, tracks, scope, scheme)?, config_hash: hash.to_string() })
    };
    Ok([build(Scope::X)?, build(Scope::Z)?])
}

fn stage_features(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let (tracks, examples) = load_scene(cfg, &l)?;
    let [fx, fz] = feature_matrices(&tracks, &examples, cfg.features.scheme, &cfg.config_hash())?;
    let px = l.path(files::FEATURES_X);
    let pz = l.path(files::FEATURES_Z);
    fx.save(&px)?;
    fz.save(&pz)?;
    Ok(vec![px, pz])
}

/// Standardizes, trains and attaches the standardizer to the model.
pub fn fit_flow(rows: &[FeatureVector], flow: &FlowConfig, training: &TrainConfig) -> Result<(FlowModel, TrainLog)> {
    let standardizer = Standardizer::fit(rows)?;
    let data = rows.iter().map(|r| standardizer.apply(r)).collect::<Result<Vec<_>>>()?;
    let (mut model, log) = train(&data, flow, training)?;
    model.standardizer = Some(standardizer);
    Ok((model, log))
}

fn load_features(cfg: &PipelineConfig, l: &Layout<'_>, scope: Scope) -> Result<FeatureMatrix> {
    let name = match scope {
        Scope::X => files::FEATURES_X,
        Scope::Z => files::FEATURES_Z,
    };
    let path = l.need(name, Stage::Features)?;
    let m = FeatureMatrix::load(&path)?;
    check_hash(&cfg.config_hash(), &m.config_hash, &path)?;
    if m.scope != scope || m.scheme != cfg.features.scheme {
        return Err(Error::Config(format!("{} holds {:?} features, expected {:?}", path.display(), m.scheme, cfg.features.scheme)));
    }
    Ok(m)
}

fn trainlog_bytes(hash: &str, log: &TrainLog) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    log.write_csv(&mut body)?;
    Ok(with_hash_line(hash, body))
}

fn stage_train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let hash = cfg.config_hash();
    let mut written = Vec::new();
    let mut logs = Vec::new();
    for (scope, flow_name, log_name) in
        [(Scope::X, files::FLOW_X, files::TRAINLOG_X), (Scope::Z, files::FLOW_Z, files::TRAINLOG_Z)]
    {
        let m = load_features(cfg, &l, scope)?;
        let (model, log) = fit_flow(&m.rows, &cfg.flow, &cfg.train_config(scope))?;
        log::info!(
            "{} flow: best epoch {} of {}, val nll {:.4}",
            scope.name(),
            log.best_epoch,
            log.epochs.len() - 1,
            log.best().map_or(f64::NAN, |e| e.val_nll)
        );
        let mp = l.path(flow_name);
        model.save(&mp, &hash)?;
        let lp = l.path(log_name);
        write_atomic(&lp, &trainlog_bytes(&hash, &log)?)?;
        written.extend([mp, lp]);
        logs.push(log);
    }
    let z = logs.pop().expect("two logs");
    let x = logs.pop().expect("two logs");
    let sp = l.path(files::TRAIN_SUMMARY);
    write_json(&sp, &hash, TrainSummary { x, z })?;
    written.push(sp);
    Ok(written)
}

fn load_model(cfg: &PipelineConfig, l: &Layout<'_>, name: &str) -> Result<FlowModel> {
    let path = l.need(name, Stage::Train)?;
    let (m, h) = FlowModel::load(&path)?;
    check_hash(&cfg.config_hash(), &h, &path)?;
    Ok(m)
}

fn scores_bytes(hash: &str, table: &ScoreTable, subsets: Option<&mining::MinedSubsets>) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    mining::write_scores_csv(&mut body, table, subsets)?;
    Ok(with_hash_line(hash, body))
}

fn stage_score(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let mx = load_model(cfg, &l, files::FLOW_X)?;
    let mz = load_model(cfg, &l, files::FLOW_Z)?;
    let fx = load_features(cfg, &l, Scope::X)?;
    let fz = load_features(cfg, &l, Scope::Z)?;
    let table = mining::score_examples(&mx, &mz, &fx.rows, &fz.rows, cfg.mining.lambda)?;
    let p = l.path(files::SCORES);
    write_atomic(&p, &scores_bytes(&cfg.config_hash(), &table, None)?)?;
    Ok(vec![p])
}

fn load_scores(cfg: &PipelineConfig, l: &Layout<'_>) -> Result<ScoreTable> {
    let path = l.need(files::SCORES, Stage::Score)?;
    check_hash(&cfg.config_hash(), &csv_hash(&path)?, &path)?;
    mining::read_scores_csv(read_bytes(&path)?.as_slice(), cfg.mining.lambda)
}

fn stage_mine(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let hash = cfg.config_hash();
    let table = load_scores(cfg, &l)?;
    let mut written = Vec::new();
    let mut summaries = Vec::new();
    for &r in &cfg.mining.r {
        let m = mine_all(&table, r)?;
        let p = l.path(&mined_file(r));
        write_atomic(&p, &scores_bytes(&hash, &table, Some(&m))?)?;
        written.push(p);
        summaries.push(m.summary(table.len()));
    }
    let sp = l.path(files::MINED_SUMMARY);
    write_json(&sp, &hash, MinedSummaries { subsets: summaries })?;
    written.push(sp);
    Ok(written)
}

fn rare_fraction(rare: &[bool], set: &[usize]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.iter().filter(|&&i| rare[i]).count() as f64 / set.len() as f64
}

struct EvalInputs<'a> {
    table: &'a ScoreTable,
    errors: &'a [f64],
    external: Option<&'a [f64]>,
    rare: Option<&'a [bool]>,
}

fn evaluate(cfg: &PipelineConfig, lambda: f64, inputs: &EvalInputs<'_>) -> Result<EvalSummary> {
    let hash = cfg.config_hash();
    let table = inputs.table.with_lambda(lambda);
    let mut reports = Vec::new();
    let mut random_mean = Vec::new();
    let mut recall = Vec::new();
    for &r in &cfg.mining.r {
        let subsets = mine_all(&table, r)?;
        let report = build_report(&ReportInputs {
            subsets: &subsets,
            errors: inputs.errors,
            error_mode: cfg.eval.error_mode,
            random_seed: cfg.random_seed(),
            external_errors: inputs.external,
            config_hash: &hash,
        })?;
        random_mean.push(eval::random_delta_err(inputs.errors, r, (0..20).map(|k| cfg.random_seed().wrapping_add(k)))?);
        if let Some(rare) = inputs.rare {
            let random = eval::random_baseline(rare.len(), r, cfg.random_seed())?;
            recall.push(RareRecall {
                r,
                d_x: rare_fraction(rare, &subsets.d_x),
                d_z: rare_fraction(rare, &subsets.d_z),
                d_yx: rare_fraction(rare, &subsets.d_yx),
                random: rare_fraction(rare, &random),
                overall: rare_fraction(rare, &(0..rare.len()).collect::<Vec<_>>()),
            });
        }
        reports.push(report);
    }
    Ok(EvalSummary { reports, random_mean_delta_err: random_mean, rare_recall: inputs.rare.map(|_| recall) })
}

fn load_labels(cfg: &PipelineConfig, l: &Layout<'_>) -> Result<Labels> {
    let path = l.need(files::LABELS, Stage::Ingest)?;
    let s: Stamped<Labels> = read_json(&path)?;
    check_hash(&cfg.config_hash(), &s.config_hash, &path)?;
    Ok(s.body)
}

fn load_external(cfg: &PipelineConfig) -> Result<Option<Vec<f64>>> {
    match &cfg.eval.external_errors {
        None => Ok(None),
        Some(p) => {
            let bytes = read_bytes(p)?;
            Ok(Some(eval::read_errors_csv(bytes.as_slice())?))
        }
    }
}

fn stage_eval(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let hash = cfg.config_hash();
    let table = load_scores(cfg, &l)?;
    let mined = l.need(files::MINED_SUMMARY, Stage::Mine)?;
    let summary: Stamped<MinedSummaries> = read_json(&mined)?;
    check_hash(&hash, &summary.config_hash, &mined)?;
    let examples = load_examples(cfg, &l)?;
    let labels = load_labels(cfg, &l)?;
    if examples.len() != table.len() {
        return Err(Error::Data(format!("{} examples but {} scores", examples.len(), table.len())));
    }
    let errors = eval::prediction_errors(&examples, &cfg.eval.kalman, cfg.eval.error_mode)?;
    let external = load_external(cfg)?;
    let s = evaluate(
        cfg,
        cfg.mining.lambda,
        &EvalInputs { table: &table, errors: &errors, external: external.as_deref(), rare: labels.rare.as_deref() },
    )?;

    let ep = l.path(files::ERRORS);
    let mut body = Vec::new();
    eval::write_errors_csv(&mut body, &errors)?;
    write_atomic(&ep, &with_hash_line(&hash, body))?;
    let hp = l.path(files::HISTOGRAM);
    let mut body = Vec::new();
    eval::write_histogram_csv(&mut body, &table, cfg.eval.histogram_bins)?;
    write_atomic(&hp, &with_hash_line(&hash, body))?;
    let rp = l.path(files::EVAL_REPORT);
    write_json(&rp, &hash, s)?;
    Ok(vec![ep, hp, rp])
}

/// Directory name of one ablation scheme, e.g. `fixseglen_0.6`.
pub fn scheme_dir(s: PartitionScheme) -> String {
    s.to_string().replace(':', "_")
}

fn stage_ablate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let l = Layout::new(&cfg.out_dir);
    let (tracks, examples) = load_scene(cfg, &l)?;
    let labels = load_labels(cfg, &l)?;
    let errors = eval::prediction_errors(&examples, &cfg.eval.kalman, cfg.eval.error_mode)?;
    let external = load_external(cfg)?;
    let mut written = Vec::new();
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["scheme", "lambda", "r", "err_full", "err_dx", "err_dz", "err_dyx", "delta_dx", "delta_dz", "delta_dyx", "cov_dx", "cov_dz", "cov_dyx"])?;
    for &scheme in &cfg.ablation.schemes {
        let cell_cfg = PipelineConfig { features: FeatureConfig { scheme }, ..cfg.clone() };
        let hash = cell_cfg.config_hash();
        let [fx, fz] = feature_matrices(&tracks, &examples, scheme, &hash)?;
        let (mx, _) = fit_flow(&fx.rows, &cfg.flow, &cfg.train_config(Scope::X))?;
        let (mz, _) = fit_flow(&fz.rows, &cfg.flow, &cfg.train_config(Scope::Z))?;
        let table = mining::score_examples(&mx, &mz, &fx.rows, &fz.rows, cfg.mining.lambda)?;
        let dir = format!("{}/{}", files::ABLATE_DIR, scheme_dir(scheme));
        for &lambda in &cfg.ablation.lambdas {
            let s = evaluate(
                &cell_cfg,
                lambda,
                &EvalInputs { table: &table, errors: &errors, external: external.as_deref(), rare: labels.rare.as_deref() },
            )?;
            for rep in &s.reports {
                let get = |n: &str| rep.subset(n).expect("named subset");
                let (x, z, yx) = (get("D_X"), get("D_Z"), get("D_YX"));
                summary.write_record(&[
                    scheme.to_string(),
                    lambda.to_string(),
                    rep.r.to_string(),
                    rep.err_full.to_string(),
                    x.err.to_string(),
                    z.err.to_string(),
                    yx.err.to_string(),
                    x.delta_err.to_string(),
                    z.delta_err.to_string(),
                    yx.delta_err.to_string(),
                    x.cov_ref.to_string(),
                    z.cov_ref.to_string(),
                    yx.cov_ref.to_string(),
                ])?;
            }
            let p = l.path(&format!("{dir}/lambda_{lambda:.1}.json"));
            write_json(&p, &hash, s)?;
            written.push(p);
        }
    }
    let body = summary.into_inner().map_err(|e| Error::Data(format!("ablation summary: {e}")))?;
    let sp = l.path(files::ABLATE_SUMMARY);
    write_atomic(&sp, &with_hash_line(&cfg.config_hash(), body))?;
    written.push(sp);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[features]\nscheme = \"fixseglen:1.4\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.features.scheme, PartitionScheme::FixSegLen(1.4));
        assert_eq!(cfg.mining.lambda, 0.5);
        assert_eq!(cfg.training.batch_size, 128);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = PipelineConfig::from_toml("seed = 1\n\n[mining]\nlambda = \"x\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("line 4")), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn hash_ignores_downstream_settings() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.mining.lambda = 0.1;
        b.mining.r = vec![0.3];
        b.eval.kalman.measurement_noise_std = 2.0;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.features.scheme = PartitionScheme::FixSegNum(3);
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            r: Some(vec![0.2]),
            lambda: Some(0.0),
            scheme: Some(PartitionScheme::FixSegNum(1)),
            out_dir: Some("x".into()),
        });
        assert_eq!((cfg.seed, cfg.mining.r.clone(), cfg.mining.lambda), (9, vec![0.2], 0.0));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn invalid_ratios_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.mining.r = vec![0.0];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("report".parse::<Stage>().is_err());
        assert_eq!(scheme_dir(PartitionScheme::FixSegLen(0.6)), "fixseglen_0.6");
        assert_eq!(mined_file(0.05), "mined_r0.05.csv");
    }

    #[test]
    fn mine_before_score_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { out_dir: dir.path().to_path_buf(), ..PipelineConfig::default() };
        let err = run_stage(Stage::Mine, &cfg).unwrap_err();
        assert!(matches!(&err, Error::Prerequisite { stage, .. } if stage == "score"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}
