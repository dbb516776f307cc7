//! The `mftcn` command line: one subcommand per pipeline stage, driven by a
//! single TOML run config. Every invocation writes into a fresh run directory
//! `<runs_dir>/<command>-<config digest>-<UTC timestamp>` that starts with the
//! fully resolved `config.toml`.

use std::error::Error as StdError;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::envsim::{EnvConfig, Task};
use crate::eval::{self, ResultRow};
use crate::model::{MfTcnConfig, MfTcnModel};
use crate::numeric::Checkpoint;
use crate::rl::{self, ObsMode, ObservationSource, PolicyConfig, PolicyEnv, PolicyTrainConfig, PpoConfig};
use crate::sampler::SamplerConfig;
use crate::seeding::{digest_hex, substream_seed};
use crate::train::{self, EmbedTrainConfig, ProbeConfig, ProbeSet, CHECKPOINT_FILE};

pub const CONFIG_FILE: &str = "config.toml";
pub const RESULT_FILE: &str = "result.jsonl";
pub const POLICY_FILE: &str = "policy.bin";
pub const POLICY_META_FILE: &str = "policy.json";
pub const CURVE_FILE: &str = "curve.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const FLOOR_FILE: &str = "floor.json";

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Missing or malformed inputs: exit code 2.
    #[error("{context}")]
    BadInput {
        context: String,
        #[source]
        source: Option<BoxError>,
    },
    /// A pipeline invariant failed while running: exit code 1.
    #[error("{context}")]
    Failed {
        context: String,
        #[source]
        source: Option<BoxError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::BadInput { .. } => 2,
            CliError::Failed { .. } => 1,
        }
    }

    fn bad(context: impl Into<String>) -> Self {
        CliError::BadInput {
            context: context.into(),
            source: None,
        }
    }
}

trait Classify<T> {
    fn bad(self, context: impl FnOnce() -> String) -> Result<T, CliError>;
    fn failed(self, context: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: StdError + Send + Sync + 'static> Classify<T> for Result<T, E> {
    fn bad(self, context: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::BadInput {
            context: context(),
            source: Some(Box::new(e)),
        })
    }

    fn failed(self, context: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Failed {
            context: context(),
            source: Some(Box::new(e)),
        })
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

// ---- run config ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it by name.
    pub seed: u64,
    pub runs_dir: PathBuf,
    pub data: DataSection,
    pub env: EnvConfig,
    pub model: MfTcnConfig,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub policy: PolicySection,
    pub demos: DemoSection,
    pub report: ReportSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub trajectories: usize,
    pub length: usize,
    pub train_fraction: f64,
    /// Input dataset directory for the training and evaluation commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub lr: f64,
    pub l2_reg: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Input embedding checkpoint (file or train-embed run directory).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Index into the dataset views used by the probe and kNN.
    pub view: usize,
    /// View indices compared by the alignment metric.
    pub align_views: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub task: Task,
    pub mode: ObsMode,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub total_steps: u64,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    pub ppo: PpoConfig,
    pub net: PolicyConfig,
    /// Input policy checkpoint (file or train-policy run directory).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSection {
    pub episodes: usize,
    pub horizon: usize,
    pub keep_percentile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Evaluation run directories merged by `report`.
    pub runs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        let embed = EmbedTrainConfig::default();
        Self {
            seed: 0,
            runs_dir: PathBuf::from("runs"),
            data: DataSection {
                trajectories: 224,
                length: 500,
                train_fraction: 0.893,
                dataset: None,
            },
            env: EnvConfig::default(),
            model: MfTcnConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainSection {
                steps: embed.steps,
                lr: embed.lr,
                l2_reg: embed.l2_reg,
                log_every: embed.log_every,
                checkpoint_every: embed.checkpoint_every,
                checkpoint: None,
            },
            probe: ProbeSection {
                hidden: probe.hidden,
                lr: probe.lr,
                epochs: probe.epochs,
                batch_size: probe.batch_size,
                patience: probe.patience,
            },
            eval: EvalSection {
                view: 0,
                align_views: [0, 1],
            },
            policy: PolicySection {
                task: Task::Balance,
                mode: ObsMode::TrueState,
                width: 64,
                height: 32,
                horizon: rl::EVAL_HORIZON,
                total_steps: 1_000_000,
                eval_episodes: rl::EVAL_EPISODES,
                eval_horizon: rl::EVAL_HORIZON,
                ppo: PpoConfig::default(),
                net: PolicyConfig::default(),
                checkpoint: None,
            },
            demos: DemoSection {
                episodes: 20,
                horizon: 500,
                keep_percentile: 50.0,
            },
            report: ReportSection { runs: Vec::new() },
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).bad(|| "serialising defaults".into())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).bad(|| format!("cannot read config {}", path.display()))?;
            let user: toml::Table = toml::from_str(&text).bad(|| format!("{} is not valid TOML", path.display()))?;
            merge(&mut table, user);
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::bad(format!("override {o:?} is not KEY=VALUE")))?;
            set_key(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        toml::Value::Table(table).try_into().bad(|| "invalid run config".into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// sha256 of the resolved config text.
    pub fn digest(&self) -> String {
        digest_hex(self.to_toml().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &[])
    }

    fn embed_train_config(&self) -> EmbedTrainConfig {
        EmbedTrainConfig {
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            steps: self.train.steps,
            lr: self.train.lr,
            l2_reg: self.train.l2_reg,
            seed: substream_seed(self.seed, "train-embed"),
            log_every: self.train.log_every,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe.hidden.clone(),
            lr: self.probe.lr,
            epochs: self.probe.epochs,
            batch_size: self.probe.batch_size,
            patience: self.probe.patience,
            seed: substream_seed(self.seed, "probe"),
        }
    }

    fn policy_env(&self) -> PolicyEnv {
        PolicyEnv {
            physics: self.env.physics.clone(),
            horizon: self.policy.horizon,
            ..PolicyEnv::new(self.policy.task, self.policy.width, self.policy.height)
        }
    }
}

/// Tables merge key by key; tagged tables (with `kind`), arrays and scalars replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::bad("empty override key"))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::bad(format!("override {key}: {p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// ---- command line -------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "mftcn",
    version,
    about = "Multi-frame time-contrastive embeddings: data, training, evaluation, PPO"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config (TOML); absent keys take defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.n_frames=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the generated run directory.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Use this exact run directory instead of a generated one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory (`data.dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Embedding checkpoint or train-embed run directory (`train.checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Policy checkpoint or train-policy run directory (`policy.checkpoint`).
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a random-action multi-view dataset.
    GenerateData(Common),
    /// Train an mfTCN embedding on the training split.
    TrainEmbed {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in `--out`.
        #[arg(long, requires = "out")]
        resume: bool,
    },
    /// Fit the state-regression probe on frozen embeddings.
    EvalProbe(Common),
    /// Nearest-neighbour attribute classification on the validation split.
    EvalKnn(Common),
    /// Cross-view temporal alignment error on the validation split.
    EvalAlign(Common),
    /// Train a PPO policy from true state, pixels, embeddings or noise.
    TrainPolicy(Common),
    /// Evaluate a trained policy with the deterministic mean action.
    EvalPolicy {
        #[command(flatten)]
        common: Common,
        /// Also evaluate a uniform random policy (alone if no policy is given).
        #[arg(long)]
        random_floor: bool,
    },
    /// Roll out a true-state policy and keep the best episodes as a dataset.
    RecordDemos(Common),
    /// Merge evaluation runs into one results table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluation run directories.
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData(_) => "generate-data",
            Command::TrainEmbed { .. } => "train-embed",
            Command::EvalProbe(_) => "eval-probe",
            Command::EvalKnn(_) => "eval-knn",
            Command::EvalAlign(_) => "eval-align",
            Command::TrainPolicy(_) => "train-policy",
            Command::EvalPolicy { .. } => "eval-policy",
            Command::RecordDemos(_) => "record-demos",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c)
            | Command::EvalProbe(c)
            | Command::EvalKnn(c)
            | Command::EvalAlign(c)
            | Command::TrainPolicy(c)
            | Command::RecordDemos(c) => c,
            Command::TrainEmbed { common, .. }
            | Command::EvalPolicy { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Run directory with its resolved config.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Run {
    fn create(command: &str, config: RunConfig, out: Option<&Path>) -> Result<Self> {
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
                let base = config
                    .runs_dir
                    .join(format!("{command}-{}-{stamp}", &config.digest()[..12]));
                let mut dir = base.clone();
                let mut k = 1;
                while dir.exists() {
                    k += 1;
                    dir = PathBuf::from(format!("{}-{k}", base.display()));
                }
                dir
            }
        };
        fs::create_dir_all(&dir).failed(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join(CONFIG_FILE), &config.to_toml())?;
        Ok(Self { dir, config })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).failed(|| format!("cannot write {}", path.display()))
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record serialises")
}

/// Parses `args` and runs the subcommand, returning its run directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let common = cli.command.common().clone();
    let mut overrides = common.overrides.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push(format!("{key}={}", toml::Value::String(v)));
        }
    };
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    flag("runs_dir", path_str(&common.runs_dir));
    flag("data.dataset", path_str(&common.dataset));
    flag("train.checkpoint", path_str(&common.checkpoint));
    flag("policy.checkpoint", path_str(&common.policy));
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::Report { runs, .. } = &cli.command {
        if !runs.is_empty() {
            let list: Vec<toml::Value> = runs
                .iter()
                .map(|r| toml::Value::String(r.display().to_string()))
                .collect();
            overrides.push(format!("report.runs={}", toml::Value::Array(list)));
        }
    }
    if let Some(c) = &common.config {
        if !c.is_file() {
            return Err(CliError::bad(format!("config file {} does not exist", c.display())));
        }
    }
    let config = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    check_inputs(&cli.command, &config)?;
    let run = Run::create(cli.command.name(), config, common.out.as_deref())?;
    println!("run: {}", run.dir.display());
    match &cli.command {
        Command::GenerateData(_) => generate_data(&run)?,
        Command::TrainEmbed { resume, .. } => train_embed(&run, *resume)?,
        Command::EvalProbe(_) => eval_probe(&run)?,
        Command::EvalKnn(_) => eval_knn(&run)?,
        Command::EvalAlign(_) => eval_align(&run)?,
        Command::TrainPolicy(_) => train_policy(&run)?,
        Command::EvalPolicy { random_floor, .. } => eval_policy(&run, *random_floor)?,
        Command::RecordDemos(_) => record_demos(&run)?,
        Command::Report { .. } => report(&run)?,
    }
    Ok(run.dir)
}

/// Rejects missing inputs before a run directory is created.
fn check_inputs(command: &Command, cfg: &RunConfig) -> Result<()> {
    let need = |what: &str, p: &Option<PathBuf>, flag: &str| -> Result<()> {
        match p {
            None => Err(CliError::bad(format!("{} needs {what} ({flag})", command.name()))),
            Some(p) if !p.exists() => Err(CliError::bad(format!("{} does not exist", p.display()))),
            Some(_) => Ok(()),
        }
    };
    match command {
        Command::TrainEmbed { .. } => need("a dataset", &cfg.data.dataset, "--dataset"),
        Command::EvalProbe(_) | Command::EvalKnn(_) | Command::EvalAlign(_) => {
            need("an embedding checkpoint", &cfg.train.checkpoint, "--checkpoint")?;
            need("a dataset", &cfg.data.dataset, "--dataset")
        }
        Command::TrainPolicy(_) if cfg.policy.mode == ObsMode::Embedding => {
            need("an embedding checkpoint", &cfg.train.checkpoint, "--checkpoint")
        }
        Command::EvalPolicy { random_floor: true, .. } if cfg.policy.checkpoint.is_none() => Ok(()),
        Command::EvalPolicy { .. } | Command::RecordDemos(_) => {
            need("a policy checkpoint", &cfg.policy.checkpoint, "--policy")
        }
        Command::Report { .. } if cfg.report.runs.is_empty() => {
            Err(CliError::bad("report needs at least one evaluation run directory"))
        }
        _ => Ok(()),
    }
}

// ---- subcommands --------------------------------------------------------------------------

fn load_dataset(cfg: &RunConfig) -> Result<MultiViewDataset> {
    let path = cfg
        .data
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::bad("no dataset given"))?;
    MultiViewDataset::read(path).bad(|| format!("cannot load dataset {}", path.display()))
}

fn split(cfg: &RunConfig, ds: MultiViewDataset) -> Result<(MultiViewDataset, MultiViewDataset)> {
    ds.split(cfg.data.train_fraction, cfg.seed)
        .bad(|| "cannot split dataset".into())
}

/// Resolves a file-or-directory argument to the file inside.
fn checkpoint_file(path: &Path, file: &str) -> Result<PathBuf> {
    let f = if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    };
    if !f.is_file() {
        return Err(CliError::bad(format!("checkpoint {} does not exist", f.display())));
    }
    Ok(f)
}

/// Loads an embedding model using the config stored next to its checkpoint.
pub fn load_model(path: &Path) -> Result<(MfTcnModel<f32>, PathBuf)> {
    let file = checkpoint_file(path, CHECKPOINT_FILE)?;
    let dir = file.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let ck = Checkpoint::load(&file).bad(|| format!("cannot read checkpoint {}", file.display()))?;
    let model = MfTcnModel::from_checkpoint(cfg.model, &ck)
        .bad(|| format!("checkpoint {} does not fit its config", file.display()))?;
    Ok((model, file))
}

fn input_model(cfg: &RunConfig) -> Result<MfTcnModel<f32>> {
    let path = cfg
        .train
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::bad("no embedding checkpoint given"))?;
    Ok(load_model(path)?.0)
}

fn view_index(ds: &MultiViewDataset, view: usize) -> Result<usize> {
    if view >= ds.views().len() {
        return Err(CliError::bad(format!(
            "view {view} out of range ({} views)",
            ds.views().len()
        )));
    }
    Ok(view)
}

fn write_row(run: &Run, row: ResultRow) -> Result<()> {
    write(&run.dir.join(RESULT_FILE), &eval::to_jsonl(&[row]))
}

fn row_for(model: &MfTcnModel<f32>) -> ResultRow {
    ResultRow {
        embedding_dim: model.config.embedding_dim,
        n_frames: model.config.n_frames,
        stride: model.config.stride,
        probe: None,
        knn: None,
        alignment: None,
    }
}

fn generate_data(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let ds = MultiViewDataset::generate_random(&cfg.env, cfg.seed, cfg.data.trajectories, cfg.data.length)
        .bad(|| "cannot generate dataset".into())?;
    let dir = run.dir.join("dataset");
    ds.write(&dir)
        .failed(|| format!("cannot write dataset {}", dir.display()))?;
    let manifest = fs::read(dir.join("manifest.json")).failed(|| "cannot read back manifest".into())?;
    let digest = digest_hex(&manifest);
    write(&run.dir.join("dataset_digest.txt"), &format!("{digest}\n"))?;
    println!("dataset: {}", dir.display());
    println!("frames: {}", ds.num_frames());
    println!("dataset_digest: {digest}");
    Ok(())
}

fn train_embed(run: &Run, resume: bool) -> Result<()> {
    let cfg = &run.config;
    let (train, _) = split(cfg, load_dataset(cfg)?)?;
    let view = &train.views()[0];
    if (view.width, view.height) != (cfg.model.width, cfg.model.height) {
        return Err(CliError::bad(format!(
            "model expects {}x{} frames but the dataset has {}x{}",
            cfg.model.width, cfg.model.height, view.width, view.height
        )));
    }
    let tcfg = cfg.embed_train_config();
    let summary = train::train_embedding(&train, &tcfg, &run.dir, resume, |r| {
        println!("step {} loss {:.5} time {:.1}s", r.step, r.loss, r.wall_time);
    })
    .map_err(|e| match e {
        train::TrainError::ConfigMismatch { .. } => CliError::BadInput {
            context: "cannot resume".into(),
            source: Some(Box::new(e)),
        },
        e => CliError::Failed {
            context: "embedding training failed".into(),
            source: Some(Box::new(e)),
        },
    })?;
    println!("checkpoint: {}", run.dir.join(CHECKPOINT_FILE).display());
    println!("final_step: {}", summary.final_step);
    Ok(())
}

fn eval_probe(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let model = input_model(cfg)?;
    let (train, val) = split(cfg, load_dataset(cfg)?)?;
    let view = view_index(&train, cfg.eval.view)?;
    let tr = ProbeSet::from_model(&model, &train, view).bad(|| "cannot embed training split".into())?;
    let va = ProbeSet::from_model(&model, &val, view).bad(|| "cannot embed validation split".into())?;
    let out = train::train_probe(&tr, &va, &cfg.probe_config()).failed(|| "probe training failed".into())?;
    let curve: String = out
        .curve
        .iter()
        .enumerate()
        .map(|(epoch, m)| json_line(&serde_json::json!({"epoch": epoch, "mse": m.mse, "average": m.average()})) + "\n")
        .collect();
    write(&run.dir.join("probe_curve.jsonl"), &curve)?;
    let row = ResultRow {
        probe: Some(out.metrics.into()),
        ..row_for(&model)
    };
    println!(
        "probe: average {:.5} position {:.5} motion {:.5} (best epoch {})",
        out.metrics.average(),
        out.metrics.position(),
        out.metrics.motion(),
        out.best_epoch
    );
    write_row(run, row)
}

fn eval_knn(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let model = input_model(cfg)?;
    let (_, val) = split(cfg, load_dataset(cfg)?)?;
    let view = view_index(&val, cfg.eval.view)?;
    let seqs = eval::embed_dataset(&model, &val, view).bad(|| "cannot embed validation split".into())?;
    let report = eval::knn_classify(&seqs).failed(|| "kNN evaluation failed".into())?;
    println!(
        "knn: static {:.2}% motion {:.2}%",
        report.static_error(),
        report.motion_error()
    );
    write_row(
        run,
        ResultRow {
            knn: Some(report.into()),
            ..row_for(&model)
        },
    )
}

fn eval_align(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let model = input_model(cfg)?;
    let (_, val) = split(cfg, load_dataset(cfg)?)?;
    let [a, b] = cfg.eval.align_views;
    let (a, b) = (view_index(&val, a)?, view_index(&val, b)?);
    let ea = eval::embed_dataset(&model, &val, a).bad(|| "cannot embed validation split".into())?;
    let eb = eval::embed_dataset(&model, &val, b).bad(|| "cannot embed validation split".into())?;
    let report = eval::alignment_report(&ea, &eb).failed(|| "alignment evaluation failed".into())?;
    println!(
        "alignment: {:.4} ({:.4} / {:.4})",
        report.mean(),
        report.a_to_b,
        report.b_to_a
    );
    write_row(
        run,
        ResultRow {
            alignment: Some(report),
            ..row_for(&model)
        },
    )
}

/// What eval-policy and record-demos need to rebuild a trained policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub mode: ObsMode,
    pub obs_dim: usize,
    pub env: PolicyEnv,
    pub net: PolicyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_checkpoint: Option<PathBuf>,
}

fn source_for(meta_mode: ObsMode, env: &PolicyEnv, seed: u64, embedding: Option<&Path>) -> Result<ObservationSource> {
    Ok(match meta_mode {
        ObsMode::TrueState => ObservationSource::true_state(),
        ObsMode::RandomState => ObservationSource::random_state(substream_seed(seed, "random-state")),
        ObsMode::Pixels => ObservationSource::pixels(env.camera.width, env.camera.height),
        ObsMode::Embedding => {
            let path = embedding.ok_or_else(|| CliError::bad("embedding mode needs an embedding checkpoint"))?;
            let (model, _) = load_model(path)?;
            if (model.config.width, model.config.height) != (env.camera.width, env.camera.height) {
                return Err(CliError::bad(format!(
                    "embedding model expects {}x{} frames, policy camera renders {}x{}",
                    model.config.width, model.config.height, env.camera.width, env.camera.height
                )));
            }
            ObservationSource::embedding(Arc::new(model))
        }
    })
}

fn train_policy(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let env = cfg.policy_env();
    let embedding = match cfg.policy.mode {
        ObsMode::Embedding => Some(
            checkpoint_file(
                cfg.train.checkpoint.as_deref().unwrap_or(Path::new("")),
                CHECKPOINT_FILE,
            )?
            .canonicalize()
            .bad(|| "cannot resolve checkpoint path".into())?,
        ),
        _ => None,
    };
    let source = source_for(cfg.policy.mode, &env, cfg.seed, embedding.as_deref())?;
    let obs_dim = source.dim();
    let tcfg = PolicyTrainConfig {
        ppo: cfg.policy.ppo.clone(),
        policy: cfg.policy.net.clone(),
        total_steps: cfg.policy.total_steps,
        seed: substream_seed(cfg.seed, "policy"),
    };
    let curve_path = run.dir.join(CURVE_FILE);
    let mut curve = fs::File::create(&curve_path).failed(|| format!("cannot create {}", curve_path.display()))?;
    let mut io_error = None;
    let summary = rl::train_policy(&env, cfg.policy.mode, source, &tcfg, |p, stats| {
        println!(
            "steps {} reward {:.2} value_loss {:.4} kl {:.5}",
            p.env_steps, p.mean_reward, stats.value_loss, stats.approx_kl
        );
        if let Err(e) = writeln!(curve, "{}", json_line(p)) {
            io_error.get_or_insert(e);
        }
    })
    .failed(|| "policy training failed".into())?;
    if let Some(e) = io_error {
        return Err(e).failed(|| format!("cannot write {}", curve_path.display()));
    }
    let ck = summary.policy.to_checkpoint(cfg.policy.total_steps, &cfg.digest());
    let path = run.dir.join(POLICY_FILE);
    ck.save(&path).failed(|| format!("cannot write {}", path.display()))?;
    let meta = PolicyMeta {
        mode: cfg.policy.mode,
        obs_dim,
        env,
        net: cfg.policy.net.clone(),
        embedding_checkpoint: embedding,
    };
    write(
        &run.dir.join(POLICY_META_FILE),
        &serde_json::to_string_pretty(&meta).expect("meta serialises"),
    )?;
    println!("policy: {}", path.display());
    Ok(())
}

fn load_policy(path: &Path) -> Result<(rl::ActorCritic, PolicyMeta)> {
    let file = checkpoint_file(path, POLICY_FILE)?;
    let meta_path = file.parent().unwrap_or(Path::new(".")).join(POLICY_META_FILE);
    let text = fs::read_to_string(&meta_path).bad(|| format!("cannot read {}", meta_path.display()))?;
    let meta: PolicyMeta = serde_json::from_str(&text).bad(|| format!("malformed {}", meta_path.display()))?;
    let ck = Checkpoint::load(&file).bad(|| format!("cannot read checkpoint {}", file.display()))?;
    let mut policy = rl::policy_for(meta.mode, meta.obs_dim, &meta.env, &meta.net, 0)
        .bad(|| "policy metadata is inconsistent".into())?;
    policy
        .load_checkpoint(&ck)
        .bad(|| format!("checkpoint {} does not fit its metadata", file.display()))?;
    Ok((policy, meta))
}

fn eval_policy(run: &Run, random_floor: bool) -> Result<()> {
    let cfg = &run.config;
    let seed = substream_seed(cfg.seed, "eval-policy");
    let (episodes, horizon) = (cfg.policy.eval_episodes, cfg.policy.eval_horizon);
    if let Some(path) = &cfg.policy.checkpoint {
        let (policy, meta) = load_policy(path)?;
        let mut source = source_for(meta.mode, &meta.env, cfg.seed, meta.embedding_checkpoint.as_deref())?;
        let report = rl::evaluate_policy(&policy, &meta.env, &mut source, episodes, horizon, seed)
            .failed(|| "policy evaluation failed".into())?;
        println!(
            "policy: mean {:.2} std {:.2} over {} episodes",
            report.mean, report.std, report.episodes
        );
        write(
            &run.dir.join(EVAL_FILE),
            &serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
    }
    if random_floor {
        let env = match &cfg.policy.checkpoint {
            Some(path) => load_policy(path)?.1.env,
            None => cfg.policy_env(),
        };
        let report =
            rl::evaluate_random_policy(&env, episodes, horizon, seed).failed(|| "random rollout failed".into())?;
        println!(
            "random: mean {:.2} std {:.2} over {} episodes",
            report.mean, report.std, report.episodes
        );
        write(
            &run.dir.join(FLOOR_FILE),
            &serde_json::to_string_pretty(&report).expect("report serialises"),
        )?;
    }
    Ok(())
}

fn record_demos(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let path = cfg
        .policy
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::bad("no policy given"))?;
    let (policy, meta) = load_policy(path)?;
    if meta.mode != ObsMode::TrueState {
        return Err(CliError::bad(format!(
            "demonstrations need a true_state policy, got {:?}",
            meta.mode
        )));
    }
    let env = PolicyEnv {
        horizon: cfg.demos.horizon,
        ..meta.env
    };
    let (ds, returns) = rl::record_expert_demos(
        &policy,
        &env,
        cfg.env.cameras.clone(),
        cfg.demos.episodes,
        cfg.demos.keep_percentile,
        substream_seed(cfg.seed, "demos"),
    )
    .failed(|| "recording demonstrations failed".into())?;
    let lines: String = returns
        .iter()
        .enumerate()
        .map(|(i, r)| json_line(&serde_json::json!({"episode": i, "return": r})) + "\n")
        .collect();
    write(&run.dir.join("returns.jsonl"), &lines)?;
    let dir = run.dir.join("dataset");
    ds.write(&dir)
        .failed(|| format!("cannot write dataset {}", dir.display()))?;
    println!("kept {} of {} episodes", ds.trajectories.len(), returns.len());
    println!("dataset: {}", dir.display());
    Ok(())
}

fn report(run: &Run) -> Result<()> {
    let mut rows = Vec::new();
    for r in &run.config.report.runs {
        let path = if r.is_dir() { r.join(RESULT_FILE) } else { r.clone() };
        rows.extend(eval::read_rows(&path).bad(|| format!("cannot read results {}", path.display()))?);
    }
    let merged = eval::table_report(rows, &run.dir).failed(|| "inconsistent result rows".into())?;
    print!("{}", eval::to_text(&merged));
    Ok(())
}
