//! Contrastive embedding training and the state-regression probe.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::loss::{npairs_loss, DEFAULT_L2_REG};
use crate::model::{Activation, MfTcnConfig, MfTcnModel, Mlp, ModelError};
use crate::numeric::{Adam, AdamConfig, Checkpoint, Graph, NumericError, ParamStore, Tensor};
use crate::sampler::{clip_frames, sample_batch, SamplerConfig, SamplerError};
use crate::seeding::{digest_hex, substream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("non-finite loss at step {step}; last good checkpoint kept at step {kept}")]
    NonFiniteLoss { step: u64, kept: u64 },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub model: MfTcnConfig,
    pub sampler: SamplerConfig,
    pub steps: u64,
    pub lr: f64,
    pub l2_reg: f64,
    pub seed: u64,
    /// Steps per metrics record.
    pub log_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            model: MfTcnConfig::default(),
            sampler: SamplerConfig::default(),
            steps: 10_000,
            lr: 1e-4,
            l2_reg: DEFAULT_L2_REG,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl EmbedTrainConfig {
    /// Digest of the canonical JSON form; stored in checkpoints.
    pub fn digest(&self) -> String {
        digest_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    /// The digest ignores `steps`, so a run may be extended by resuming.
    fn resume_digest(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.digest()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Last step (1-based count of updates) in the bucket.
    pub step: u64,
    /// Mean loss over the bucket.
    pub loss: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

/// Embedding trainer state. Batch `k` is drawn from substream `batch/k` of the
/// seed, so resuming from a checkpoint replays exactly the same batches.
pub struct EmbedTrainer<'a> {
    dataset: &'a MultiViewDataset,
    pub config: EmbedTrainConfig,
    pub model: MfTcnModel<f32>,
    adam: Adam<f32>,
    step: u64,
}

impl<'a> EmbedTrainer<'a> {
    pub fn new(dataset: &'a MultiViewDataset, config: EmbedTrainConfig) -> Result<Self> {
        check_setup(dataset, &config)?;
        let model = MfTcnModel::new(
            config.model.clone(),
            crate::seeding::substream_seed(config.seed, "init"),
        )?;
        let adam = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
        Ok(Self {
            dataset,
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(dataset: &'a MultiViewDataset, config: EmbedTrainConfig, ck: &Checkpoint) -> Result<Self> {
        let expected = config.resume_digest();
        if ck.config_digest != expected {
            return Err(TrainError::ConfigMismatch {
                expected,
                found: ck.config_digest.clone(),
            });
        }
        let mut t = Self::new(dataset, config)?;
        ck.load_store("model.", &mut t.model.params)?;
        t.adam = restore_adam(ck, "adam.", &t.model.params, AdamConfig::with_lr(t.config.lr))?;
        t.step = ck.global_step;
        Ok(t)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.step, &self.config.resume_digest());
        push_adam(&mut ck, "adam.", &self.adam, &self.model.params);
        ck
    }

    /// Loss of the batch for step `k` under the current parameters, without updating.
    pub fn batch_loss(&self, k: u64) -> Result<f32> {
        let mut g = Graph::inference();
        let loss = self.forward(&mut g, k)?;
        Ok(g.value(loss).item())
    }

    fn forward(&self, g: &mut Graph<f32>, k: u64) -> Result<crate::numeric::Var> {
        let mut rng = substream(self.config.seed, &format!("batch/{k}"));
        let batch = sample_batch(self.dataset, &mut rng, &self.config.sampler)?;
        let a = g.constant(clip_frames(self.dataset, &batch.anchors)?);
        let b = g.constant(clip_frames(self.dataset, &batch.positives)?);
        let ea = self.model.forward_clips(g, a)?;
        let eb = self.model.forward_clips(g, b)?;
        Ok(npairs_loss(g, ea, eb, &batch.groups, self.config.l2_reg)?)
    }

    /// One sample-embed-loss-update iteration. Returns the pre-update loss.
    /// A non-finite loss leaves parameters and optimizer state untouched.
    pub fn step(&mut self) -> Result<f32> {
        let mut g = Graph::new();
        let loss = self.forward(&mut g, self.step)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                kept: self.step,
            });
        }
        let grads = g.backward(loss)?.params(&g, &self.model.params);
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(value)
    }
}

fn check_setup(ds: &MultiViewDataset, cfg: &EmbedTrainConfig) -> Result<()> {
    if ds.views().len() < 2 {
        return Err(TrainError::Setup("embedding training needs at least two views".into()));
    }
    let cam = &ds.views()[0];
    if cam.width != cfg.model.width || cam.height != cfg.model.height {
        return Err(TrainError::Setup(format!(
            "dataset frames are {}x{}, model expects {}x{}",
            cam.width, cam.height, cfg.model.width, cfg.model.height
        )));
    }
    if cfg.sampler.n_frames != cfg.model.n_frames || cfg.sampler.stride != cfg.model.stride {
        return Err(TrainError::Setup(
            "sampler and model disagree on n_frames/stride".into(),
        ));
    }
    if cfg.log_every == 0 {
        return Err(TrainError::Setup("log_every must be positive".into()));
    }
    Ok(())
}

pub(crate) fn push_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam<f32>, store: &ParamStore<f32>) {
    let (m, v) = adam.moments();
    for ((_, p), (m, v)) in store.iter().zip(m.iter().zip(v)) {
        ck.push(format!("{prefix}m.{}", p.name), m.clone());
        ck.push(format!("{prefix}v.{}", p.name), v.clone());
    }
    // u64 step split into two exactly representable halves.
    let t = adam.steps();
    ck.push(
        format!("{prefix}t"),
        Tensor::new(vec![2], vec![(t >> 20) as f32, (t & 0xFFFFF) as f32]).unwrap(),
    );
}

pub(crate) fn restore_adam(
    ck: &Checkpoint,
    prefix: &str,
    store: &ParamStore<f32>,
    cfg: AdamConfig,
) -> Result<Adam<f32>> {
    let get = |name: String| -> Result<Tensor<f32>> {
        ck.get(&name)
            .cloned()
            .ok_or(TrainError::Numeric(NumericError::MissingParameter(name)))
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in store.iter() {
        m.push(get(format!("{prefix}m.{}", p.name))?);
        v.push(get(format!("{prefix}v.{}", p.name))?);
    }
    let t = get(format!("{prefix}t"))?;
    let t = ((t.data()[0] as u64) << 20) | t.data()[1] as u64;
    Ok(Adam::restore(cfg, t, m, v))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug)]
pub struct EmbedTrainSummary {
    pub model: MfTcnModel<f32>,
    /// Pre-update loss of every step run in this call.
    pub losses: Vec<f32>,
    pub records: Vec<MetricRecord>,
    pub final_step: u64,
}

/// Runs the training loop up to `config.steps` total updates, writing
/// `checkpoint.bin` and appending to `metrics.jsonl` under `out_dir`. With
/// `resume`, continues from an existing checkpoint there.
pub fn train_embedding(
    dataset: &MultiViewDataset,
    config: &EmbedTrainConfig,
    out_dir: &Path,
    resume: bool,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<EmbedTrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        EmbedTrainer::from_checkpoint(dataset, config.clone(), &ck)?
    } else {
        EmbedTrainer::new(dataset, config.clone())?
    };
    let log_path = out_dir.join(METRICS_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let start = Instant::now();
    let mut kept = trainer.step_index();
    if !resume || !ck_path.exists() {
        trainer.checkpoint().save(&ck_path)?;
    }
    let mut losses = Vec::new();
    let mut records = Vec::new();
    let mut bucket = Vec::new();
    while trainer.step_index() < config.steps {
        let loss = match trainer.step() {
            Ok(l) => l,
            Err(TrainError::NonFiniteLoss { step, .. }) => return Err(TrainError::NonFiniteLoss { step, kept }),
            Err(e) => return Err(e),
        };
        losses.push(loss);
        bucket.push(loss as f64);
        let step = trainer.step_index();
        if step % config.log_every == 0 || step == config.steps {
            let rec = MetricRecord {
                step,
                loss: bucket.iter().sum::<f64>() / bucket.len() as f64,
                wall_time: start.elapsed().as_secs_f64(),
            };
            bucket.clear();
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
            on_record(&rec);
            records.push(rec);
        }
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) || step == config.steps {
            trainer.checkpoint().save(&ck_path)?;
            kept = step;
        }
    }
    Ok(EmbedTrainSummary {
        final_step: trainer.step_index(),
        model: trainer.model,
        losses,
        records,
    })
}

/// Reads every record of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Misaligned(format!("{}: {e}", path.display()))))
        .collect()
}

// ---- probe -------------------------------------------------------------------------------

pub const PROBE_TARGETS: [&str; 5] = ["x", "sin_theta", "cos_theta", "x_dot", "theta_dot"];

/// Row-major feature/target matrix for the probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub width: usize,
    pub inputs: Vec<f32>,
    /// `[rows, 5]`, in the order of [`PROBE_TARGETS`].
    pub targets: Vec<f32>,
}

impl ProbeSet {
    pub fn new(width: usize, inputs: Vec<f32>, targets: Vec<f32>) -> Result<Self> {
        if width == 0
            || !inputs.len().is_multiple_of(width)
            || !targets.len().is_multiple_of(5)
            || inputs.len() / width != targets.len() / 5
        {
            return Err(TrainError::Misaligned(format!(
                "{} inputs of width {width} against {} targets",
                inputs.len(),
                targets.len() / 5
            )));
        }
        Ok(Self { width, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len() / 5
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Probe inputs from one view of every trajectory: the embedding at `t`
    /// concatenated with its difference to `t - 1`, against the state at `t`.
    /// The first valid timestep of each trajectory has no predecessor and is dropped.
    pub fn from_model(model: &MfTcnModel<f32>, dataset: &MultiViewDataset, view: usize) -> Result<Self> {
        let d = model.config.embedding_dim;
        let window = model.config.window();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for traj in &dataset.trajectories {
            let frames = traj
                .views
                .get(view)
                .ok_or_else(|| TrainError::Setup(format!("dataset has no view index {view}")))?;
            if frames.len() != traj.states.len() {
                return Err(TrainError::Misaligned(format!(
                    "trajectory {}: {} frames, {} labels",
                    traj.id,
                    frames.len(),
                    traj.states.len()
                )));
            }
            let emb = model.embed_sequence(frames)?;
            let e = emb.data();
            for row in 1..emb.shape()[0] {
                let t = window - 1 + row;
                let cur = &e[row * d..(row + 1) * d];
                let prev = &e[(row - 1) * d..row * d];
                inputs.extend_from_slice(cur);
                inputs.extend(cur.iter().zip(prev).map(|(a, b)| a - b));
                targets.extend(traj.states[t].probe_targets().iter().map(|&v| v as f32));
            }
        }
        Self::new(2 * d, inputs, targets)
    }

    /// The ground-truth targets used as inputs; a representational sanity check.
    pub fn label_leak(&self) -> Self {
        Self {
            width: 5,
            inputs: self.targets.clone(),
            targets: self.targets.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            lr: 1e-3,
            epochs: 30,
            batch_size: 256,
            patience: 5,
            seed: 0,
        }
    }
}

/// Per-target mean squared error in raw target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub mse: [f64; 5],
}

impl ProbeMetrics {
    /// Mean over x, sin theta, cos theta.
    pub fn position(&self) -> f64 {
        (self.mse[0] + self.mse[1] + self.mse[2]) / 3.0
    }

    /// Mean over x_dot, theta_dot.
    pub fn motion(&self) -> f64 {
        (self.mse[3] + self.mse[4]) / 2.0
    }

    pub fn average(&self) -> f64 {
        self.mse.iter().sum::<f64>() / 5.0
    }
}

/// A trained probe including its input and target standardisation.
#[derive(Clone, Debug)]
pub struct Probe {
    mlp: Mlp,
    params: ParamStore<f32>,
    inputs: Standardizer,
    targets: Standardizer,
}

impl Probe {
    /// Raw-unit predictions `[rows, 5]` for row-major `inputs`.
    pub fn predict(&self, inputs: &[f32]) -> Result<Vec<f64>> {
        let w = self.inputs.mean.len();
        if !inputs.len().is_multiple_of(w) {
            return Err(TrainError::Misaligned(format!("{} inputs for width {w}", inputs.len())));
        }
        let x = self.inputs.apply(inputs);
        let mut out = Vec::with_capacity(inputs.len() / w * 5);
        for chunk in x.chunks(4096 * w) {
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::new(vec![chunk.len() / w, w], chunk.to_vec())?);
            let y = self.mlp.forward(&mut g, &self.params, xv)?;
            for row in g.value(y).data().chunks(5) {
                for (j, &r) in row.iter().enumerate() {
                    out.push(r as f64 * self.targets.std[j] + self.targets.mean[j]);
                }
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, set: &ProbeSet) -> Result<ProbeMetrics> {
        let pred = self.predict(&set.inputs)?;
        let mut sums = [0.0f64; 5];
        for (i, p) in pred.iter().enumerate() {
            let e = p - set.targets[i] as f64;
            sums[i % 5] += e * e;
        }
        Ok(ProbeMetrics {
            mse: sums.map(|s| s / set.len().max(1) as f64),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub probe: Probe,
    pub metrics: ProbeMetrics,
    pub best_epoch: usize,
    /// Validation metrics after every epoch run.
    pub curve: Vec<ProbeMetrics>,
}

#[derive(Clone, Debug)]
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(data: &[f32], width: usize) -> Self {
        let n = (data.len() / width).max(1) as f64;
        let mut mean = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for row in data.chunks(width) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut std = vec![0.0; width];
        for j in 0..width {
            mean[j] /= n;
            std[j] = (sq[j] / n - mean[j] * mean[j]).max(0.0).sqrt().max(1e-6);
        }
        Self { mean, std }
    }

    fn apply(&self, data: &[f32]) -> Vec<f32> {
        let w = self.mean.len();
        data.iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % w]) / self.std[i % w]) as f32)
            .collect()
    }
}

/// Trains the probe MLP `[width, hidden.., 5]` with Adam on standardised
/// inputs and targets; keeps the parameters of the best validation epoch.
pub fn train_probe(train: &ProbeSet, val: &ProbeSet, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Setup(
            "probe needs non-empty train and validation sets".into(),
        ));
    }
    if train.width != val.width {
        return Err(TrainError::Misaligned(format!(
            "train width {} vs validation width {}",
            train.width, val.width
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Setup("probe batch size and epochs must be positive".into()));
    }
    let xs = Standardizer::fit(&train.inputs, train.width);
    let ys = Standardizer::fit(&train.targets, 5);
    let tx = xs.apply(&train.inputs);
    let ty = ys.apply(&train.targets);

    let mut rng = substream(cfg.seed, "probe");
    let mut store = ParamStore::new();
    let mut sizes = vec![train.width];
    sizes.extend(&cfg.hidden);
    sizes.push(5);
    let mlp = Mlp::new(&mut store, "probe", &sizes, Activation::Relu, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &store);

    let evaluate = |store: &ParamStore<f32>| -> Result<ProbeMetrics> {
        Probe {
            mlp: mlp.clone(),
            params: store.clone(),
            inputs: xs.clone(),
            targets: ys.clone(),
        }
        .evaluate(val)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (evaluate(&store)?, 0, store.clone());
    let mut curve = Vec::new();
    let w = train.width;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut bx = Vec::with_capacity(chunk.len() * w);
            let mut by = Vec::with_capacity(chunk.len() * 5);
            for &i in chunk {
                bx.extend_from_slice(&tx[i * w..(i + 1) * w]);
                by.extend_from_slice(&ty[i * 5..(i + 1) * 5]);
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![chunk.len(), w], bx)?);
            let y = g.constant(Tensor::new(vec![chunk.len(), 5], by)?);
            let pred = mlp.forward(&mut g, &store, x)?;
            let loss = g.mse_loss(pred, y)?;
            let grads = g.backward(loss)?.params(&g, &store);
            adam.step(&mut store, &grads)?;
        }
        let m = evaluate(&store)?;
        curve.push(m);
        if m.average() < best.0.average() {
            best = (m, epoch, store.clone());
        } else if epoch - best.1 > cfg.patience {
            break;
        }
    }
    Ok(ProbeOutcome {
        probe: Probe {
            mlp,
            params: best.2,
            inputs: xs,
            targets: ys,
        },
        metrics: best.0,
        best_epoch: best.1,
        curve,
    })
}
