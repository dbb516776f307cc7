//! PPO with pluggable observation sources, policy evaluation, and expert
//! demonstration recording.

mod observe;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use observe::{
    Embedding, FrameObserver, ObsMode, ObservationSource, Pixels, RandomState, StateObserver, TrueState,
};

use crate::dataset::{DatasetError, MultiViewDataset};
use crate::envsim::{
    control_step, render, CameraSpec, EnvConfig, EnvError, EnvState, InitDist, PhysicsConfig, Rollout, Task,
};
use crate::model::{Activation, BaseCnn, Mlp, ModelError};
use crate::numeric::{Adam, AdamConfig, Checkpoint, Graph, NumericError, ParamId, ParamStore, Tensor, Var};
use crate::seeding::{substream, substream_seed};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite probability ratio in epoch {epoch}, minibatch {minibatch}")]
    NonFiniteRatio { epoch: usize, minibatch: usize },
    #[error("buffer is not complete; compute advantages first")]
    Incomplete,
    #[error("no episode passed the reward filter")]
    NoDemonstrations,
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = RlError> = std::result::Result<T, E>;

// ---- advantages ---------------------------------------------------------------------------

/// Generalised advantage estimation. `values` holds one bootstrap entry past
/// the last step; `dones[t]` marks that the episode ended after step `t`.
/// Returns `(advantages, returns)` with `returns = advantages + values[..T]`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(RlError::Length(format!(
            "{n} rewards, {} values (need {}), {} done flags",
            values.len(),
            n + 1,
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lam * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shift and scale to zero mean and unit standard deviation.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    /// Normalised; filled by [`RolloutBuffer::finish`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    complete: bool,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn push(&mut self, obs: &[f32], action: f32, reward: f64, value: f64, log_prob: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.obs.extend_from_slice(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.values.push(value);
        self.log_probs.push(log_prob);
        self.dones.push(done);
        self.complete = false;
    }

    /// Computes advantages and returns once the rollout is over, bootstrapping
    /// from `last_value`, and normalises the advantages over the whole buffer.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lam: f64) -> Result<()> {
        let mut values = self.values.clone();
        values.push(last_value);
        let (mut adv, ret) = gae(&self.rewards, &values, &self.dones, gamma, lam)?;
        normalize(&mut adv);
        self.advantages = adv;
        self.returns = ret;
        self.complete = true;
        Ok(())
    }
}

// ---- policy -------------------------------------------------------------------------------

/// Running mean and variance of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn update(&mut self, x: &[f32]) {
        self.count += 1.0;
        for (i, &v) in x.iter().enumerate() {
            let d = v as f64 - self.mean[i];
            self.mean[i] += d / self.count;
            let d2 = v as f64 - self.mean[i];
            self.var[i] += (d * d2 - self.var[i]) / self.count;
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| (((v as f64 - self.mean[i]) / (self.var[i] + 1e-8).sqrt()).clamp(-10.0, 10.0)) as f32)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// CNN widths of the pixel encoder.
    pub encoder_channels: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: -0.5,
            encoder_channels: vec![16, 32, 32, 64],
        }
    }
}

#[derive(Clone, Debug)]
struct PixelEncoder {
    cnn: BaseCnn,
    frame: [usize; 3],
}

/// Diagonal Gaussian policy over the 1-D normalised force, with a separate
/// value network. In pixel mode a CNN encoder shared by both heads is trained
/// jointly with them.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub params: ParamStore<f32>,
    pub obs_dim: usize,
    pub obs_norm: Option<RunningNorm>,
    encoder: Option<PixelEncoder>,
    policy: Mlp,
    value: Mlp,
    log_std: ParamId,
}

/// Action, its log-probability, and the state value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActOutput {
    pub action: f64,
    pub log_prob: f64,
    pub value: f64,
}

impl ActorCritic {
    /// `pixel_frame = Some([3, H, W])` builds a pixel encoder; `normalize_obs`
    /// keeps running observation statistics.
    pub fn new(
        obs_dim: usize,
        pixel_frame: Option<[usize; 3]>,
        normalize_obs: bool,
        cfg: &PolicyConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let (encoder, feat) = match pixel_frame {
            Some(frame) => {
                if frame.iter().product::<usize>() != obs_dim {
                    return Err(RlError::Setup(format!(
                        "pixel frame {frame:?} does not match obs dim {obs_dim}"
                    )));
                }
                let cnn = BaseCnn::new(&mut params, "encoder", frame[0], &cfg.encoder_channels, rng)?;
                let (h, w) = cnn.out_hw(frame[1], frame[2]);
                let feat = cnn.out_channels() * h * w;
                (Some(PixelEncoder { cnn, frame }), feat)
            }
            None => (None, obs_dim),
        };
        let mut sizes = vec![feat];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let policy = Mlp::new(&mut params, "policy", &sizes, Activation::Tanh, rng)?;
        policy.scale_output(&mut params, 0.01);
        let value = Mlp::new(&mut params, "value", &sizes, Activation::Tanh, rng)?;
        let log_std = params.add("policy.log_std", Tensor::full(vec![1], cfg.init_log_std as f32))?;
        Ok(Self {
            params,
            obs_dim,
            obs_norm: normalize_obs.then(|| RunningNorm::new(obs_dim)),
            encoder,
            policy,
            value,
            log_std,
        })
    }

    /// Normalised observation (identity without running statistics).
    pub fn prepare(&self, obs: &[f32]) -> Vec<f32> {
        match &self.obs_norm {
            Some(n) => n.apply(obs),
            None => obs.to_vec(),
        }
    }

    /// `(mean [N,1], value [N,1], log_std [1])` for prepared observations `[N, obs_dim]`.
    pub fn forward(&self, g: &mut Graph<f32>, obs: Var) -> Result<(Var, Var, Var)> {
        let feats = match &self.encoder {
            Some(enc) => {
                let n = g.shape(obs)[0];
                let x = g.reshape(obs, &[n, enc.frame[0], enc.frame[1], enc.frame[2]])?;
                let f = enc.cnn.forward(g, &self.params, x)?;
                let width = g.shape(f)[1..].iter().product::<usize>();
                g.reshape(f, &[n, width])?
            }
            None => obs,
        };
        let mean = self.policy.forward(g, &self.params, feats)?;
        let value = self.value.forward(g, &self.params, feats)?;
        let log_std = g.param(&self.params, self.log_std);
        Ok((mean, value, log_std))
    }

    pub fn log_std(&self) -> f64 {
        self.params.get(self.log_std).value.data()[0] as f64
    }

    /// Samples an action when `rng` is given, otherwise returns the mean.
    pub fn act(&self, prepared: &[f32], rng: Option<&mut ChaCha8Rng>) -> Result<ActOutput> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![1, self.obs_dim], prepared.to_vec())?);
        let (mean, value, _) = self.forward(&mut g, x)?;
        let mu = g.value(mean).data()[0] as f64;
        let ls = self.log_std();
        let action = match rng {
            Some(r) => {
                let z: f64 = StandardNormal.sample(r);
                mu + ls.exp() * z
            }
            None => mu,
        };
        Ok(ActOutput {
            action,
            log_prob: gaussian_log_prob(action, mu, ls),
            value: g.value(value).data()[0] as f64,
        })
    }

    pub fn value_of(&self, prepared: &[f32]) -> Result<f64> {
        Ok(self.act(prepared, None)?.value)
    }

    pub fn to_checkpoint(&self, global_step: u64, digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(global_step, digest);
        ck.push_store("ac.", &self.params);
        if let Some(n) = &self.obs_norm {
            // f64 statistics as (hi, lo) f32 pairs.
            let f = |v: &[f64]| {
                let data = v
                    .iter()
                    .flat_map(|&x| [x as f32, (x - x as f32 as f64) as f32])
                    .collect();
                Tensor::new(vec![v.len(), 2], data).unwrap()
            };
            ck.push("obs_norm.mean", f(&n.mean));
            ck.push("obs_norm.var", f(&n.var));
            ck.push("obs_norm.count", f(&[n.count]));
        }
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("ac.", &mut self.params)?;
        if let Some(n) = &mut self.obs_norm {
            let get = |name: &str| {
                ck.get(name)
                    .map(|t| {
                        t.data()
                            .chunks(2)
                            .map(|p| p[0] as f64 + p[1] as f64)
                            .collect::<Vec<_>>()
                    })
                    .ok_or_else(|| RlError::Numeric(NumericError::MissingParameter(name.into())))
            };
            n.mean = get("obs_norm.mean")?;
            n.var = get("obs_norm.var")?;
            n.count = get("obs_norm.count")?[0];
        }
        Ok(())
    }
}

/// Log-density of `a` under `N(mu, exp(log_std)^2)`.
pub fn gaussian_log_prob(a: f64, mu: f64, log_std: f64) -> f64 {
    let z = (a - mu) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

// ---- PPO ----------------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lam: f64,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            lam: 0.95,
            rollout_steps: 2048,
            epochs: 10,
            minibatch: 256,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
        }
    }
}

/// Clipped surrogate `mean_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i)`.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], eps: f64) -> f64 {
    ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum::<f64>()
        / ratios.len().max(1) as f64
}

/// Ratios `pi_new(a|s) / pi_old(a|s)` of `policy` over the whole buffer.
pub fn buffer_ratios(policy: &ActorCritic, buf: &RolloutBuffer) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(buf.len());
    for start in (0..buf.len()).step_by(1024) {
        let end = (start + 1024).min(buf.len());
        let mut g = Graph::inference();
        let obs = g.constant(Tensor::new(
            vec![end - start, buf.obs_dim],
            buf.obs[start * buf.obs_dim..end * buf.obs_dim].to_vec(),
        )?);
        let (mean, _, _) = policy.forward(&mut g, obs)?;
        let ls = policy.log_std();
        for (i, &mu) in g.value(mean).data().iter().enumerate() {
            let lp = gaussian_log_prob(buf.actions[start + i] as f64, mu as f64, ls);
            out.push((lp - buf.log_probs[start + i]).exp());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// `epochs` passes of shuffled minibatch Adam steps on the clipped surrogate,
/// value regression and entropy bonus.
pub fn ppo_update(
    policy: &mut ActorCritic,
    adam: &mut Adam<f32>,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    if !buf.is_complete() {
        return Err(RlError::Incomplete);
    }
    if cfg.minibatch == 0 || buf.is_empty() {
        return Err(RlError::Setup("empty buffer or minibatch".into()));
    }
    let d = buf.obs_dim;
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut stats = PpoStats::default();
    let mut batches = 0usize;
    let half_log_2pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, idx) in order.chunks(cfg.minibatch).enumerate() {
            let n = idx.len();
            let mut obs = Vec::with_capacity(n * d);
            for &i in idx {
                obs.extend_from_slice(&buf.obs[i * d..(i + 1) * d]);
            }
            let pick = |v: &[f64]| Tensor::new(vec![n], idx.iter().map(|&i| v[i] as f32).collect()).unwrap();
            let actions = Tensor::new(vec![n, 1], idx.iter().map(|&i| buf.actions[i]).collect())?;

            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![n, d], obs)?);
            let (mean, value, log_std) = policy.forward(&mut g, x)?;
            let lp = g.gaussian_log_prob(mean, log_std, actions)?;
            let old = g.constant(pick(&buf.log_probs));
            let diff = g.sub(lp, old)?;
            let ratio = g.exp(diff);
            if !g.value(ratio).is_finite() {
                return Err(RlError::NonFiniteRatio { epoch, minibatch: mb });
            }
            let adv = g.constant(pick(&buf.advantages));
            let s1 = g.mul(ratio, adv)?;
            let eps = cfg.clip_eps as f32;
            let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let s2 = g.mul(clipped, adv)?;
            let surr = g.minimum(s1, s2)?;
            let surr = g.mean(surr)?;
            let policy_loss = g.scale(surr, -1.0);

            let value = g.reshape(value, &[n])?;
            let ret = g.constant(pick(&buf.returns));
            let value_loss = g.mse_loss(value, ret)?;
            let ent = g.sum(log_std);
            let entropy = g.add_scalar(ent, half_log_2pi_e as f32);

            let vl = g.scale(value_loss, cfg.value_coef as f32);
            let mut total = g.add(policy_loss, vl)?;
            if cfg.entropy_coef != 0.0 {
                let eb = g.scale(entropy, -cfg.entropy_coef as f32);
                total = g.add(total, eb)?;
            }
            let grads = g.backward(total)?.params(&g, &policy.params);
            adam.step(&mut policy.params, &grads)?;

            let r = g.value(ratio).data();
            let lr: Vec<f64> = g.value(diff).data().iter().map(|&v| v as f64).collect();
            stats.policy_loss += g.value(policy_loss).item() as f64;
            stats.value_loss += g.value(value_loss).item() as f64;
            stats.entropy += g.value(entropy).item() as f64;
            stats.approx_kl += lr.iter().map(|l| (l.exp() - 1.0) - l).sum::<f64>() / n as f64;
            stats.clip_fraction +=
                r.iter().filter(|&&v| (v as f64 - 1.0).abs() > cfg.clip_eps).count() as f64 / n as f64;
            batches += 1;
        }
    }
    let k = batches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    Ok(stats)
}

// ---- environment loop ---------------------------------------------------------------------

/// Control task seen by a policy: dynamics, the camera used by frame-based
/// observations, reward, episode length and start distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEnv {
    pub physics: PhysicsConfig,
    pub camera: CameraSpec,
    pub task: Task,
    pub horizon: usize,
    pub init: InitDist,
}

impl PolicyEnv {
    pub fn new(task: Task, width: usize, height: usize) -> Self {
        Self {
            physics: PhysicsConfig::default(),
            camera: CameraSpec::fixed(0, width, height),
            task,
            horizon: 1000,
            init: match task {
                Task::Balance => InitDist::balance(),
                Task::Swingup => InitDist::swingup(),
            },
        }
    }

    pub fn env_config(&self, cameras: Vec<CameraSpec>) -> EnvConfig {
        EnvConfig {
            physics: self.physics.clone(),
            cameras,
            init: self.init.clone(),
            ..EnvConfig::default()
        }
    }
}

/// One running episode.
struct Episode<'a> {
    env: &'a PolicyEnv,
    state: EnvState,
    step: usize,
}

impl<'a> Episode<'a> {
    fn start(env: &'a PolicyEnv, rng: &mut ChaCha8Rng, source: &mut ObservationSource) -> (Self, Vec<f32>) {
        let state = env.init.sample(rng);
        let obs = observe(env, source, &state, true);
        (Self { env, state, step: 0 }, obs)
    }

    /// Applies `action`; returns the next raw observation, the reward of the
    /// next state, and whether the episode is over.
    fn advance(
        &mut self,
        action: f64,
        source: &mut ObservationSource,
        reward: &dyn Fn(&EnvState) -> f64,
    ) -> Result<(Vec<f32>, f64, bool)> {
        self.state = control_step(&self.state, action, &self.env.physics)?;
        self.step += 1;
        let r = reward(&self.state);
        let obs = observe(self.env, source, &self.state, false);
        Ok((obs, r, self.step >= self.env.horizon))
    }
}

fn observe(env: &PolicyEnv, source: &mut ObservationSource, state: &EnvState, reset: bool) -> Vec<f32> {
    match source {
        ObservationSource::State(o) if reset => o.reset(state),
        ObservationSource::State(o) => o.observe(state),
        ObservationSource::Frames(o) => {
            let frame = render(state, &env.camera, &env.physics);
            if reset {
                o.reset(&frame)
            } else {
                o.observe(&frame)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            total_steps: 1_000_000,
            seed: 0,
        }
    }
}

/// Learning-curve point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    /// Mean return of the episodes completed during the rollout.
    pub mean_reward: f64,
}

pub struct PolicyTrainSummary {
    pub policy: ActorCritic,
    pub curve: Vec<CurvePoint>,
    pub last_stats: PpoStats,
}

/// Builds an untrained policy suited to `mode`.
pub fn policy_for(
    mode: ObsMode,
    obs_dim: usize,
    env: &PolicyEnv,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<ActorCritic> {
    let pixel = (mode == ObsMode::Pixels).then_some([3, env.camera.height, env.camera.width]);
    ActorCritic::new(
        obs_dim,
        pixel,
        mode == ObsMode::TrueState,
        cfg,
        &mut substream(seed, "policy/init"),
    )
}

/// Alternating rollout / update loop. Episodes that hit the horizon are cut,
/// and their last reward is bootstrapped with the value of the final state.
pub fn train_policy(
    env: &PolicyEnv,
    mode: ObsMode,
    mut source: ObservationSource,
    cfg: &PolicyTrainConfig,
    mut on_point: impl FnMut(&CurvePoint, &PpoStats),
) -> Result<PolicyTrainSummary> {
    if env.horizon == 0 || cfg.ppo.rollout_steps == 0 {
        return Err(RlError::Setup("horizon and rollout length must be positive".into()));
    }
    let mut policy = policy_for(mode, source.dim(), env, &cfg.policy, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.ppo.lr), &policy.params);
    let mut env_rng = substream(cfg.seed, "policy/env");
    let mut act_rng = substream(cfg.seed, "policy/actions");
    let mut mb_rng = substream(cfg.seed, "policy/minibatches");
    let reward = |s: &EnvState| env.task.reward(s);

    let (mut ep, mut raw) = Episode::start(env, &mut env_rng, &mut source);
    let mut ep_return = 0.0;
    let mut steps = 0u64;
    let mut curve = Vec::new();
    let mut last_stats = PpoStats::default();
    while steps < cfg.total_steps {
        let mut buf = RolloutBuffer::new(source.dim());
        let mut finished = Vec::new();
        let n = (cfg.ppo.rollout_steps as u64).min(cfg.total_steps - steps) as usize;
        for _ in 0..n {
            if let Some(norm) = &mut policy.obs_norm {
                norm.update(&raw);
            }
            let obs = policy.prepare(&raw);
            let out = policy.act(&obs, Some(&mut act_rng))?;
            let (next, r, done) = ep.advance(out.action, &mut source, &reward)?;
            ep_return += r;
            let mut stored = r;
            if done {
                stored += cfg.ppo.gamma * policy.value_of(&policy.prepare(&next))?;
                finished.push(ep_return);
                ep_return = 0.0;
                (ep, raw) = Episode::start(env, &mut env_rng, &mut source);
            } else {
                raw = next;
            }
            buf.push(&obs, out.action as f32, stored, out.value, out.log_prob, done);
        }
        steps += n as u64;
        let last_value = policy.value_of(&policy.prepare(&raw))?;
        buf.finish(last_value, cfg.ppo.gamma, cfg.ppo.lam)?;
        last_stats = ppo_update(&mut policy, &mut adam, &buf, &cfg.ppo, &mut mb_rng)?;
        if !finished.is_empty() {
            let point = CurvePoint {
                env_steps: steps,
                mean_reward: finished.iter().sum::<f64>() / finished.len() as f64,
            };
            on_point(&point, &last_stats);
            curve.push(point);
        }
    }
    Ok(PolicyTrainSummary {
        policy,
        curve,
        last_stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub returns: Vec<f64>,
}

impl EvalReport {
    fn from_returns(returns: Vec<f64>, horizon: usize) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std,
            episodes: returns.len(),
            horizon,
            returns,
        }
    }
}

pub const EVAL_EPISODES: usize = 100;
pub const EVAL_HORIZON: usize = 1000;

/// Cumulative task reward of the deterministic (mean-action) policy.
pub fn evaluate_policy(
    policy: &ActorCritic,
    env: &PolicyEnv,
    source: &mut ObservationSource,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_policy_with(policy, env, source, episodes, horizon, seed, &|s| env.task.reward(s))
}

pub fn evaluate_policy_with(
    policy: &ActorCritic,
    env: &PolicyEnv,
    source: &mut ObservationSource,
    episodes: usize,
    horizon: usize,
    seed: u64,
    reward: &dyn Fn(&EnvState) -> f64,
) -> Result<EvalReport> {
    let env = PolicyEnv { horizon, ..env.clone() };
    let mut rng = substream(seed, "eval/env");
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut ep, mut raw) = Episode::start(&env, &mut rng, source);
        let mut total = 0.0;
        loop {
            let a = policy.act(&policy.prepare(&raw), None)?.action;
            let (next, r, done) = ep.advance(a, source, reward)?;
            total += r;
            raw = next;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalReport::from_returns(returns, horizon))
}

/// Uniform random actions in `[-1, 1]`: the floor for policy comparisons.
pub fn evaluate_random_policy(env: &PolicyEnv, episodes: usize, horizon: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = substream(seed, "eval/env");
    let mut act = substream(seed, "eval/random-actions");
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.init.sample(&mut rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            s = control_step(&s, act.random_range(-1.0..=1.0), &env.physics)?;
            total += env.task.reward(&s);
        }
        returns.push(total);
    }
    Ok(EvalReport::from_returns(returns, horizon))
}

/// Rolls out a true-state policy (sampling its actions), keeps the episodes
/// whose return reaches the `keep_percentile` percentile, and renders them
/// from `cameras`.
pub fn record_expert_demos(
    policy: &ActorCritic,
    env: &PolicyEnv,
    cameras: Vec<CameraSpec>,
    episodes: usize,
    keep_percentile: f64,
    seed: u64,
) -> Result<(MultiViewDataset, Vec<f64>)> {
    if policy.obs_dim != 5 || policy.encoder.is_some() {
        return Err(RlError::Setup("expert demonstrations need a true-state policy".into()));
    }
    if !(0.0..=100.0).contains(&keep_percentile) {
        return Err(RlError::Setup(format!("percentile {keep_percentile} outside [0, 100]")));
    }
    let mut env_rng = substream(seed, "demos/env");
    let mut act_rng = substream(seed, "demos/actions");
    let mut source = ObservationSource::true_state();
    let mut rollouts = Vec::new();
    let mut returns = Vec::new();
    for _ in 0..episodes {
        let (mut ep, mut raw) = Episode::start(env, &mut env_rng, &mut source);
        let mut roll = Rollout {
            states: vec![ep.state],
            actions: Vec::new(),
        };
        let mut total = 0.0;
        loop {
            let a = policy
                .act(&policy.prepare(&raw), Some(&mut act_rng))?
                .action
                .clamp(-1.0, 1.0);
            let (next, r, done) = ep.advance(a, &mut source, &|s| env.task.reward(s))?;
            roll.actions.push(a);
            roll.states.push(ep.state);
            total += r;
            raw = next;
            if done {
                break;
            }
        }
        rollouts.push(roll);
        returns.push(total);
    }
    let threshold = percentile(&returns, keep_percentile);
    let kept: Vec<Rollout> = rollouts
        .into_iter()
        .zip(&returns)
        .filter(|(_, &r)| r >= threshold)
        .map(|(roll, _)| roll)
        .collect();
    if kept.is_empty() {
        return Err(RlError::NoDemonstrations);
    }
    let ds = MultiViewDataset::from_rollouts(&env.env_config(cameras), substream_seed(seed, "demos"), kept)?;
    Ok((ds, returns))
}

/// Nearest-rank percentile; `p = 0` is the minimum.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::INFINITY;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.saturating_sub(1).min(v.len() - 1)]
}
