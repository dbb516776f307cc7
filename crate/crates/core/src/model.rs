//! The mfTCN embedding network and MLP builders.
//!
//! Pipeline for one clip of `n` frames: a shared 2-D CNN per frame, feature maps
//! stacked on a time axis, a 3-D convolution whose temporal extent equals `n`
//! (collapsing time to a single step), a spatial mean and a linear map to `d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameStack;
use crate::numeric::{he_uniform, Checkpoint, Graph, NumericError, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::sampler::lookback_window;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("expected {expected} frames per clip, got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("expected frames of shape {expected:?}, got {got:?}")]
    Resolution { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid model config: {0}")]
    Config(String),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

const CLIP_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Multi-layer perceptron; the final layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ModelError::Config(format!(
                "mlp sizes {sizes:?} need two or more positive widths"
            )));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let weight = store.add(format!("{prefix}.fc{i}.weight"), he_uniform(rng, &[w[1], w[0]], w[0]))?;
            let bias = store.add(format!("{prefix}.fc{i}.bias"), Tensor::zeros(vec![w[1]]))?;
            layers.push((weight, bias));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            layers,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }

    /// Multiplies the final layer's weights by `factor`.
    pub fn scale_output<T: Scalar>(&self, store: &mut ParamStore<T>, factor: f64) {
        let (w, _) = *self.layers.last().unwrap();
        let p = store.get_mut(w);
        p.value = p.value.map(|v| v * T::lit(factor));
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Stack of 3x3, stride-2, padding-1 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct BaseCnn {
    pub channels: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl BaseCnn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(ModelError::Config(format!("cnn channels {channels:?}")));
        }
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let weight = store.add(
                format!("{prefix}.conv{}.weight", i + 1),
                he_uniform(rng, &[c, c_in, 3, 3], fan_in),
            )?;
            let bias = store.add(format!("{prefix}.conv{}.bias", i + 1), Tensor::zeros(vec![c]))?;
            layers.push((weight, bias));
            c_in = c;
        }
        Ok(Self {
            channels: channels.to_vec(),
            layers,
        })
    }

    /// Spatial extent after the stack for an `h x w` input.
    pub fn out_hw(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for _ in &self.layers {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// `[N,C,H,W] -> [N,C',h,w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.layers {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.conv2d(h, w, b, 2, 1)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfTcnConfig {
    pub embedding_dim: usize,
    pub n_frames: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_temporal_channels")]
    pub temporal_channels: usize,
}

fn default_channels() -> Vec<usize> {
    vec![16, 32, 32, 64]
}

fn default_temporal_channels() -> usize {
    64
}

impl Default for MfTcnConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            n_frames: 4,
            stride: 1,
            width: 64,
            height: 32,
            channels: default_channels(),
            temporal_channels: default_temporal_channels(),
        }
    }
}

impl MfTcnConfig {
    pub fn window(&self) -> usize {
        lookback_window(self.n_frames, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.n_frames == 0 || self.stride == 0 || self.temporal_channels == 0 {
            return Err(ModelError::Config(
                "embedding_dim, n_frames, stride and temporal_channels must be positive".into(),
            ));
        }
        if self.width < 16 || self.height < 16 {
            return Err(ModelError::Config(format!(
                "input {}x{} below 16x16",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MfTcnModel<T: Scalar = f32> {
    pub config: MfTcnConfig,
    pub params: ParamStore<T>,
    cnn: BaseCnn,
    conv3d: (ParamId, ParamId),
    fc: (ParamId, ParamId),
}

impl<T: Scalar> MfTcnModel<T> {
    pub fn new(config: MfTcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cnn = BaseCnn::new(&mut params, "cnn", 3, &config.channels, &mut rng)?;
        let (c, k, n) = (cnn.out_channels(), config.temporal_channels, config.n_frames);
        let conv3d = (
            params.add("temporal.weight", he_uniform(&mut rng, &[k, c, n, 3, 3], c * n * 9))?,
            params.add("temporal.bias", Tensor::zeros(vec![k]))?,
        );
        let d = config.embedding_dim;
        let fc = (
            params.add("fc.weight", he_uniform(&mut rng, &[d, k], k))?,
            params.add("fc.bias", Tensor::zeros(vec![d]))?,
        );
        Ok(Self {
            config,
            params,
            cnn,
            conv3d,
            fc,
        })
    }

    /// Layer sequence of one forward pass.
    pub fn layers(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for _ in &self.cnn.channels {
            out.extend(["conv2d", "relu"]);
        }
        out.extend(["conv3d", "relu", "spatial_mean", "linear"]);
        out
    }

    pub fn cnn(&self) -> &BaseCnn {
        &self.cnn
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [3, self.config.height, self.config.width]
    }

    /// Per-frame features `[N,3,H,W] -> [N,C,h,w]`.
    pub fn features(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        self.check_frames(g.shape(frames))?;
        self.cnn.forward(g, &self.params, frames)
    }

    /// Temporal head `[B,n,C,h,w] -> [B,d]`.
    pub fn head(&self, g: &mut Graph<T>, feats: Var) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        if s.len() != 5 || s[1] != self.config.n_frames {
            return Err(ModelError::FrameCount {
                expected: self.config.n_frames,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let x = g.permute(feats, &[0, 2, 1, 3, 4])?;
        let (w, b) = (
            g.param(&self.params, self.conv3d.0),
            g.param(&self.params, self.conv3d.1),
        );
        let phi = g.conv3d(x, w, b, 1)?;
        let phi = g.relu(phi);
        let phi = g.reshape(phi, &[s[0], self.config.temporal_channels, s[3], s[4]])?;
        let pooled = g.spatial_mean(phi)?;
        let (w, b) = (g.param(&self.params, self.fc.0), g.param(&self.params, self.fc.1));
        Ok(g.linear(pooled, w, b)?)
    }

    /// Embeds `B` clips stored consecutively as `[B*n,3,H,W]`, oldest frame first.
    pub fn forward_clips(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let n = self.config.n_frames;
        let total = g.shape(frames)[0];
        if !total.is_multiple_of(n) || total == 0 {
            return Err(ModelError::FrameCount {
                expected: n,
                got: total,
            });
        }
        let feats = self.features(g, frames)?;
        let fs = g.shape(feats).to_vec();
        let feats = g.reshape(feats, &[total / n, n, fs[1], fs[2], fs[3]])?;
        self.head(g, feats)
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.frame_shape() {
            let mut expected = vec![0];
            expected.extend(self.frame_shape());
            return Err(ModelError::Resolution {
                expected,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Embedding of one clip `[n,3,H,W] -> [d]`.
    pub fn embed_clip(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let got = frames.shape().first().copied().unwrap_or(0);
        if got != self.config.n_frames {
            return Err(ModelError::FrameCount {
                expected: self.config.n_frames,
                got,
            });
        }
        let e = self.embed_clips(frames)?;
        Ok(e.reshape(vec![self.config.embedding_dim])?)
    }

    /// Inference over consecutive clips `[B*n,3,H,W] -> [B,d]`.
    pub fn embed_clips(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(frames.clone());
        let out = self.forward_clips(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Embeds every valid timestep of one view. Row `i` of the result is the
    /// embedding at `t = window - 1 + i`. Per-frame features are computed once
    /// and shared between overlapping clips.
    pub fn embed_sequence(&self, frames: &FrameStack) -> Result<Tensor<T>> {
        self.check_frames(&[0, 3, frames.height, frames.width])?;
        let (n, s, window) = (self.config.n_frames, self.config.stride, self.config.window());
        let len = frames.len();
        let d = self.config.embedding_dim;
        if len < window {
            return Ok(Tensor::zeros(vec![0, d]));
        }
        let mut feat_shape = Vec::new();
        let mut feats: Vec<T> = Vec::new();
        for start in (0..len).step_by(CLIP_CHUNK) {
            let idx: Vec<usize> = (start..(start + CLIP_CHUNK).min(len)).collect();
            let mut g = Graph::inference();
            let x = g.constant(frames.tensor(&idx).cast());
            let f = self.features(&mut g, x)?;
            feat_shape = g.shape(f)[1..].to_vec();
            feats.extend_from_slice(g.value(f).data());
        }
        let per = feat_shape.iter().product::<usize>();
        let times: Vec<usize> = (window - 1..len).collect();
        let mut out = Vec::with_capacity(times.len() * d);
        for chunk in times.chunks(CLIP_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * n * per);
            for &t in chunk {
                for j in 0..n {
                    let f = t - (n - 1 - j) * s;
                    data.extend_from_slice(&feats[f * per..(f + 1) * per]);
                }
            }
            let mut shape = vec![chunk.len(), n];
            shape.extend(&feat_shape);
            let mut g = Graph::inference();
            let x = g.constant(Tensor::new(shape, data)?);
            let e = self.head(&mut g, x)?;
            out.extend_from_slice(g.value(e).data());
        }
        Ok(Tensor::new(vec![times.len(), d], out)?)
    }
}

impl MfTcnModel<f32> {
    pub fn to_checkpoint(&self, global_step: u64, config_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(global_step, config_digest);
        ck.push_store("model.", &self.params);
        ck
    }

    pub fn from_checkpoint(config: MfTcnConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        ck.load_store("model.", &mut model.params)?;
        Ok(model)
    }
}
