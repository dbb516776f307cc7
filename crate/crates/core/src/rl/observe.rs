//! Observation sources for the policy.
//!
//! State-based sources implement [`StateObserver`] and see the simulator state;
//! frame-based sources implement [`FrameObserver`] and only ever receive
//! rendered frames, so embedding-mode policies have no path to the state.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envsim::{EnvState, Frame};
use crate::model::{MfTcnModel, ModelError};
use crate::numeric::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    TrueState,
    Pixels,
    Embedding,
    RandomState,
}

impl ObsMode {
    pub fn needs_frames(self) -> bool {
        matches!(self, ObsMode::Pixels | ObsMode::Embedding)
    }
}

impl std::str::FromStr for ObsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "true_state" => Ok(Self::TrueState),
            "pixels" => Ok(Self::Pixels),
            "embedding" => Ok(Self::Embedding),
            "random_state" => Ok(Self::RandomState),
            other => Err(format!("unknown observation mode {other:?}")),
        }
    }
}

pub trait StateObserver {
    fn dim(&self) -> usize;
    fn reset(&mut self, state: &EnvState) -> Vec<f32>;
    fn observe(&mut self, state: &EnvState) -> Vec<f32>;
}

pub trait FrameObserver {
    fn dim(&self) -> usize;
    fn reset(&mut self, frame: &Frame) -> Vec<f32>;
    fn observe(&mut self, frame: &Frame) -> Vec<f32>;
}

/// `[x, sin theta, cos theta, x_dot, theta_dot]`.
#[derive(Clone, Debug, Default)]
pub struct TrueState;

impl StateObserver for TrueState {
    fn dim(&self) -> usize {
        5
    }

    fn reset(&mut self, state: &EnvState) -> Vec<f32> {
        self.observe(state)
    }

    fn observe(&mut self, state: &EnvState) -> Vec<f32> {
        state.observation().map(|v| v as f32).to_vec()
    }
}

/// Standard-normal noise of the true-state width, independent of the state.
#[derive(Clone, Debug)]
pub struct RandomState {
    rng: ChaCha8Rng,
}

impl RandomState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl StateObserver for RandomState {
    fn dim(&self) -> usize {
        5
    }

    fn reset(&mut self, state: &EnvState) -> Vec<f32> {
        self.observe(state)
    }

    fn observe(&mut self, _state: &EnvState) -> Vec<f32> {
        (0..5).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }
}

/// The current frame as a flat `[3*H*W]` vector in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Pixels {
    pub width: usize,
    pub height: usize,
}

impl FrameObserver for Pixels {
    fn dim(&self) -> usize {
        3 * self.width * self.height
    }

    fn reset(&mut self, frame: &Frame) -> Vec<f32> {
        self.observe(frame)
    }

    fn observe(&mut self, frame: &Frame) -> Vec<f32> {
        frame.to_tensor::<f32>().into_data()
    }
}

/// Frozen mfTCN embedding of the most recent lookback window. Keeps the
/// per-frame CNN features of exactly `(n - 1) * s + 1` frames; after a reset the
/// first frame fills the whole window.
#[derive(Clone, Debug)]
pub struct Embedding {
    model: Arc<MfTcnModel<f32>>,
    window: VecDeque<Vec<f32>>,
    feat_shape: Vec<usize>,
}

impl Embedding {
    pub fn new(model: Arc<MfTcnModel<f32>>) -> Self {
        Self {
            model,
            window: VecDeque::new(),
            feat_shape: Vec::new(),
        }
    }

    pub fn buffered_frames(&self) -> usize {
        self.window.len()
    }

    fn features(&mut self, frame: &Frame) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::inference();
        let x = frame.to_tensor::<f32>();
        let x = g.constant(x.reshape(vec![1, 3, frame.height, frame.width])?);
        let f = self.model.features(&mut g, x)?;
        self.feat_shape = g.shape(f)[1..].to_vec();
        Ok(g.value(f).data().to_vec())
    }

    fn embed(&self) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.model.config;
        let last = self.window.len() - 1;
        let mut data = Vec::new();
        for j in 0..cfg.n_frames {
            data.extend_from_slice(&self.window[last - (cfg.n_frames - 1 - j) * cfg.stride]);
        }
        let mut shape = vec![1, cfg.n_frames];
        shape.extend(&self.feat_shape);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(shape, data)?);
        let e = self.model.head(&mut g, x)?;
        Ok(g.value(e).data().to_vec())
    }

    fn push(&mut self, frame: &Frame, fill: bool) -> Vec<f32> {
        let f = self.features(frame).expect("frame matches the embedding model");
        let w = self.model.config.window();
        if fill {
            self.window.clear();
            self.window.extend(std::iter::repeat_n(f, w));
        } else {
            self.window.pop_front();
            self.window.push_back(f);
        }
        self.embed().expect("window matches the embedding model")
    }
}

impl FrameObserver for Embedding {
    fn dim(&self) -> usize {
        self.model.config.embedding_dim
    }

    fn reset(&mut self, frame: &Frame) -> Vec<f32> {
        self.push(frame, true)
    }

    fn observe(&mut self, frame: &Frame) -> Vec<f32> {
        self.push(frame, false)
    }
}

/// One of the four observation modes.
pub enum ObservationSource {
    State(Box<dyn StateObserver + Send>),
    Frames(Box<dyn FrameObserver + Send>),
}

impl ObservationSource {
    pub fn true_state() -> Self {
        Self::State(Box::new(TrueState))
    }

    pub fn random_state(seed: u64) -> Self {
        Self::State(Box::new(RandomState::new(seed)))
    }

    pub fn pixels(width: usize, height: usize) -> Self {
        Self::Frames(Box::new(Pixels { width, height }))
    }

    pub fn embedding(model: Arc<MfTcnModel<f32>>) -> Self {
        Self::Frames(Box::new(Embedding::new(model)))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::State(o) => o.dim(),
            Self::Frames(o) => o.dim(),
        }
    }

    pub fn needs_frames(&self) -> bool {
        matches!(self, Self::Frames(_))
    }
}
