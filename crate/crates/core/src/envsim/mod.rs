//! Cart-pole dynamics, a software renderer for synchronized cameras, task
//! rewards and per-frame attribute labels.

mod render;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use render::{render, CameraMode, CameraSpec, Frame};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("non-finite state after step {t}: {state:?}")]
    NonFinite { t: u64, state: EnvState },
    #[error("invalid environment configuration: {0}")]
    Config(String),
}

/// Physical constants and integration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub gravity: f64,
    pub force_max: f64,
    pub dt: f64,
    /// Physics substeps per control step.
    pub action_repeat: u32,
    pub track_half_length: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.8,
            force_max: 10.0,
            dt: 0.01,
            action_repeat: 4,
            track_half_length: 2.0,
        }
    }
}

/// `theta = 0` is the pole pointing straight up; positive `theta` tilts the tip
/// towards positive `x`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    /// Physics step index.
    pub t: u64,
}

impl EnvState {
    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
            t: 0,
        }
    }

    /// Reflection through the vertical axis at `x = 0`.
    pub fn mirror(&self) -> Self {
        Self {
            x: -self.x,
            x_dot: -self.x_dot,
            theta: -self.theta,
            theta_dot: -self.theta_dot,
            t: self.t,
        }
    }

    /// Pole angle wrapped into `(-pi, pi]`.
    pub fn wrapped_theta(&self) -> f64 {
        self.theta.sin().atan2(self.theta.cos())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.x_dot.is_finite() && self.theta.is_finite() && self.theta_dot.is_finite()
    }

    /// Probe regression targets `[x, sin(theta), cos(theta), x_dot, theta_dot]`.
    pub fn probe_targets(&self) -> [f64; 5] {
        [self.x, self.theta.sin(), self.theta.cos(), self.x_dot, self.theta_dot]
    }

    /// Compact observation for state-based policies.
    pub fn observation(&self) -> [f64; 5] {
        self.probe_targets()
    }
}

/// One semi-implicit Euler step of length `cfg.dt` under horizontal force `force`
/// (clamped to `±force_max`). The cart stops dead at the rails.
pub fn step(state: &EnvState, force: f64, cfg: &PhysicsConfig) -> Result<EnvState, EnvError> {
    let force = force.clamp(-cfg.force_max, cfg.force_max);
    let total = cfg.cart_mass + cfg.pole_mass;
    let ml = cfg.pole_mass * cfg.half_length;
    let (sin, cos) = (state.theta.sin(), state.theta.cos());
    let w2 = state.theta_dot * state.theta_dot;

    let theta_acc = (cfg.gravity * sin + cos * (-force - ml * w2 * sin) / total)
        / (cfg.half_length * (4.0 / 3.0 - cfg.pole_mass * cos * cos / total));
    let x_acc = (force + ml * (w2 * sin - theta_acc * cos)) / total;

    let mut x_dot = state.x_dot + cfg.dt * x_acc;
    let theta_dot = state.theta_dot + cfg.dt * theta_acc;
    let mut x = state.x + cfg.dt * x_dot;
    let theta = state.theta + cfg.dt * theta_dot;
    if x.abs() > cfg.track_half_length {
        x = cfg.track_half_length.copysign(x);
        x_dot = 0.0;
    }
    let next = EnvState {
        x,
        x_dot,
        theta,
        theta_dot,
        t: state.t + 1,
    };
    if !next.is_finite() {
        return Err(EnvError::NonFinite { t: next.t, state: next });
    }
    Ok(next)
}

/// Applies a normalised action in `[-1, 1]` for `action_repeat` physics steps.
pub fn control_step(state: &EnvState, action: f64, cfg: &PhysicsConfig) -> Result<EnvState, EnvError> {
    let force = action.clamp(-1.0, 1.0) * cfg.force_max;
    let mut s = *state;
    for _ in 0..cfg.action_repeat {
        s = step(&s, force, cfg)?;
    }
    Ok(s)
}

/// Total mechanical energy of the cart and the uniform pole, zero potential at
/// the pivot height.
pub fn mechanical_energy(s: &EnvState, cfg: &PhysicsConfig) -> f64 {
    let (m, l) = (cfg.pole_mass, cfg.half_length);
    0.5 * (cfg.cart_mass + m) * s.x_dot * s.x_dot
        + m * l * s.x_dot * s.theta_dot * s.theta.cos()
        + 0.5 * (4.0 / 3.0) * m * l * l * s.theta_dot * s.theta_dot
        + m * cfg.gravity * l * s.theta.cos()
}

/// Swing-up reward in `[0, 1]`: upright factor times a centering factor times a
/// small-angular-velocity factor.
pub fn reward_swingup(s: &EnvState) -> f64 {
    let upright = 0.5 * (1.0 + s.theta.cos());
    upright * centering(s.x) * speed_damp(s.theta_dot)
}

/// `(1 + exp(-x^2)) / 2`, equal to 1 at the track centre.
pub fn centering(x: f64) -> f64 {
    0.5 * (1.0 + (-x * x).exp())
}

/// `(1 + exp(-(w/5)^2)) / 2`, equal to 1 when the pole is still.
pub fn speed_damp(theta_dot: f64) -> f64 {
    let z = theta_dot / 5.0;
    0.5 * (1.0 + (-z * z).exp())
}

/// 1 while the pole is within 0.2 rad of upright and the cart within 0.5 m of centre.
pub fn reward_balance(s: &EnvState) -> f64 {
    if s.wrapped_theta().abs() < 0.2 && s.x.abs() < 0.5 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Swingup,
    Balance,
}

impl Task {
    pub fn reward(self, s: &EnvState) -> f64 {
        match self {
            Task::Swingup => reward_swingup(s),
            Task::Balance => reward_balance(s),
        }
    }
}

/// Distribution of normalised actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionDist {
    Uniform {
        low: f64,
        high: f64,
    },
    /// Gaussian, clipped to `[-1, 1]` after sampling.
    Gaussian {
        mean: f64,
        std: f64,
    },
}

impl Default for ActionDist {
    fn default() -> Self {
        ActionDist::Uniform { low: -1.0, high: 1.0 }
    }
}

impl ActionDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ActionDist::Uniform { low, high } => rng.random_range(low..high),
            ActionDist::Gaussian { mean, std } => Normal::new(mean, std)
                .expect("validated std")
                .sample(rng)
                .clamp(-1.0, 1.0),
        }
    }

    /// Mean and standard deviation of the (unclipped) distribution.
    pub fn moments(&self) -> (f64, f64) {
        match *self {
            ActionDist::Uniform { low, high } => (0.5 * (low + high), (high - low) / 12f64.sqrt()),
            ActionDist::Gaussian { mean, std } => (mean, std),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        let ok = match *self {
            ActionDist::Uniform { low, high } => low < high && low.is_finite() && high.is_finite(),
            ActionDist::Gaussian { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
        };
        ok.then_some(())
            .ok_or_else(|| EnvError::Config(format!("bad action distribution {self:?}")))
    }
}

/// Uniform box over initial states, each component `U(center - half_width, center + half_width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitDist {
    pub center: [f64; 4],
    pub half_width: [f64; 4],
}

impl Default for InitDist {
    /// Random-exploration default: anywhere on the central track, any pole angle.
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.0, 0.0],
            half_width: [1.0, 0.5, std::f64::consts::PI, 1.0],
        }
    }
}

impl InitDist {
    /// Near-upright starts for the balance task.
    pub fn balance() -> Self {
        Self {
            center: [0.0; 4],
            half_width: [0.1, 0.05, 0.1, 0.05],
        }
    }

    /// Hanging starts for the swing-up task.
    pub fn swingup() -> Self {
        Self {
            center: [0.0, 0.0, std::f64::consts::PI, 0.0],
            half_width: [0.1, 0.05, 0.1, 0.05],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let mut v = [0.0; 4];
        for ((vi, &c), &hw) in v.iter_mut().zip(&self.center).zip(&self.half_width) {
            *vi = c + if hw > 0.0 { rng.random_range(-hw..hw) } else { 0.0 };
        }
        EnvState::new(v[0], v[1], v[2], v[3])
    }
}

/// States `s_0 .. s_{len-1}` and the actions `a_0 .. a_{len-2}` that connect them.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<EnvState>,
    pub actions: Vec<f64>,
}

/// Deterministic random-action rollout seeded by `seed`.
pub fn random_rollout(
    seed: u64,
    length: usize,
    physics: &PhysicsConfig,
    init: &InitDist,
    actions: &ActionDist,
) -> Result<Rollout, EnvError> {
    use rand::SeedableRng;
    if length == 0 {
        return Err(EnvError::Config("rollout length must be >= 1".into()));
    }
    actions.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = init.sample(&mut rng);
    let mut out = Rollout {
        states: vec![s],
        actions: Vec::with_capacity(length - 1),
    };
    for _ in 1..length {
        let a = actions.sample(&mut rng);
        s = control_step(&s, a, physics)?;
        out.actions.push(a);
        out.states.push(s);
    }
    Ok(out)
}

/// Three-way sign label with a dead band around zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ternary {
    Negative,
    Neutral,
    Positive,
}

impl Ternary {
    pub const DEAD_BAND: f64 = 0.05;

    pub fn of(v: f64) -> Self {
        if v > Self::DEAD_BAND {
            Ternary::Positive
        } else if v < -Self::DEAD_BAND {
            Ternary::Negative
        } else {
            Ternary::Neutral
        }
    }

    pub fn code(self) -> i8 {
        match self {
            Ternary::Negative => -1,
            Ternary::Neutral => 0,
            Ternary::Positive => 1,
        }
    }

    pub fn from_code(c: i8) -> Option<Self> {
        match c {
            -1 => Some(Ternary::Negative),
            0 => Some(Ternary::Neutral),
            1 => Some(Ternary::Positive),
            _ => None,
        }
    }
}

/// Per-frame labels. The first three are decidable from a single frame, the
/// last two need temporal context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeVector {
    pub cart_on_right: bool,
    /// 0..4, quarter of the circle holding the wrapped angle, counted from `-pi`.
    pub pole_quadrant: u8,
    pub pole_up: bool,
    pub cart_moving_right: Ternary,
    /// Angle increasing faster than the dead band.
    pub pole_rotating_ccw: Ternary,
}

impl AttributeVector {
    pub const STATIC_NAMES: [&'static str; 3] = ["cart_on_right", "pole_quadrant", "pole_up"];
    pub const MOTION_NAMES: [&'static str; 2] = ["cart_moving_right", "pole_rotating_ccw"];

    /// Class index per attribute, static first then motion.
    pub fn classes(&self) -> [u8; 5] {
        [
            self.cart_on_right as u8,
            self.pole_quadrant,
            self.pole_up as u8,
            (self.cart_moving_right.code() + 1) as u8,
            (self.pole_rotating_ccw.code() + 1) as u8,
        ]
    }
}

pub fn attributes_from_state(s: &EnvState) -> AttributeVector {
    let th = s.wrapped_theta();
    let quadrant = (((th + std::f64::consts::PI) / std::f64::consts::FRAC_PI_2).floor() as i64).clamp(0, 3) as u8;
    AttributeVector {
        cart_on_right: s.x > 0.0,
        pole_quadrant: quadrant,
        pole_up: th.abs() < std::f64::consts::FRAC_PI_2,
        cart_moving_right: Ternary::of(s.x_dot),
        pole_rotating_ccw: Ternary::of(s.theta_dot),
    }
}

/// Everything needed to regenerate a dataset's frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub physics: PhysicsConfig,
    pub cameras: Vec<CameraSpec>,
    pub init: InitDist,
    pub actions: ActionDist,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::with_resolution(64, 32)
    }
}

impl EnvConfig {
    /// View 0 fixed, view 1 tracking the cart.
    pub fn with_resolution(width: usize, height: usize) -> Self {
        Self {
            physics: PhysicsConfig::default(),
            cameras: vec![
                CameraSpec::fixed(0, width, height),
                CameraSpec::tracking(1, width, height),
            ],
            init: InitDist::default(),
            actions: ActionDist::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut ids: Vec<_> = self.cameras.iter().map(|c| c.view_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.cameras.len() {
            return Err(EnvError::Config("camera view ids must be unique".into()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        if self.physics.dt <= 0.0 || self.physics.action_repeat == 0 {
            return Err(EnvError::Config("dt and action_repeat must be positive".into()));
        }
        self.actions.validate()
    }
}
