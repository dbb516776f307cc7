//! Synchronized multi-view trajectories on disk and in memory.
//!
//! Directory layout (version 1):
//!
//! ```text
//! <root>/manifest.json
//! <root>/traj_<id:06>/view_<view_id>.png   RGB filmstrip, width W, height T*H;
//!                                          frame t occupies rows t*H .. (t+1)*H
//! <root>/traj_<id:06>/labels.csv           one row per frame
//! ```
//!
//! `labels.csv` has the header
//! `t,x,x_dot,theta,theta_dot,action,cart_on_right,pole_quadrant,pole_up,cart_moving_right,pole_rotating_ccw`.
//! Floats use the shortest representation that parses back to the same bits;
//! `action` is empty on the last row; booleans are `0`/`1`; the two motion
//! attributes are `-1`/`0`/`1`. The manifest records a SHA-256 of every file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envsim::{
    attributes_from_state, random_rollout, render, AttributeVector, CameraSpec, EnvConfig, EnvError, EnvState, Rollout,
    Ternary,
};
use crate::numeric::Tensor;
use crate::seeding::{digest_hex, substream, substream_seed};

pub const FORMAT_VERSION: u32 = 1;
const LABEL_HEADER: &str =
    "t,x,x_dot,theta,theta_dot,action,cart_on_right,pole_quadrant,pole_up,cart_moving_right,pole_rotating_ccw";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("trajectory {id}: {reason}")]
    Unsynchronized { id: u32, reason: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// All frames of one view of one trajectory, `[T, 3, H, W]` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    pub view_id: u32,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl FrameStack {
    pub fn frame_len(&self) -> usize {
        3 * self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames at `indices` as a float tensor `[indices.len(), 3, H, W]`.
    pub fn tensor(&self, indices: &[usize]) -> Tensor<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.frame_len());
        for &t in indices {
            out.extend(self.frame(t).iter().map(|&p| p as f32 * (1.0f64 / 255.0) as f32));
        }
        Tensor::new(vec![indices.len(), 3, self.height, self.width], out).expect("frame stack shape")
    }

    fn to_png(&self) -> Vec<u8> {
        let (w, h) = (self.width, self.height);
        let frames = self.len();
        let mut rgb = vec![0u8; frames * h * w * 3];
        for t in 0..frames {
            let f = self.frame(t);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        rgb[((t * h + y) * w + x) * 3 + c] = f[(c * h + y) * w + x];
                    }
                }
            }
        }
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &rgb,
            w as u32,
            (frames * h) as u32,
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory png encoding");
        out
    }

    fn from_png(bytes: &[u8], view_id: u32, width: usize, height: usize, frames: usize) -> Result<Self, String> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| e.to_string())?
            .into_rgb8();
        if img.width() as usize != width || img.height() as usize != frames * height {
            return Err(format!(
                "image is {}x{}, expected {}x{}",
                img.width(),
                img.height(),
                width,
                frames * height
            ));
        }
        let rgb = img.into_raw();
        let mut data = vec![0u8; frames * 3 * height * width];
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        data[((t * 3 + c) * height + y) * width + x] = rgb[((t * height + y) * width + x) * 3 + c];
                    }
                }
            }
        }
        Ok(Self {
            view_id,
            width,
            height,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    /// Index-aligned with the dataset's cameras.
    pub views: Vec<FrameStack>,
    pub states: Vec<EnvState>,
    pub actions: Vec<f64>,
    pub attributes: Vec<AttributeVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self) -> Result<()> {
        let fail = |reason: String| DatasetError::Unsynchronized { id: self.id, reason };
        let n = self.states.len();
        for v in &self.views {
            if v.len() != n || v.data.len() != n * v.frame_len() {
                return Err(fail(format!(
                    "view {} has {} frames for {} states",
                    v.view_id,
                    v.len(),
                    n
                )));
            }
        }
        if self.attributes.len() != n {
            return Err(fail(format!(
                "{} attribute rows for {} states",
                self.attributes.len(),
                n
            )));
        }
        if self.actions.len() + 1 != n {
            return Err(fail(format!("{} actions for {} states", self.actions.len(), n)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: u32,
    pub length: usize,
    /// File name (relative to the trajectory directory) to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub env_config_digest: String,
    pub env: EnvConfig,
    pub trajectories: Vec<TrajectoryEntry>,
}

/// Digest over the canonical JSON serialisation of an environment config.
pub fn env_digest(env: &EnvConfig) -> String {
    digest_hex(&serde_json::to_vec(env).expect("env config serialises"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub env: EnvConfig,
    pub seed: u64,
    /// Sorted by id.
    pub trajectories: Vec<Trajectory>,
}

impl MultiViewDataset {
    /// Renders every camera of `env` for every rollout. Trajectory ids are the
    /// rollout indices.
    pub fn from_rollouts(env: &EnvConfig, seed: u64, rollouts: Vec<Rollout>) -> Result<Self> {
        env.validate()?;
        let trajectories = rollouts
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let views = env
                    .cameras
                    .iter()
                    .map(|cam| {
                        let mut data = Vec::with_capacity(r.states.len() * 3 * cam.width * cam.height);
                        for s in &r.states {
                            data.extend_from_slice(&render(s, cam, &env.physics).pixels);
                        }
                        FrameStack {
                            view_id: cam.view_id,
                            width: cam.width,
                            height: cam.height,
                            data,
                        }
                    })
                    .collect();
                let attributes = r.states.iter().map(attributes_from_state).collect();
                Trajectory {
                    id: i as u32,
                    views,
                    states: r.states,
                    actions: r.actions,
                    attributes,
                }
            })
            .collect();
        let ds = Self {
            env: env.clone(),
            seed,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// `count` random-action trajectories of `length` frames, every rollout seeded
    /// from the `data` substream of `seed`.
    pub fn generate_random(env: &EnvConfig, seed: u64, count: usize, length: usize) -> Result<Self> {
        let base = substream_seed(seed, "data");
        let rollouts = (0..count)
            .map(|i| {
                random_rollout(
                    substream_seed(base, &format!("traj/{i}")),
                    length,
                    &env.physics,
                    &env.init,
                    &env.actions,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rollouts(env, seed, rollouts)
    }

    pub fn views(&self) -> &[CameraSpec] {
        &self.env.cameras
    }

    pub fn num_frames(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: u32) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            t.check()?;
            if t.views.len() != self.env.cameras.len() {
                return Err(DatasetError::Unsynchronized {
                    id: t.id,
                    reason: format!("{} views for {} cameras", t.views.len(), self.env.cameras.len()),
                });
            }
        }
        if self.trajectories.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(DatasetError::Split("trajectory ids must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            env_config_digest: env_digest(&self.env),
            env: self.env.clone(),
            trajectories: self
                .trajectories
                .iter()
                .map(|t| TrajectoryEntry {
                    id: t.id,
                    length: t.len(),
                    files: BTreeMap::new(),
                })
                .collect(),
        }
    }

    /// Writes the dataset under `root`, which must not already hold a manifest.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<Manifest> {
        let root = root.as_ref();
        self.validate()?;
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        let mut manifest = self.manifest();
        for (t, entry) in self.trajectories.iter().zip(&mut manifest.trajectories) {
            let dir = root.join(traj_dir(t.id));
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for v in &t.views {
                let name = format!("view_{}.png", v.view_id);
                let bytes = v.to_png();
                let path = dir.join(&name);
                std::fs::write(&path, &bytes).map_err(io_err(&path))?;
                entry.files.insert(name, digest_hex(&bytes));
            }
            let labels = labels_csv(t);
            let path = dir.join("labels.csv");
            std::fs::write(&path, labels.as_bytes()).map_err(io_err(&path))?;
            entry.files.insert("labels.csv".into(), digest_hex(labels.as_bytes()));
        }
        let path = root.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, json).map_err(io_err(&path))?;
        Ok(manifest)
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let manifest = read_manifest(root)?;
        let repeat = manifest.env.physics.action_repeat as u64;
        let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
        for entry in &manifest.trajectories {
            let dir = root.join(traj_dir(entry.id));
            let load = |name: &str| -> Result<Vec<u8>> {
                let path = dir.join(name);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                let want = entry.files.get(name).ok_or_else(|| DatasetError::Corrupt {
                    path: path.clone(),
                    reason: "file not listed in manifest".into(),
                })?;
                if &digest_hex(&bytes) != want {
                    return Err(DatasetError::Checksum { path });
                }
                Ok(bytes)
            };
            let mut views = Vec::new();
            for cam in &manifest.env.cameras {
                let name = format!("view_{}.png", cam.view_id);
                let bytes = load(&name)?;
                let stack = FrameStack::from_png(&bytes, cam.view_id, cam.width, cam.height, entry.length).map_err(
                    |reason| DatasetError::Corrupt {
                        path: dir.join(&name),
                        reason,
                    },
                )?;
                views.push(stack);
            }
            let csv_path = dir.join("labels.csv");
            let text = String::from_utf8(load("labels.csv")?).map_err(|_| DatasetError::Corrupt {
                path: csv_path.clone(),
                reason: "not utf-8".into(),
            })?;
            let (states, actions, attributes) =
                parse_labels(&text, repeat).map_err(|reason| DatasetError::Corrupt {
                    path: csv_path.clone(),
                    reason,
                })?;
            if states.len() != entry.length {
                return Err(DatasetError::Unsynchronized {
                    id: entry.id,
                    reason: format!("labels have {} rows, manifest says {}", states.len(), entry.length),
                });
            }
            trajectories.push(Trajectory {
                id: entry.id,
                views,
                states,
                actions,
                attributes,
            });
        }
        trajectories.sort_by_key(|t| t.id);
        let ds = Self {
            env: manifest.env,
            seed: manifest.seed,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Trajectory-level partition `(train ids, validation ids)`.
    ///
    /// Trajectories are shuffled by `seed` and the shuffled prefix whose frame
    /// count is closest to `train_fraction` of the total becomes the training set.
    pub fn split_ids(&self, train_fraction: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
        if self.trajectories.len() < 2 {
            return Err(DatasetError::Split("need at least two trajectories".into()));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::Split(format!(
                "train fraction {train_fraction} leaves one side empty"
            )));
        }
        let mut order: Vec<&Trajectory> = self.trajectories.iter().collect();
        order.shuffle(&mut substream(seed, "split"));
        let target = train_fraction * self.num_frames() as f64;
        let mut best = (f64::INFINITY, 1);
        let mut acc = 0usize;
        for (k, t) in order.iter().enumerate().take(order.len() - 1) {
            acc += t.len();
            let err = (acc as f64 - target).abs();
            if err < best.0 {
                best = (err, k + 1);
            }
        }
        let mut train: Vec<u32> = order[..best.1].iter().map(|t| t.id).collect();
        let mut val: Vec<u32> = order[best.1..].iter().map(|t| t.id).collect();
        train.sort_unstable();
        val.sort_unstable();
        Ok((train, val))
    }

    pub fn split(self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (train_ids, _) = self.split_ids(train_fraction, seed)?;
        let (train, val): (Vec<_>, Vec<_>) = self
            .trajectories
            .into_iter()
            .partition(|t| train_ids.binary_search(&t.id).is_ok());
        let make = |trajectories| Self {
            env: self.env.clone(),
            seed: self.seed,
            trajectories,
        };
        Ok((make(train), make(val)))
    }
}

fn traj_dir(id: u32) -> String {
    format!("traj_{id:06}")
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| DatasetError::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.env_config_digest != env_digest(&manifest.env) {
        return Err(DatasetError::Checksum { path });
    }
    Ok(manifest)
}

fn labels_csv(t: &Trajectory) -> String {
    let mut out = String::with_capacity(t.len() * 96);
    out.push_str(LABEL_HEADER);
    out.push('\n');
    for (i, (s, a)) in t.states.iter().zip(&t.attributes).enumerate() {
        let action = t.actions.get(i).map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{i},{},{},{},{},{action},{},{},{},{},{}",
            s.x,
            s.x_dot,
            s.theta,
            s.theta_dot,
            a.cart_on_right as u8,
            a.pole_quadrant,
            a.pole_up as u8,
            a.cart_moving_right.code(),
            a.pole_rotating_ccw.code(),
        )
        .unwrap();
    }
    out
}

type Labels = (Vec<EnvState>, Vec<f64>, Vec<AttributeVector>);

fn parse_labels(text: &str, action_repeat: u64) -> Result<Labels, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LABEL_HEADER) {
        return Err("unexpected header".into());
    }
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut attributes = Vec::new();
    let rows: Vec<&str> = lines.collect();
    for (i, line) in rows.iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(format!("row {i}: expected 11 columns, got {}", cols.len()));
        }
        let f = |k: usize| cols[k].parse::<f64>().map_err(|e| format!("row {i} column {k}: {e}"));
        let int = |k: usize| cols[k].parse::<i8>().map_err(|e| format!("row {i} column {k}: {e}"));
        if cols[0].parse::<usize>().ok() != Some(i) {
            return Err(format!("row {i}: frame index out of order"));
        }
        states.push(EnvState {
            x: f(1)?,
            x_dot: f(2)?,
            theta: f(3)?,
            theta_dot: f(4)?,
            t: i as u64 * action_repeat,
        });
        let last = i + 1 == rows.len();
        match (cols[5].is_empty(), last) {
            (true, true) => {}
            (false, false) => actions.push(f(5)?),
            _ => return Err(format!("row {i}: action column must be empty exactly on the last row")),
        }
        let ternary = |k: usize| -> Result<Ternary, String> {
            Ternary::from_code(int(k)?).ok_or_else(|| format!("row {i} column {k}: bad motion label"))
        };
        let flag = |k: usize| -> Result<bool, String> {
            match int(k)? {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(format!("row {i} column {k}: bad flag")),
            }
        };
        let quadrant = int(7)?;
        if !(0..4).contains(&quadrant) {
            return Err(format!("row {i}: bad quadrant"));
        }
        attributes.push(AttributeVector {
            cart_on_right: flag(6)?,
            pole_quadrant: quadrant as u8,
            pole_up: flag(8)?,
            cart_moving_right: ternary(9)?,
            pole_rotating_ccw: ternary(10)?,
        });
    }
    Ok((states, actions, attributes))
}
