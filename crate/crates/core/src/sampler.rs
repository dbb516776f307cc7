//! Time-contrastive batch construction.
//!
//! A batch holds `G` groups. Each group draws `P` timesteps from one trajectory
//! and one ordered pair of distinct views; anchors come from the first view,
//! positives from the second at the same timesteps. Within a group any two
//! timesteps are at least `alpha` apart and their lookback windows are disjoint.
//! Negatives are implicit: the other timesteps of the same group.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplerError {
    #[error("clip at t={t} needs a lookback window of {window} frames")]
    WindowBeforeStart { t: usize, window: usize },
    #[error("n_frames and stride must be at least 1")]
    BadClip,
    #[error(
        "cannot place {p} windows of {window} frames with gap {gap} in {length} frames \
         (need (P-1)*max(alpha, window) + window = {needed})"
    )]
    Infeasible {
        p: usize,
        window: usize,
        gap: usize,
        length: usize,
        needed: usize,
    },
    #[error("{0}")]
    Config(String),
}

type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipSpec {
    pub trajectory_id: u32,
    pub view_id: u32,
    /// Last (most recent) frame of the clip.
    pub t: usize,
    pub n_frames: usize,
    pub stride: usize,
}

impl ClipSpec {
    pub fn window(&self) -> usize {
        lookback_window(self.n_frames, self.stride)
    }

    /// First frame index covered by the window.
    pub fn start(&self) -> usize {
        self.t + 1 - self.window()
    }
}

pub fn lookback_window(n_frames: usize, stride: usize) -> usize {
    (n_frames - 1) * stride + 1
}

/// Ascending frame indices ending at `spec.t`.
pub fn clip_indices(spec: &ClipSpec) -> Result<Vec<usize>> {
    if spec.n_frames == 0 || spec.stride == 0 {
        return Err(SamplerError::BadClip);
    }
    let window = spec.window();
    if spec.t + 1 < window {
        return Err(SamplerError::WindowBeforeStart { t: spec.t, window });
    }
    Ok((0..spec.n_frames)
        .map(|j| spec.t - (spec.n_frames - 1 - j) * spec.stride)
        .collect())
}

/// Negatives available to each positive set: every clip of every view at the
/// other `p - 1` timesteps.
pub fn negatives_count(k_views: usize, p_timesteps: usize) -> usize {
    k_views * (p_timesteps - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_frames: usize,
    pub stride: usize,
    /// Minimum timestep gap; defaults to the lookback window plus two.
    #[serde(default)]
    pub alpha: Option<usize>,
    pub timesteps_per_traj: usize,
    pub trajs_per_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_frames: 4,
            stride: 1,
            alpha: None,
            timesteps_per_traj: 8,
            trajs_per_batch: 4,
        }
    }
}

impl SamplerConfig {
    pub fn window(&self) -> usize {
        lookback_window(self.n_frames, self.stride)
    }

    pub fn alpha(&self) -> usize {
        self.alpha.unwrap_or(self.window() + 2)
    }

    /// Minimal separation between two timesteps of one group.
    pub fn min_gap(&self) -> usize {
        self.alpha().max(self.window())
    }

    /// Shortest trajectory that can host one group.
    pub fn min_length(&self) -> usize {
        (self.timesteps_per_traj - 1) * self.min_gap() + self.window()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.stride == 0 {
            return Err(SamplerError::BadClip);
        }
        if self.timesteps_per_traj < 2 {
            return Err(SamplerError::Config("need at least two timesteps per group".into()));
        }
        if self.trajs_per_batch == 0 {
            return Err(SamplerError::Config("need at least one group per batch".into()));
        }
        Ok(())
    }

    fn check_length(&self, length: usize) -> Result<()> {
        let needed = self.min_length();
        if length < needed {
            return Err(SamplerError::Infeasible {
                p: self.timesteps_per_traj,
                window: self.window(),
                gap: self.alpha(),
                length,
                needed,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<ClipSpec>,
    /// Index-aligned with `anchors`.
    pub positives: Vec<ClipSpec>,
    /// Row ranges of each group.
    pub groups: Vec<Range<usize>>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `p` timesteps in `[window - 1, length)` pairwise at least `gap` apart, sorted,
/// drawn uniformly over all such placements. Sorted valid placements correspond
/// one-to-one with `p`-subsets of a range shortened by `(p - 1) * (gap - 1)`.
fn place_timesteps<R: Rng + ?Sized>(rng: &mut R, length: usize, window: usize, gap: usize, p: usize) -> Vec<usize> {
    let slots = length + 1 - window - (p - 1) * (gap - 1);
    let mut picks = rand::seq::index::sample(rng, slots, p).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .enumerate()
        .map(|(i, u)| window - 1 + u + i * (gap - 1))
        .collect()
}

pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &MultiViewDataset,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<ContrastiveBatch> {
    cfg.validate()?;
    let views: Vec<u32> = dataset.views().iter().map(|c| c.view_id).collect();
    if views.len() < 2 {
        return Err(SamplerError::Config("dataset needs at least two views".into()));
    }
    if dataset.trajectories.is_empty() {
        return Err(SamplerError::Config("dataset has no trajectories".into()));
    }
    let longest = dataset.trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    cfg.check_length(longest)?;
    let eligible: Vec<_> = dataset
        .trajectories
        .iter()
        .filter(|t| t.len() >= cfg.min_length())
        .collect();

    let g = cfg.trajs_per_batch;
    let picks: Vec<_> = if eligible.len() >= g {
        eligible.choose_multiple(rng, g).copied().collect()
    } else {
        (0..g).map(|_| *eligible.choose(rng).unwrap()).collect()
    };

    let p = cfg.timesteps_per_traj;
    let mut batch = ContrastiveBatch {
        anchors: Vec::with_capacity(g * p),
        positives: Vec::with_capacity(g * p),
        groups: Vec::with_capacity(g),
    };
    for traj in picks {
        let mut pair = views.clone();
        pair.shuffle(rng);
        let (va, vb) = (pair[0], pair[1]);
        let times = place_timesteps(rng, traj.len(), cfg.window(), cfg.min_gap(), p);
        let start = batch.anchors.len();
        for t in times {
            let clip = |view_id| ClipSpec {
                trajectory_id: traj.id,
                view_id,
                t,
                n_frames: cfg.n_frames,
                stride: cfg.stride,
            };
            batch.anchors.push(clip(va));
            batch.positives.push(clip(vb));
        }
        batch.groups.push(start..batch.anchors.len());
    }
    Ok(batch)
}

/// Supervisory relations of one group, enumerated over unordered clip pairs:
/// `(positive pairs, dissimilar pairs)`. Views other than the sampled pair are
/// counted as if present, so `k_views` may exceed two.
pub fn enumerate_relations(batch: &ContrastiveBatch, group: usize, k_views: usize) -> (usize, usize) {
    let rows = batch.groups[group].clone();
    let clips: Vec<(usize, usize)> = rows
        .flat_map(|i| (0..k_views).map(move |v| (batch.anchors[i].t, v)))
        .collect();
    let mut positive = 0;
    let mut dissimilar = 0;
    for (i, a) in clips.iter().enumerate() {
        for b in &clips[i + 1..] {
            if a.0 == b.0 {
                positive += 1;
            } else {
                dissimilar += 1;
            }
        }
    }
    (positive, dissimilar)
}

/// Frames of `clips` stacked consecutively, `[clips.len() * n, 3, H, W]`.
pub fn clip_frames(dataset: &MultiViewDataset, clips: &[ClipSpec]) -> Result<crate::numeric::Tensor<f32>> {
    let mut parts = Vec::with_capacity(clips.len());
    for c in clips {
        let traj = dataset
            .get(c.trajectory_id)
            .ok_or_else(|| SamplerError::Config(format!("no trajectory {}", c.trajectory_id)))?;
        let view = traj
            .views
            .iter()
            .find(|v| v.view_id == c.view_id)
            .ok_or_else(|| SamplerError::Config(format!("no view {}", c.view_id)))?;
        let idx = clip_indices(c)?;
        if idx.last().is_some_and(|&t| t >= traj.len()) {
            return Err(SamplerError::Config(format!(
                "clip at t={} beyond trajectory {}",
                c.t, traj.id
            )));
        }
        parts.push(view.tensor(&idx));
    }
    if parts.is_empty() {
        return Err(SamplerError::Config("no clips".into()));
    }
    let shape = parts[0].shape().to_vec();
    let total = parts.len() * shape[0];
    let data: Vec<f32> = parts.into_iter().flat_map(|t| t.into_data()).collect();
    Ok(crate::numeric::Tensor::new(vec![total, shape[1], shape[2], shape[3]], data).expect("clip shapes agree"))
}
