//! The mfTCN model: embed a rendered clip, then a whole trajectory in one
//! pass with cached per-frame features, and check they agree.
//!
//! cargo run --example embed_clips

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::model::{MfTcnConfig, MfTcnModel};

fn main() -> anyhow::Result<()> {
    let ds = MultiViewDataset::generate_random(&EnvConfig::with_resolution(64, 32), 3, 1, 40)?;
    let cfg = MfTcnConfig {
        n_frames: 4,
        stride: 2,
        ..MfTcnConfig::default()
    };
    let model = MfTcnModel::<f32>::new(cfg.clone(), 0)?;
    let frames = &ds.trajectories[0].views[0];
    let all = model.embed_sequence(frames)?;
    println!(
        "{} frames -> {} embeddings of dim {} (first at t = {})",
        frames.len(),
        all.shape()[0],
        all.shape()[1],
        cfg.window() - 1
    );
    let t = 20;
    let idx: Vec<usize> = (0..cfg.n_frames)
        .map(|j| t + 1 + j * cfg.stride - cfg.window())
        .collect();
    let single = model.embed_clip(&frames.tensor(&idx))?;
    let row = &all.data()[(t + 1 - cfg.window()) * cfg.embedding_dim..][..cfg.embedding_dim];
    let diff = single
        .data()
        .iter()
        .zip(row)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("clip ending at t={t} uses frames {idx:?}; max difference to the sequence pass {diff:.2e}");
    Ok(())
}
