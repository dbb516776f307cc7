//! Draw one time-contrastive batch and list its clips: anchors from one view,
//! time-aligned positives from another, alpha-separated within each group.
//!
//! cargo run --example sample_batch

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::sampler::{clip_indices, sample_batch, SamplerConfig};
use mftcn::seeding::substream;

fn main() -> anyhow::Result<()> {
    let ds = MultiViewDataset::generate_random(&EnvConfig::with_resolution(32, 16), 1, 4, 80)?;
    let cfg = SamplerConfig {
        n_frames: 3,
        stride: 2,
        alpha: None,
        timesteps_per_traj: 4,
        trajs_per_batch: 2,
    };
    cfg.validate()?;
    println!("window {} frames, minimum gap {}", cfg.window(), cfg.min_gap());
    let batch = sample_batch(&ds, &mut substream(1, "example"), &cfg)?;
    for (g, range) in batch.groups.iter().enumerate() {
        println!("group {g}:");
        for i in range.clone() {
            let (a, p) = (&batch.anchors[i], &batch.positives[i]);
            println!(
                "  traj {} t={:3}  anchor view {} frames {:?}  positive view {} frames {:?}",
                a.trajectory_id,
                a.t,
                a.view_id,
                clip_indices(a)?,
                p.view_id,
                clip_indices(p)?
            );
        }
    }
    Ok(())
}
