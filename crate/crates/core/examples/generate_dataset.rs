//! Generate a small two-view random-action dataset, write it to disk, read it
//! back with checksum verification, and split it into train / validation.
//!
//! cargo run --example generate_dataset -- [out_dir]

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "dataset_out".into());
    let env = EnvConfig::with_resolution(64, 32);
    let ds = MultiViewDataset::generate_random(&env, 7, 12, 120)?;
    let manifest = ds.write(&out)?;
    println!(
        "wrote {} trajectories, {} frames per view, env digest {}",
        manifest.trajectories.len(),
        ds.num_frames(),
        &manifest.env_config_digest[..16]
    );
    let back = MultiViewDataset::read(&out)?;
    assert_eq!(back, ds);
    let (train, val) = back.split(0.75, 7)?;
    println!(
        "split: {} train frames, {} validation frames",
        train.num_frames(),
        val.num_frames()
    );
    Ok(())
}
