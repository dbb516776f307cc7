//! Regression probe on frozen embeddings: fit an MLP from embeddings to
//! (x, sin theta, cos theta, x_dot, theta_dot) and report per-target MSE plus the
//! position / motion / average aggregates. Also shows the identity sanity
//! check, where the labels themselves are the inputs.
//!
//! cargo run --release --example probe

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::model::{MfTcnConfig, MfTcnModel};
use mftcn::train::{train_probe, ProbeConfig, ProbeSet, PROBE_TARGETS};

fn main() -> anyhow::Result<()> {
    let ds = MultiViewDataset::generate_random(&EnvConfig::with_resolution(64, 32), 5, 12, 150)?;
    let (train, val) = ds.split(0.75, 5)?;
    let model = MfTcnModel::<f32>::new(
        MfTcnConfig {
            n_frames: 2,
            ..MfTcnConfig::default()
        },
        5,
    )?;
    let tr = ProbeSet::from_model(&model, &train, 0)?;
    let va = ProbeSet::from_model(&model, &val, 0)?;
    let cfg = ProbeConfig {
        epochs: 10,
        ..ProbeConfig::default()
    };
    let out = train_probe(&tr, &va, &cfg)?;
    println!("untrained embedding, best epoch {}:", out.best_epoch);
    for (name, mse) in PROBE_TARGETS.iter().zip(out.metrics.mse) {
        println!("  {name:>10}: {mse:.4}");
    }
    println!(
        "  position {:.4}  motion {:.4}  average {:.4}",
        out.metrics.position(),
        out.metrics.motion(),
        out.metrics.average()
    );
    let leak = train_probe(&tr.label_leak(), &va.label_leak(), &cfg)?;
    println!("labels as inputs: average MSE {:.2e}", leak.metrics.average());
    Ok(())
}
