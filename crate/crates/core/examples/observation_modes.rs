//! The four PPO observation sources side by side on the same episode start:
//! true state, noise, raw pixels and a frozen mfTCN embedding. Frame-based
//! sources only ever see rendered images.
//!
//! cargo run --release --example observation_modes

use std::sync::Arc;

use mftcn::envsim::{control_step, render, EnvState, Task};
use mftcn::model::{MfTcnConfig, MfTcnModel};
use mftcn::rl::{ObservationSource, PolicyEnv};

fn main() -> anyhow::Result<()> {
    let env = PolicyEnv::new(Task::Swingup, 64, 32);
    let model = Arc::new(MfTcnModel::<f32>::new(
        MfTcnConfig {
            n_frames: 4,
            stride: 2,
            ..MfTcnConfig::default()
        },
        0,
    )?);
    let mut sources = [
        ("true_state", ObservationSource::true_state()),
        ("random_state", ObservationSource::random_state(1)),
        ("pixels", ObservationSource::pixels(64, 32)),
        ("embedding", ObservationSource::embedding(model)),
    ];
    let mut state = EnvState::new(0.0, 0.0, std::f64::consts::PI - 0.3, 0.0);
    for step in 0..4 {
        for (name, src) in sources.iter_mut() {
            let obs = match src {
                ObservationSource::State(o) if step == 0 => o.reset(&state),
                ObservationSource::State(o) => o.observe(&state),
                ObservationSource::Frames(o) => {
                    let frame = render(&state, &env.camera, &env.physics);
                    if step == 0 {
                        o.reset(&frame)
                    } else {
                        o.observe(&frame)
                    }
                }
            };
            let head: Vec<String> = obs.iter().take(3).map(|v| format!("{v:+.3}")).collect();
            println!("step {step} {name:>12}: dim {:5} first {}", obs.len(), head.join(" "));
        }
        state = control_step(&state, 1.0, &env.physics)?;
    }
    Ok(())
}
