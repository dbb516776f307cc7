//! Cart-pole physics and rendering: roll out random actions, print the state
//! and attributes every few steps, and save one frame per camera as PNG.
//!
//! cargo run --example simulate -- [out_dir]

use mftcn::envsim::{attributes_from_state, random_rollout, render, EnvConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "simulate_out".into());
    std::fs::create_dir_all(&out)?;
    let env = EnvConfig::with_resolution(128, 64);
    let roll = random_rollout(42, 101, &env.physics, &env.init, &env.actions)?;
    for (t, s) in roll.states.iter().enumerate().step_by(20) {
        let a = attributes_from_state(s);
        println!(
            "t={t:3} x={:+.3} theta={:+.3} theta_dot={:+.3} attributes={:?}",
            s.x,
            s.wrapped_theta(),
            s.theta_dot,
            a.classes()
        );
    }
    let last = roll.states.last().unwrap();
    for cam in &env.cameras {
        let frame = render(last, cam, &env.physics);
        let path = format!("{out}/view_{}.png", cam.view_id);
        // Planar [3, H, W] to interleaved RGB.
        let plane = frame.width * frame.height;
        let rgb: Vec<u8> = (0..plane)
            .flat_map(|i| (0..3).map(move |c| c * plane + i))
            .map(|i| frame.pixels[i])
            .collect();
        image::save_buffer(
            &path,
            &rgb,
            frame.width as u32,
            frame.height as u32,
            image::ColorType::Rgb8,
        )?;
        println!("wrote {path}");
    }
    Ok(())
}
