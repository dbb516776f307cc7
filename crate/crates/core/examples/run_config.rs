//! The declarative run config behind the `mftcn` command line: defaults,
//! a TOML file and `key=value` overrides resolve into one config whose
//! digest names the run directory.
//!
//! cargo run --example run_config -- [config.toml] [key=value ...]

use std::path::PathBuf;

use mftcn::cli::RunConfig;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let file = args.next().filter(|a| !a.contains('=')).map(PathBuf::from);
    let mut overrides: Vec<String> = args.collect();
    if overrides.is_empty() {
        overrides = vec!["model.n_frames=4".into(), "sampler.n_frames=4".into(), "seed=7".into()];
    }
    let cfg = RunConfig::resolve(file.as_deref(), &overrides)?;
    print!("{}", cfg.to_toml());
    println!("# digest {}", cfg.digest());
    println!("# lookback window {} frames", cfg.model.window());
    Ok(())
}
