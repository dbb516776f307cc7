//! Merge per-run evaluation records into one results table (CSV, JSONL and
//! an aligned text table), one row per (embedding dim, lookback) setting.
//!
//! cargo run --example results_table -- [out_dir]

use mftcn::eval::{table_report, to_text, AlignmentReport, KnnRecord, ProbeRecord, ResultRow};
use mftcn::train::ProbeMetrics;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "table_out".into());
    std::fs::create_dir_all(&out)?;
    let base = |n| ResultRow {
        embedding_dim: 32,
        n_frames: n,
        stride: 1,
        probe: None,
        knn: None,
        alignment: None,
    };
    let probe = |mse| ProbeRecord::from(ProbeMetrics { mse });
    let rows = vec![
        ResultRow {
            probe: Some(probe([0.02, 0.01, 0.03, 0.45, 0.10])),
            ..base(1)
        },
        ResultRow {
            knn: Some(KnnRecord {
                error: [5.0, 8.0, 12.0, 30.0, 28.0],
                static_error: 25.0 / 3.0,
                motion_error: 29.0,
            }),
            ..base(1)
        },
        ResultRow {
            probe: Some(probe([0.02, 0.01, 0.03, 0.09, 0.04])),
            alignment: Some(AlignmentReport {
                a_to_b: 0.06,
                b_to_a: 0.08,
            }),
            ..base(4)
        },
    ];
    let merged = table_report(rows, std::path::Path::new(&out))?;
    print!("{}", to_text(&merged));
    println!("wrote {out}/table.csv, table.jsonl, table.txt");
    Ok(())
}
