//! Retrieval metrics on embeddings: nearest-neighbour attribute errors
//! (static and motion groups) and cross-view temporal alignment error.
//!
//! cargo run --release --example knn_alignment

use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::eval::{alignment_report, embed_dataset, knn_classify, KnnReport};
use mftcn::model::{MfTcnConfig, MfTcnModel};

fn main() -> anyhow::Result<()> {
    let ds = MultiViewDataset::generate_random(&EnvConfig::with_resolution(64, 32), 9, 6, 120)?;
    let model = MfTcnModel::<f32>::new(
        MfTcnConfig {
            n_frames: 3,
            ..MfTcnConfig::default()
        },
        9,
    )?;
    let view0 = embed_dataset(&model, &ds, 0)?;
    let view1 = embed_dataset(&model, &ds, 1)?;
    let knn = knn_classify(&view0)?;
    for (name, err) in KnnReport::NAMES.iter().zip(knn.error) {
        println!("{name:>18}: {err:5.1}% error");
    }
    println!("static {:.1}%, motion {:.1}%", knn.static_error(), knn.motion_error());
    let align = alignment_report(&view0, &view1)?;
    println!(
        "alignment error {:.3} (view 0 -> 1: {:.3}, 1 -> 0: {:.3}); random retrieval is about 1/3",
        align.mean(),
        align.a_to_b,
        align.b_to_a
    );
    Ok(())
}
