//! The multi-view n-pairs loss on hand-made embeddings: aligned pairs give a
//! low loss, shuffled positives a high one, identical rows exactly log P.
//!
//! cargo run --example npairs_loss
#![allow(clippy::single_range_in_vec_init)]

use mftcn::loss::{npairs_loss, DEFAULT_L2_REG};
use mftcn::numeric::{Graph, Tensor};

fn loss(anchors: &[[f64; 3]], positives: &[[f64; 3]]) -> anyhow::Result<f64> {
    let p = anchors.len();
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![p, 3], anchors.concat())?);
    let b = g.constant(Tensor::new(vec![p, 3], positives.concat())?);
    let l = npairs_loss(&mut g, a, b, &[0..p], DEFAULT_L2_REG)?;
    Ok(g.value(l).item())
}

fn main() -> anyhow::Result<()> {
    let a = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let shuffled = [a[1], a[2], a[0]];
    println!("aligned  {:.4}", loss(&a, &a)?);
    println!("shuffled {:.4}", loss(&a, &shuffled)?);
    let zeros = [[0.0; 3]; 3];
    println!("uniform  {:.4} (log 3 = {:.4})", loss(&zeros, &zeros)?, 3f64.ln());
    Ok(())
}
