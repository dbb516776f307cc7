//! Reverse-mode autodiff in a few lines: build a small conv + linear graph in
//! f64, compare analytic gradients to central differences.
//!
//! cargo run --example gradcheck

use mftcn::numeric::{gradcheck, Graph, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> anyhow::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut randn = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let kernel = randn(vec![4, 3, 3, 3]);
    let bias = randn(vec![4]);
    let fc = randn(vec![2, 4]);
    let fc_b = randn(vec![2]);
    let image = randn(vec![1, 3, 8, 8]);

    let err = gradcheck(
        |g: &mut Graph<f64>, x| {
            let w = g.constant(kernel.clone());
            let b = g.constant(bias.clone());
            let h = g.conv2d(x, w, b, 2, 1)?;
            let h = g.tanh(h);
            let h = g.spatial_mean(h)?;
            let (fw, fb) = (g.constant(fc.clone()), g.constant(fc_b.clone()));
            let y = g.linear(h, fw, fb)?;
            g.softmax_cross_entropy_rows(y, &[1])
        },
        &image,
        1e-5,
    )?;
    println!("max relative gradient error w.r.t. the input image: {err:.3e}");
    Ok(())
}
