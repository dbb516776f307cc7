mod common;

use common::{assert_close, naive_conv2d, naive_conv3d, randn_vec, rng};
use mftcn::numeric::{Graph, NumericError, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut r = rng(1);
    let x = t(&[1, 3, 4, 5], randn_vec(&mut r, 60));
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(t(&[3, 3, 1, 1], w));
    let bv = g.constant(Tensor::zeros(vec![3]));
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_all_ones_sums_to_nine() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv2d_matches_loop_oracle() {
    for (seed, stride, pad) in [(2, 1, 0), (3, 2, 1), (4, 1, 1), (5, 3, 2)] {
        let mut r = rng(seed);
        let x = randn_vec(&mut r, 2 * 3 * 8 * 8);
        let w = randn_vec(&mut r, 4 * 3 * 3 * 3);
        let b = randn_vec(&mut r, 4);
        let (want, shape) = naive_conv2d(&x, [2, 3, 8, 8], &w, [4, 3, 3, 3], &b, stride, pad);
        let mut g = Graph::new();
        let xv = g.constant(t(&[2, 3, 8, 8], x));
        let wv = g.constant(t(&[4, 3, 3, 3], w));
        let bv = g.constant(t(&[4], b));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), &shape);
        assert_close(g.value(y).data(), &want, 1e-10, "conv2d");
    }
}

#[test]
fn conv2d_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let msg = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    let big = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
    assert!(g.conv2d(x, big, b, 1, 0).is_err());
}

#[test]
fn conv3d_single_frame_equals_conv2d() {
    let mut r = rng(6);
    let x = randn_vec(&mut r, 2 * 2 * 5 * 6);
    let w = randn_vec(&mut r, 3 * 2 * 9);
    let b = randn_vec(&mut r, 3);
    let mut g = Graph::new();
    let x2 = g.constant(t(&[2, 2, 5, 6], x.clone()));
    let w2 = g.constant(t(&[3, 2, 3, 3], w.clone()));
    let bv = g.constant(t(&[3], b));
    let y2 = g.conv2d(x2, w2, bv, 1, 1).unwrap();
    let x3 = g.constant(t(&[2, 2, 1, 5, 6], x));
    let w3 = g.constant(t(&[3, 2, 1, 3, 3], w));
    let y3 = g.conv3d(x3, w3, bv, 1).unwrap();
    assert_eq!(g.value(y3).shape(), &[2, 3, 1, 5, 6]);
    assert_eq!(g.value(y2).data(), g.value(y3).data());
}

#[test]
fn conv3d_temporal_delta_picks_middle_frame() {
    let mut r = rng(7);
    let (c, tt, h, w) = (2, 3, 4, 4);
    let x = randn_vec(&mut r, c * tt * h * w);
    let w2 = randn_vec(&mut r, c * 9);
    let mut w3 = vec![0.0; c * 3 * 9];
    for ci in 0..c {
        for k in 0..9 {
            w3[(ci * 3 + 1) * 9 + k] = w2[ci * 9 + k];
        }
    }
    let middle: Vec<f64> = (0..c)
        .flat_map(|ci| x[(ci * tt + 1) * h * w..(ci * tt + 2) * h * w].to_vec())
        .collect();
    let mut g = Graph::new();
    let b = g.constant(t(&[1], vec![0.25]));
    let xv = g.constant(t(&[1, c, tt, h, w], x));
    let wv = g.constant(t(&[1, c, 3, 3, 3], w3));
    let y3 = g.conv3d(xv, wv, b, 1).unwrap();
    let mv = g.constant(t(&[1, c, h, w], middle));
    let w2v = g.constant(t(&[1, c, 3, 3], w2));
    let y2 = g.conv2d(mv, w2v, b, 1, 1).unwrap();
    assert_close(g.value(y3).data(), g.value(y2).data(), 1e-12, "delta kernel");
}

#[test]
fn conv3d_matches_loop_oracle() {
    for (seed, kt, pad) in [(8, 3, 1), (9, 2, 0), (10, 1, 1)] {
        let mut r = rng(seed);
        let x = randn_vec(&mut r, 2 * 3 * 16);
        let w = randn_vec(&mut r, 2 * 2 * kt * 9);
        let b = randn_vec(&mut r, 2);
        let (want, shape) = naive_conv3d(&x, [1, 2, 3, 4, 4], &w, [2, 2, kt, 3, 3], &b, pad);
        let mut g = Graph::new();
        let xv = g.constant(t(&[1, 2, 3, 4, 4], x));
        let wv = g.constant(t(&[2, 2, kt, 3, 3], w));
        let bv = g.constant(t(&[2], b));
        let y = g.conv3d(xv, wv, bv, pad).unwrap();
        assert_eq!(g.value(y).shape(), &shape);
        assert_close(g.value(y).data(), &want, 1e-10, "conv3d");
    }
}

#[test]
fn conv3d_rejects_kernel_longer_than_clip() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![1, 1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![1]));
    assert!(matches!(g.conv3d(x, w, b, 1), Err(NumericError::InvalidArgument(_))));
}

#[test]
fn small_op_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], vec![-1.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    let c = g.constant(Tensor::full(vec![2, 3, 4, 5], 0.7));
    let m = g.spatial_mean(c).unwrap();
    assert!(g.value(m).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let logits = g.constant(t(&[1, 2], vec![1.0, 0.0]));
    let ce = g.softmax_cross_entropy_rows(logits, &[0]).unwrap();
    let e = std::f64::consts::E;
    assert!((g.value(ce).item() - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
    assert!((g.value(ce).item() - 0.31326).abs() < 1e-5);
}

#[test]
fn every_op_passes_gradcheck_on_twenty_instances() {
    let mut worst = std::collections::BTreeMap::new();
    for seed in 0..20 {
        for (name, err) in common::opsuite::run(seed) {
            let w = worst.entry(name).or_insert(0.0f64);
            *w = w.max(err);
        }
    }
    for (name, err) in &worst {
        assert!(*err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut r = rng(11);
    let x = t(&[2, 2, 5, 5], randn_vec(&mut r, 100));
    let w = t(&[3, 2, 3, 3], randn_vec(&mut r, 54));
    let b = t(&[3], randn_vec(&mut r, 3));
    let target = t(&[2, 3], randn_vec(&mut r, 6));
    let build = |g: &mut Graph<f64>, which: u8| {
        let wv = g.variable(w.clone());
        let xv = g.constant(x.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let y = g.relu(y);
        let m = g.spatial_mean(y).unwrap();
        let tv = g.constant(target.clone());
        let l1 = g.mse_loss(m, tv).unwrap();
        let l2 = g.l2_penalty(m).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        (wv, loss)
    };
    let grad = |which| {
        let mut g = Graph::new();
        let (wv, loss) = build(&mut g, which);
        g.backward(loss).unwrap().wrt(&g, wv)
    };
    let (g1, g2, g12) = (grad(0), grad(1), grad(2));
    let summed: Vec<f64> = g1.data().iter().zip(g2.data()).map(|(a, b)| a + b).collect();
    assert_close(g12.data(), &summed, 1e-10, "linearity");
}

#[test]
fn nodes_off_the_loss_path_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(t(&[2], vec![1.0, 2.0]));
    let unused = g.variable(t(&[3], vec![1.0, 2.0, 3.0]));
    let _dangling = g.exp(unused);
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(&g, unused).data(), &[0.0; 3]);
}
