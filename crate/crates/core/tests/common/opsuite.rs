//! Finite-difference sweep over every differentiable graph operation.

use mftcn::numeric::{gradcheck, Graph, Result, Tensor, Var};
use rand::Rng;

use super::{randn_vec, rng};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts a non-scalar node with fixed random weights so gradcheck sees a scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0xABCD);
    let w = g.constant(t(&shape, randn_vec(&mut r, n)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Relative gradcheck errors `(op name, error)` for one random instance of every op.
pub fn run(seed: u64) -> Vec<(&'static str, f64)> {
    let eps = 1e-5;
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut dims = |lo: usize, hi: usize| r.random_range(lo..=hi);

    // conv2d: input, weight, bias each checked
    let (n, c, h, w, k) = (dims(1, 2), dims(1, 3), dims(3, 6), dims(3, 6), dims(1, 3));
    let (kh, stride, pad) = (dims(1, 3), dims(1, 2), dims(0, 1));
    let mut rr = rng(seed + 1);
    let x = t(&[n, c, h, w], randn_vec(&mut rr, n * c * h * w));
    let wt = t(&[k, c, kh, kh], randn_vec(&mut rr, k * c * kh * kh));
    let b = t(&[k], randn_vec(&mut rr, k));
    for which in 0..3 {
        let (x, wt, b) = (x.clone(), wt.clone(), b.clone());
        let target = [&x, &wt, &b][which].clone();
        let e = gradcheck(
            move |g, v| {
                let xv = if which == 0 { v } else { g.constant(x.clone()) };
                let wv = if which == 1 { v } else { g.constant(wt.clone()) };
                let bv = if which == 2 { v } else { g.constant(b.clone()) };
                let y = g.conv2d(xv, wv, bv, stride, pad)?;
                project(g, y, seed)
            },
            &target,
            eps,
        )
        .unwrap();
        out.push((["conv2d.input", "conv2d.weight", "conv2d.bias"][which], e));
    }

    // conv3d
    let (tt, kt) = (dims(1, 4), 0);
    let kt = dims(1, tt.max(1)).max(kt);
    let x = t(&[n, c, tt, h, w], randn_vec(&mut rr, n * c * tt * h * w));
    let wt = t(&[k, c, kt, 3, 3], randn_vec(&mut rr, k * c * kt * 9));
    for which in 0..3 {
        let (x, wt, b) = (x.clone(), wt.clone(), b.clone());
        let target = [&x, &wt, &b][which].clone();
        let e = gradcheck(
            move |g, v| {
                let xv = if which == 0 { v } else { g.constant(x.clone()) };
                let wv = if which == 1 { v } else { g.constant(wt.clone()) };
                let bv = if which == 2 { v } else { g.constant(b.clone()) };
                let y = g.conv3d(xv, wv, bv, 1)?;
                project(g, y, seed)
            },
            &target,
            eps,
        )
        .unwrap();
        out.push((["conv3d.input", "conv3d.weight", "conv3d.bias"][which], e));
    }

    // linear
    let (rows, inp, outd) = (dims(1, 4), dims(1, 5), dims(1, 4));
    let x = t(&[rows, inp], randn_vec(&mut rr, rows * inp));
    let wt = t(&[outd, inp], randn_vec(&mut rr, outd * inp));
    let b = t(&[outd], randn_vec(&mut rr, outd));
    for which in 0..3 {
        let (x, wt, b) = (x.clone(), wt.clone(), b.clone());
        let target = [&x, &wt, &b][which].clone();
        let e = gradcheck(
            move |g, v| {
                let xv = if which == 0 { v } else { g.constant(x.clone()) };
                let wv = if which == 1 { v } else { g.constant(wt.clone()) };
                let bv = if which == 2 { v } else { g.constant(b.clone()) };
                let y = g.linear(xv, wv, bv)?;
                project(g, y, seed)
            },
            &target,
            eps,
        )
        .unwrap();
        out.push((["linear.input", "linear.weight", "linear.bias"][which], e));
    }

    // matmul_nt, both sides
    let (m, kk, nn) = (dims(1, 4), dims(1, 4), dims(1, 4));
    let a = t(&[m, kk], randn_vec(&mut rr, m * kk));
    let bm = t(&[nn, kk], randn_vec(&mut rr, nn * kk));
    for which in 0..2 {
        let (a, bm) = (a.clone(), bm.clone());
        let target = if which == 0 { a.clone() } else { bm.clone() };
        let e = gradcheck(
            move |g, v| {
                let av = if which == 0 { v } else { g.constant(a.clone()) };
                let bv = if which == 1 { v } else { g.constant(bm.clone()) };
                let y = g.matmul_nt(av, bv)?;
                project(g, y, seed)
            },
            &target,
            eps,
        )
        .unwrap();
        out.push((["matmul_nt.lhs", "matmul_nt.rhs"][which], e));
    }

    // relu, away from the kink by at least 10 * eps
    let len = dims(2, 12);
    let xs: Vec<f64> = randn_vec(&mut rr, len)
        .into_iter()
        .map(|v| if v.abs() < 10.0 * eps { v.signum() * 0.1 + v } else { v })
        .collect();
    let e = gradcheck(
        |g, v| {
            let y = g.relu(v);
            project(g, y, seed)
        },
        &t(&[len], xs.clone()),
        eps,
    )
    .unwrap();
    out.push(("relu", e));

    let e = gradcheck(
        |g, v| {
            let y = g.tanh(v);
            project(g, y, seed)
        },
        &t(&[len], xs.clone()),
        eps,
    )
    .unwrap();
    out.push(("tanh", e));

    let e = gradcheck(
        |g, v| {
            let y = g.exp(v);
            project(g, y, seed)
        },
        &t(&[len], xs.clone()),
        eps,
    )
    .unwrap();
    out.push(("exp", e));

    let e = gradcheck(
        |g, v| {
            let y = g.scale(v, -1.7);
            let y = g.add_scalar(y, 0.3);
            project(g, y, seed)
        },
        &t(&[len], xs.clone()),
        eps,
    )
    .unwrap();
    out.push(("scale+add_scalar", e));

    // clamp away from the bounds
    let cl: Vec<f64> = xs
        .iter()
        .map(|&v| if (v.abs() - 0.5).abs() < 10.0 * eps { v * 1.1 } else { v })
        .collect();
    let e = gradcheck(
        |g, v| {
            let y = g.clamp(v, -0.5, 0.5);
            project(g, y, seed)
        },
        &t(&[len], cl),
        eps,
    )
    .unwrap();
    out.push(("clamp", e));

    // binary ops, gradient w.r.t. the left operand with the right fixed and vice versa
    let other = randn_vec(&mut rr, len);
    let separated: Vec<f64> = xs
        .iter()
        .zip(&other)
        .map(|(&a, &b)| if (a - b).abs() < 10.0 * eps { a + 0.1 } else { a })
        .collect();
    type BinOp = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&'static str, BinOp); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("minimum", |g, a, b| g.minimum(a, b)),
    ];
    for (name, op) in ops {
        let fixed = t(&[len], other.clone());
        let e1 = gradcheck(
            |g, v| {
                let c = g.constant(fixed.clone());
                let y = op(g, v, c)?;
                project(g, y, seed)
            },
            &t(&[len], separated.clone()),
            eps,
        )
        .unwrap();
        let e2 = gradcheck(
            |g, v| {
                let c = g.constant(t(&[len], separated.clone()));
                let y = op(g, c, v)?;
                project(g, y, seed)
            },
            &fixed,
            eps,
        )
        .unwrap();
        out.push((name, e1.max(e2)));
    }

    // shape ops
    let (d0, d1, d2) = (dims(1, 3), dims(1, 3), dims(1, 3));
    let x = t(&[d0, d1, d2], randn_vec(&mut rr, d0 * d1 * d2));
    let e = gradcheck(
        |g, v| {
            let y = g.permute(v, &[2, 0, 1])?;
            let y = g.reshape(y, &[d2 * d0, d1])?;
            project(g, y, seed)
        },
        &x,
        eps,
    )
    .unwrap();
    out.push(("permute+reshape", e));

    let e = gradcheck(
        |g, v| {
            let y = g.slice_rows(v, d0 / 2, d0)?;
            project(g, y, seed)
        },
        &x,
        eps,
    )
    .unwrap();
    out.push(("slice_rows", e));

    let x4 = t(&[d0, d1, h, w], randn_vec(&mut rr, d0 * d1 * h * w));
    let e = gradcheck(
        |g, v| {
            let y = g.spatial_mean(v)?;
            project(g, y, seed)
        },
        &x4,
        eps,
    )
    .unwrap();
    out.push(("spatial_mean", e));

    // reductions and losses
    let e = gradcheck(|g, v| g.mean(v), &x, eps).unwrap();
    out.push(("mean", e));
    let target = t(&[d0, d1, d2], randn_vec(&mut rr, d0 * d1 * d2));
    let e = gradcheck(
        |g, v| {
            let c = g.constant(target.clone());
            g.mse_loss(v, c)
        },
        &x,
        eps,
    )
    .unwrap();
    out.push(("mse_loss", e));

    let (rows, classes) = (dims(1, 5), dims(2, 5));
    let targets: Vec<usize> = (0..rows).map(|_| r_index(&mut rr, classes)).collect();
    let logits = t(&[rows, classes], randn_vec(&mut rr, rows * classes));
    let e = gradcheck(|g, v| g.softmax_cross_entropy_rows(v, &targets), &logits, eps).unwrap();
    out.push(("softmax_cross_entropy_rows", e));

    let e = gradcheck(|g, v| g.l2_penalty(v), &logits, eps).unwrap();
    out.push(("l2_penalty", e));

    let act_dim = dims(1, 2);
    let mean = t(&[rows, act_dim], randn_vec(&mut rr, rows * act_dim));
    let log_std = t(
        &[act_dim],
        randn_vec(&mut rr, act_dim).into_iter().map(|v| 0.5 * v).collect(),
    );
    let actions = t(&[rows, act_dim], randn_vec(&mut rr, rows * act_dim));
    let e1 = gradcheck(
        |g, v| {
            let s = g.constant(log_std.clone());
            let y = g.gaussian_log_prob(v, s, actions.clone())?;
            project(g, y, seed)
        },
        &mean,
        eps,
    )
    .unwrap();
    let e2 = gradcheck(
        |g, v| {
            let m = g.constant(mean.clone());
            let y = g.gaussian_log_prob(m, v, actions.clone())?;
            project(g, y, seed)
        },
        &log_std,
        eps,
    )
    .unwrap();
    out.push(("gaussian_log_prob", e1.max(e2)));

    out
}

fn r_index(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> usize {
    r.random_range(0..n)
}
