//! Independent reference implementations used by the integration suites.
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct six-loop 2-D convolution (plus the batch loop).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [k, _, kh, kw]: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for s in 0..n {
        for o in 0..k {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((s * k + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, k, oh, ow])
}

/// Direct eight-loop 3-D convolution: valid in time, unit stride, spatial zero padding.
pub fn naive_conv3d(
    x: &[f64],
    [n, c, t, h, w]: [usize; 5],
    wt: &[f64],
    [k, _, kt, kh, kw]: [usize; 5],
    b: &[f64],
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let ot = t - kt + 1;
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0; n * k * ot * oh * ow];
    for s in 0..n {
        for o in 0..k {
            for tt in 0..ot {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for dt in 0..kt {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let iy = (y + dy) as isize - pad as isize;
                                        let ix = (xx + dx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        acc += x[(((s * c + ci) * t + tt + dt) * h + iy as usize) * w + ix as usize]
                                            * wt[(((o * c + ci) * kt + dt) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        out[(((s * k + o) * ot + tt) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, k, ot, oh, ow])
}

/// Explicit exp/sum n-pairs loss for one group, symmetrised, plus norm penalty.
pub fn brute_npairs(a: &[Vec<f64>], b: &[Vec<f64>], l2: f64) -> f64 {
    let p = a.len();
    let dot = |u: &Vec<f64>, v: &Vec<f64>| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let direction = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..p {
            let mut z = 0.0;
            for yj in y {
                z += dot(&x[i], yj).exp();
            }
            total += -(dot(&x[i], &y[i]).exp() / z).ln();
        }
        total / p as f64
    };
    let ce = 0.5 * (direction(a, b) + direction(b, a));
    let norms: f64 = a.iter().chain(b).map(|v| dot(v, v)).sum::<f64>() / (2 * p) as f64;
    ce + l2 * norms
}

/// O(T^2) generalised advantage: sum_k (gamma*lam)^k delta_{t+k}, cut at episode ends.
pub fn brute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len)
        .map(|t| {
            let next = if dones[t] { 0.0 } else { values[t + 1] };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..t_len)
        .map(|t| {
            let mut acc = 0.0;
            let mut coef = 1.0;
            for k in t..t_len {
                acc += coef * delta[k];
                if dones[k] {
                    break;
                }
                coef *= gamma * lam;
            }
            acc
        })
        .collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

pub mod opsuite;

/// Brute-force audit of a contrastive batch: every violated rule, as text.
pub fn batch_violations(
    batch: &mftcn::sampler::ContrastiveBatch,
    lengths: &std::collections::HashMap<u32, usize>,
    n_frames: usize,
    stride: usize,
    alpha: usize,
) -> Vec<String> {
    let mut out = Vec::new();
    let window = (n_frames - 1) * stride + 1;
    for (i, (a, p)) in batch.anchors.iter().zip(&batch.positives).enumerate() {
        if a.t != p.t || a.trajectory_id != p.trajectory_id {
            out.push(format!("row {i}: positive not time aligned"));
        }
        if a.view_id == p.view_id {
            out.push(format!("row {i}: positive from the same view"));
        }
        for c in [a, p] {
            let len = lengths[&c.trajectory_id];
            if c.t >= len || c.t + 1 < window {
                out.push(format!("row {i}: clip out of bounds"));
            }
        }
    }
    for r in &batch.groups {
        for i in r.clone() {
            for j in r.clone() {
                if i == j {
                    continue;
                }
                let (a, b) = (&batch.anchors[i], &batch.anchors[j]);
                if a.trajectory_id != b.trajectory_id {
                    out.push(format!("rows {i},{j}: group mixes trajectories"));
                }
                if a.t.abs_diff(b.t) < alpha {
                    out.push(format!("rows {i},{j}: alpha gap violated"));
                }
                let ra: Vec<usize> = (0..n_frames).map(|k| a.t - k * stride).collect();
                let (lo, hi) = (b.t + 1 - window, b.t);
                if ra.iter().any(|&f| f >= lo && f <= hi) || (a.t + 1 - window..=a.t).contains(&b.t) {
                    out.push(format!("rows {i},{j}: windows overlap"));
                }
            }
        }
    }
    out
}
