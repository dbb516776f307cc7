#![allow(clippy::single_range_in_vec_init)]

mod common;

use common::{randn_vec, rng};
use mftcn::dataset::MultiViewDataset;
use mftcn::envsim::EnvConfig;
use mftcn::loss::npairs_loss;
use mftcn::model::{Activation, MfTcnConfig, MfTcnModel, Mlp, ModelError};
use mftcn::numeric::{gradcheck, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(n: usize, s: usize) -> MfTcnConfig {
    MfTcnConfig {
        embedding_dim: 8,
        n_frames: n,
        stride: s,
        width: 32,
        height: 16,
        ..MfTcnConfig::default()
    }
}

fn random_frames(seed: u64, n: usize, cfg: &MfTcnConfig) -> Tensor<f32> {
    let mut r = rng(seed);
    let len = n * 3 * cfg.height * cfg.width;
    let data = randn_vec(&mut r, len).into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![n, 3, cfg.height, cfg.width], data).unwrap()
}

#[test]
fn no_spatial_softmax_layer() {
    let m = MfTcnModel::<f32>::new(config(4, 1), 0).unwrap();
    let layers = m.layers();
    assert!(!layers.iter().any(|l| l.contains("softmax")));
    assert_eq!(layers.iter().filter(|&&l| l == "conv2d").count(), 4);
    assert_eq!(
        &layers[layers.len() - 4..],
        ["conv3d", "relu", "spatial_mean", "linear"]
    );
}

#[test]
fn parameter_names_are_unique_and_dotted() {
    let m = MfTcnModel::<f32>::new(config(3, 2), 0).unwrap();
    let names: Vec<_> = m.params.iter().map(|(_, p)| p.name.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(names.contains(&"cnn.conv1.weight".to_string()));
    assert_eq!(
        m.params.get(m.params.find("temporal.weight").unwrap()).value.shape(),
        [64, 64, 3, 3, 3]
    );
}

#[test]
fn embedding_is_deterministic() {
    let cfg = config(4, 1);
    let a = MfTcnModel::<f32>::new(cfg.clone(), 3).unwrap();
    let b = MfTcnModel::<f32>::new(cfg.clone(), 3).unwrap();
    let clip = random_frames(1, 4, &cfg);
    let ea = a.embed_clip(&clip).unwrap();
    assert_eq!(ea, a.embed_clip(&clip).unwrap());
    assert_eq!(ea, b.embed_clip(&clip).unwrap());
    assert_eq!(ea.shape(), [8]);
}

#[test]
fn wrong_frame_count_is_an_error() {
    let cfg = config(4, 1);
    let m = MfTcnModel::<f32>::new(cfg.clone(), 0).unwrap();
    assert!(matches!(
        m.embed_clip(&random_frames(0, 3, &cfg)),
        Err(ModelError::FrameCount { expected: 4, got: 3 })
    ));
    let wrong = Tensor::<f32>::zeros(vec![4, 3, 32, 32]);
    assert!(matches!(m.embed_clip(&wrong), Err(ModelError::Resolution { .. })));
}

#[test]
fn single_frame_model_equals_plain_2d_stack() {
    let cfg = config(1, 1);
    let m = MfTcnModel::<f64>::new(cfg.clone(), 5).unwrap();
    let clip = random_frames(2, 1, &cfg).cast::<f64>();
    let e = m.embed_clip(&clip).unwrap();

    let p = &m.params;
    let mut g = Graph::<f64>::new();
    let mut h = g.constant(clip.clone());
    for i in 1..=4 {
        let w = g.param(p, p.find(&format!("cnn.conv{i}.weight")).unwrap());
        let b = g.param(p, p.find(&format!("cnn.conv{i}.bias")).unwrap());
        h = g.conv2d(h, w, b, 2, 1).unwrap();
        h = g.relu(h);
    }
    let w3 = p
        .get(p.find("temporal.weight").unwrap())
        .value
        .clone()
        .reshape(vec![64, 64, 3, 3])
        .unwrap();
    let w = g.constant(w3);
    let b = g.param(p, p.find("temporal.bias").unwrap());
    h = g.conv2d(h, w, b, 1, 1).unwrap();
    h = g.relu(h);
    h = g.spatial_mean(h).unwrap();
    let w = g.param(p, p.find("fc.weight").unwrap());
    let b = g.param(p, p.find("fc.bias").unwrap());
    let out = g.linear(h, w, b).unwrap();
    for (x, y) in e.data().iter().zip(g.value(out).data()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = config(2, 1);
    let m = MfTcnModel::<f32>::new(cfg.clone(), 1).unwrap();
    let p = 4;
    let mut g = Graph::new();
    let a = g.constant(random_frames(10, p * 2, &cfg));
    let b = g.constant(random_frames(11, p * 2, &cfg));
    let ea = m.forward_clips(&mut g, a).unwrap();
    let eb = m.forward_clips(&mut g, b).unwrap();
    let loss = npairs_loss(&mut g, ea, eb, &[0..p], 0.002).unwrap();
    let grads = g.backward(loss).unwrap().params(&g, &m.params);
    for ((_, param), grad) in m.params.iter().zip(&grads) {
        assert!(grad.norm() > 0.0, "{} has zero gradient", param.name);
    }
}

#[test]
fn embed_sequence_window_arithmetic() {
    let env = EnvConfig::with_resolution(32, 16);
    let ds = MultiViewDataset::generate_random(&env, 1, 1, 100).unwrap();
    let view = &ds.trajectories[0].views[0];

    let short = MultiViewDataset::generate_random(&env, 1, 1, 7).unwrap();
    let m = MfTcnModel::<f32>::new(config(3, 3), 0).unwrap();
    assert_eq!(
        m.embed_sequence(&short.trajectories[0].views[0]).unwrap().shape(),
        [1, 8]
    );

    let m1 = MfTcnModel::<f32>::new(config(1, 1), 0).unwrap();
    assert_eq!(m1.embed_sequence(view).unwrap().shape(), [100, 8]);
}

#[test]
fn batched_sequence_matches_per_clip() {
    let env = EnvConfig::with_resolution(32, 16);
    let ds = MultiViewDataset::generate_random(&env, 4, 1, 300).unwrap();
    let view = &ds.trajectories[0].views[1];
    let m = MfTcnModel::<f32>::new(config(3, 2), 9).unwrap();
    let seq = m.embed_sequence(view).unwrap();
    assert_eq!(seq.shape(), [296, 8]);
    for (row, t) in (4..300).enumerate().step_by(23) {
        let clip = view.tensor(&[t - 4, t - 2, t]);
        let e = m.embed_clip(&clip).unwrap();
        for (x, y) in e.data().iter().zip(&seq.data()[row * 8..(row + 1) * 8]) {
            assert!((x - y).abs() < 1e-6, "t={t}: {x} vs {y}");
        }
    }
}

#[test]
fn model_gradcheck_wrt_input() {
    let cfg = MfTcnConfig {
        embedding_dim: 3,
        n_frames: 2,
        stride: 1,
        width: 16,
        height: 16,
        channels: vec![4, 4, 4, 4],
        temporal_channels: 5,
    };
    let m = MfTcnModel::<f64>::new(cfg.clone(), 2).unwrap();
    let x = random_frames(3, 2, &cfg).cast::<f64>();
    let err = gradcheck(
        |g, x| {
            let e = m.forward_clips(g, x).map_err(|e| match e {
                ModelError::Numeric(n) => n,
                other => panic!("{other}"),
            })?;
            g.l2_penalty(e)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn mlp_probe_shape_and_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let probe = Mlp::new(&mut store, "probe", &[64, 256, 256, 256, 5], Activation::Relu, &mut r).unwrap();
    assert_eq!(probe.sizes, [64, 256, 256, 256, 5]);
    assert_eq!(store.len(), 8);

    let mut store = ParamStore::<f64>::new();
    let one = Mlp::new(&mut store, "id", &[3, 3], Activation::Relu, &mut r).unwrap();
    let w = store.find("id.fc0.weight").unwrap();
    store.get_mut(w).value = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
    let xv = g.constant(x.clone());
    let y = one.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn mlp_gradcheck() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for act in [Activation::Relu, Activation::Tanh] {
        let mut store = ParamStore::<f64>::new();
        let net = Mlp::new(&mut store, "m", &[4, 6, 2], act, &mut r).unwrap();
        let x = Tensor::new(vec![3, 4], randn_vec(&mut rng(1), 12)).unwrap();
        let err = gradcheck(
            |g, x| {
                let y = net.forward(g, &store, x).map_err(|e| match e {
                    ModelError::Numeric(n) => n,
                    other => panic!("{other}"),
                })?;
                g.l2_penalty(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{act:?}: {err}");
    }
}
