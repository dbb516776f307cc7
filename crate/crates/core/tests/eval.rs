mod common;

use common::{randn_vec, rng};
use mftcn::envsim::{attributes_from_state, random_rollout, EnvConfig};
use mftcn::eval::{
    alignment_error, alignment_report, check_consistency, knn_classify, knn_with_neighbors, merge_rows, table_report,
    to_csv, to_text, EmbeddedSequence, EvalError, KnnRecord, KnnReport, ResultRow,
};
use mftcn::train::ProbeMetrics;
use rand::Rng;

fn seq(id: u32, dim: usize, embeddings: Vec<f32>, labels: Vec<[u8; 5]>) -> EmbeddedSequence {
    EmbeddedSequence {
        id,
        first_t: 0,
        dim,
        embeddings,
        labels,
    }
}

fn gauss(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f32> {
    randn_vec(r, n).into_iter().map(|v| v as f32).collect()
}

#[test]
fn identical_sequences_classify_perfectly() {
    let mut r = rng(1);
    let emb = gauss(&mut r, 50 * 4);
    let labels: Vec<[u8; 5]> = (0..50)
        .map(|i| [i % 2, i % 4, (i / 3) % 2, i % 3, (i + 1) % 3].map(|v| v as u8))
        .collect();
    let a = seq(0, 4, emb.clone(), labels.clone());
    let b = seq(1, 4, emb, labels);
    let rep = knn_classify(&[a, b]).unwrap();
    assert_eq!(rep.error, [0.0; 5]);
}

#[test]
fn single_sequence_is_rejected() {
    let a = seq(0, 2, vec![0.0; 4], vec![[0; 5]; 2]);
    assert!(matches!(knn_classify(&[a]), Err(EvalError::TooFewSequences(1))));
}

#[test]
fn own_sequence_is_never_retrieved() {
    // Frames within a sequence are identical to each other, so an inclusive
    // search would always return a frame of the query's own sequence.
    let mut r = rng(2);
    let mut seqs = Vec::new();
    for id in 0..3u32 {
        let base = gauss(&mut r, 3);
        let emb: Vec<f32> = (0..20).flat_map(|_| base.clone()).collect();
        seqs.push(seq(id, 3, emb, vec![[id as u8; 5]; 20]));
    }
    let (rep, neighbors) = knn_with_neighbors(&seqs).unwrap();
    let mut q = 0;
    for s in &seqs {
        for _ in 0..s.len() {
            assert_ne!(neighbors[q].0, s.id);
            q += 1;
        }
    }
    assert_eq!(rep.error, [100.0; 5]);
}

#[test]
fn ties_go_to_lowest_sequence_then_time() {
    let z = vec![0.0f32; 2 * 4];
    let seqs = vec![
        seq(5, 2, z.clone(), vec![[0; 5]; 4]),
        seq(2, 2, z.clone(), vec![[1; 5]; 4]),
        seq(9, 2, z, vec![[2; 5]; 4]),
    ];
    let (_, nb) = knn_with_neighbors(&seqs).unwrap();
    // Queries from sequence 5 and 9 retrieve sequence 2 row 0; from 2, sequence 5 row 0.
    assert!(nb[..4].iter().all(|&n| n == (2, 0)));
    assert!(nb[4..8].iter().all(|&n| n == (5, 0)));
    assert!(nb[8..].iter().all(|&n| n == (2, 0)));
}

#[test]
fn random_embeddings_sit_at_chance() {
    let env = EnvConfig::default();
    let mut r = rng(3);
    let mut seqs = Vec::new();
    let mut hist = vec![std::collections::HashMap::<u8, usize>::new(); 5];
    for id in 0..12u32 {
        let roll = random_rollout(100 + id as u64, 300, &env.physics, &env.init, &env.actions).unwrap();
        let labels: Vec<[u8; 5]> = roll.states.iter().map(|s| attributes_from_state(s).classes()).collect();
        for l in &labels {
            for k in 0..5 {
                *hist[k].entry(l[k]).or_default() += 1;
            }
        }
        seqs.push(seq(id, 8, gauss(&mut r, 300 * 8), labels));
    }
    let rep = knn_classify(&seqs).unwrap();
    let n = (12 * 300) as f64;
    for (k, h) in hist.iter().enumerate() {
        // Retrieval independent of labels: error = 1 - sum_c p_c^2.
        let chance = 100.0 * (1.0 - h.values().map(|&c| (c as f64 / n).powi(2)).sum::<f64>());
        assert!(
            (rep.error[k] - chance).abs() < 3.0,
            "{}: {} vs {chance}",
            KnnReport::NAMES[k],
            rep.error[k]
        );
    }
}

#[test]
fn alignment_identical_is_zero() {
    let mut r = rng(4);
    let e = gauss(&mut r, 100 * 6);
    assert_eq!(alignment_error(&e, &e, 6).unwrap(), 0.0);
}

#[test]
fn alignment_reversed_matches_closed_form() {
    for len in [10usize, 101, 1000] {
        let a: Vec<f32> = (0..len).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..len).map(|j| (len - 1 - j) as f32).collect();
        let got = alignment_error(&a, &b, 1).unwrap();
        let want = (0..len).map(|i| (2 * i).abs_diff(len - 1) as f64).sum::<f64>() / (len * len) as f64;
        assert!((got - want).abs() < 1e-12);
        if len == 1000 {
            assert!((got - 0.5).abs() < 1e-3);
        }
    }
}

#[test]
fn alignment_random_retrieval_is_one_third() {
    let mut r = rng(5);
    let draws = 1_000_000;
    let mc: f64 = (0..draws)
        .map(|_| (r.random::<f64>() - r.random::<f64>()).abs())
        .sum::<f64>()
        / draws as f64;
    assert!((mc - 1.0 / 3.0).abs() < 2e-3);
    let len = 1500;
    let a = gauss(&mut r, len * 8);
    let b = gauss(&mut r, len * 8);
    let got = alignment_error(&a, &b, 8).unwrap();
    assert!((got - mc).abs() < 0.03, "{got} vs {mc}");
}

#[test]
fn alignment_errors_are_reported_both_ways() {
    let mut r = rng(6);
    let a = vec![seq(0, 3, gauss(&mut r, 30), vec![[0; 5]; 10])];
    let b = vec![seq(0, 3, gauss(&mut r, 30), vec![[0; 5]; 10])];
    let rep = alignment_report(&a, &b).unwrap();
    assert!((rep.a_to_b - alignment_error(&a[0].embeddings, &b[0].embeddings, 3).unwrap()).abs() < 1e-12);
    assert!((rep.b_to_a - alignment_error(&b[0].embeddings, &a[0].embeddings, 3).unwrap()).abs() < 1e-12);
    assert!(matches!(alignment_error(&[], &[], 3), Err(EvalError::Empty)));
}

fn row(d: usize, n: usize, motion: f64) -> ResultRow {
    ResultRow {
        embedding_dim: d,
        n_frames: n,
        stride: 1,
        probe: Some(
            ProbeMetrics {
                mse: [0.01, 0.02, 0.03, motion, motion / 2.0],
            }
            .into(),
        ),
        knn: None,
        alignment: None,
    }
}

#[test]
fn report_rows_sorted_and_consistent() {
    let rows = merge_rows(vec![row(32, 4, 0.1), row(8, 1, 0.5), row(32, 1, 0.3), row(8, 4, 0.2)]);
    let keys: Vec<_> = rows.iter().map(|r| (r.embedding_dim, r.n_frames)).collect();
    assert_eq!(keys, [(8, 1), (8, 4), (32, 1), (32, 4)]);
    check_consistency(&rows).unwrap();

    let csv = to_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    // Aggregates recomputed from the per-attribute CSV columns.
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for l in &lines[1..] {
        let cells: Vec<f64> = l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
        let per: Vec<f64> = ["x", "sin_theta", "cos_theta", "x_dot", "theta_dot"]
            .iter()
            .map(|n| cells[col(&format!("probe_{n}"))])
            .collect();
        assert!((cells[col("probe_average")] - per.iter().sum::<f64>() / 5.0).abs() < 1e-9);
        assert!((cells[col("probe_position")] - per[..3].iter().sum::<f64>() / 3.0).abs() < 1e-9);
        assert!((cells[col("probe_motion")] - per[3..].iter().sum::<f64>() / 2.0).abs() < 1e-9);
    }
    assert_eq!(to_text(&rows).lines().count(), 5);
}

#[test]
fn single_config_single_row_and_merge() {
    let mut knn_only = row(32, 4, 0.0);
    knn_only.probe = None;
    knn_only.knn = Some(KnnRecord::from(KnnReport {
        error: [1.0, 2.0, 3.0, 4.0, 5.0],
    }));
    let dir = tempfile::tempdir().unwrap();
    let rows = table_report(vec![row(32, 4, 0.1), knn_only], dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].probe.is_some() && rows[0].knn.is_some());
    let back = mftcn::eval::read_rows(&dir.path().join("table.jsonl")).unwrap();
    assert_eq!(back, rows);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("table.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn tampered_aggregate_is_detected() {
    let mut r = row(8, 1, 0.5);
    r.probe.as_mut().unwrap().motion += 1e-6;
    assert!(matches!(
        check_consistency(&[r]),
        Err(EvalError::Inconsistent { row: 0, .. })
    ));
}
