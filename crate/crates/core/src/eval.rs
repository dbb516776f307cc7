//! Evaluation protocols: nearest-neighbour attribute classification, cross-view
//! alignment error, and tabular reports across model configurations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::envsim::AttributeVector;
use crate::model::{MfTcnModel, ModelError};
use crate::train::{ProbeMetrics, PROBE_TARGETS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need at least two sequences, got {0}")]
    TooFewSequences(usize),
    #[error("empty evaluation range")]
    Empty,
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("inconsistent report row {row}: {reason}")]
    Inconsistent { row: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Embeddings of one view of one trajectory with the labels of the embedded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    pub id: u32,
    /// Timestep of the first row.
    pub first_t: usize,
    pub dim: usize,
    /// `[len, dim]`, row-major.
    pub embeddings: Vec<f32>,
    /// Attribute classes per row, see [`AttributeVector::classes`].
    pub labels: Vec<[u8; 5]>,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 || self.embeddings.len() != self.labels.len() * self.dim {
            return Err(EvalError::Misaligned(format!(
                "sequence {}: {} values for {} labels of dimension {}",
                self.id,
                self.embeddings.len(),
                self.labels.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Embeds view `view` of every trajectory.
pub fn embed_dataset(
    model: &MfTcnModel<f32>,
    dataset: &MultiViewDataset,
    view: usize,
) -> Result<Vec<EmbeddedSequence>> {
    let first_t = model.config.window() - 1;
    dataset
        .trajectories
        .iter()
        .map(|traj| {
            let frames = traj
                .views
                .get(view)
                .ok_or_else(|| EvalError::Misaligned(format!("dataset has no view index {view}")))?;
            let emb = model.embed_sequence(frames)?;
            let len = emb.shape()[0];
            Ok(EmbeddedSequence {
                id: traj.id,
                first_t,
                dim: model.config.embedding_dim,
                embeddings: emb.into_data(),
                labels: traj.attributes[first_t..first_t + len]
                    .iter()
                    .map(|a| a.classes())
                    .collect(),
            })
        })
        .collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest row of `pool` to `q`; ties go to the lowest index.
fn nearest(q: &[f32], pool: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, row) in pool.chunks(dim).enumerate() {
        let d = sq_dist(q, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    /// Error percentage per attribute, static attributes first.
    pub error: [f64; 5],
}

impl KnnReport {
    pub const NAMES: [&'static str; 5] = [
        AttributeVector::STATIC_NAMES[0],
        AttributeVector::STATIC_NAMES[1],
        AttributeVector::STATIC_NAMES[2],
        AttributeVector::MOTION_NAMES[0],
        AttributeVector::MOTION_NAMES[1],
    ];

    pub fn static_error(&self) -> f64 {
        (self.error[0] + self.error[1] + self.error[2]) / 3.0
    }

    pub fn motion_error(&self) -> f64 {
        (self.error[3] + self.error[4]) / 2.0
    }
}

/// Leave-one-sequence-out nearest-neighbour classification. Each frame takes
/// the labels of its Euclidean nearest neighbour among all frames of all other
/// sequences; ties go to the lowest (sequence id, time).
pub fn knn_classify(sequences: &[EmbeddedSequence]) -> Result<KnnReport> {
    knn_with_neighbors(sequences).map(|(r, _)| r)
}

/// [`knn_classify`] plus, per query frame in input order, the `(sequence id, row)` retrieved.
pub fn knn_with_neighbors(sequences: &[EmbeddedSequence]) -> Result<(KnnReport, Vec<(u32, usize)>)> {
    if sequences.len() < 2 {
        return Err(EvalError::TooFewSequences(sequences.len()));
    }
    for s in sequences {
        s.check()?;
    }
    let dim = sequences[0].dim;
    if sequences.iter().any(|s| s.dim != dim) {
        return Err(EvalError::Misaligned("sequences differ in embedding dimension".into()));
    }
    let mut order: Vec<&EmbeddedSequence> = sequences.iter().collect();
    order.sort_by_key(|s| s.id);
    let mut wrong = [0usize; 5];
    let mut total = 0usize;
    let mut neighbors = Vec::new();
    for q in sequences {
        for i in 0..q.len() {
            let query = q.row(i);
            let mut best: Option<(f64, u32, usize, &[u8; 5])> = None;
            for c in order.iter().filter(|c| c.id != q.id) {
                if c.is_empty() {
                    continue;
                }
                let (j, d) = nearest(query, &c.embeddings, dim);
                // Candidates are visited in ascending id, so strict comparison keeps the lowest.
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, c.id, j, &c.labels[j]));
                }
            }
            let (_, id, j, pred) = best.ok_or(EvalError::Empty)?;
            neighbors.push((id, j));
            for k in 0..5 {
                wrong[k] += (pred[k] != q.labels[i][k]) as usize;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok((
        KnnReport {
            error: wrong.map(|w| 100.0 * w as f64 / total as f64),
        },
        neighbors,
    ))
}

/// Mean of `|i - j*| / L` over query rows `i` of `a`, where `j*` is the nearest
/// row of `b` (ties to the lowest index) and `L` the number of rows.
pub fn alignment_error(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || a.len() != b.len() {
        return Err(EvalError::Misaligned(format!(
            "{} and {} values of dimension {dim}",
            a.len(),
            b.len()
        )));
    }
    let len = a.len() / dim;
    if len == 0 {
        return Err(EvalError::Empty);
    }
    let total: f64 = a
        .chunks(dim)
        .enumerate()
        .map(|(i, q)| nearest(q, b, dim).0.abs_diff(i) as f64)
        .sum();
    Ok(total / (len * len) as f64)
}

/// Alignment error in both directions, averaged over all frames of all sequences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub a_to_b: f64,
    pub b_to_a: f64,
}

impl AlignmentReport {
    pub fn mean(&self) -> f64 {
        0.5 * (self.a_to_b + self.b_to_a)
    }
}

pub fn alignment_report(view_a: &[EmbeddedSequence], view_b: &[EmbeddedSequence]) -> Result<AlignmentReport> {
    if view_a.len() != view_b.len() || view_a.is_empty() {
        return Err(EvalError::Misaligned(format!(
            "{} sequences in view a, {} in view b",
            view_a.len(),
            view_b.len()
        )));
    }
    let (mut ab, mut ba, mut frames) = (0.0, 0.0, 0usize);
    for (a, b) in view_a.iter().zip(view_b) {
        if a.id != b.id || a.len() != b.len() {
            return Err(EvalError::Misaligned(format!("sequence {} vs {}", a.id, b.id)));
        }
        a.check()?;
        b.check()?;
        ab += alignment_error(&a.embeddings, &b.embeddings, a.dim)? * a.len() as f64;
        ba += alignment_error(&b.embeddings, &a.embeddings, a.dim)? * a.len() as f64;
        frames += a.len();
    }
    Ok(AlignmentReport {
        a_to_b: ab / frames as f64,
        b_to_a: ba / frames as f64,
    })
}

// ---- reports ------------------------------------------------------------------------------

/// One evaluated model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub embedding_dim: usize,
    pub n_frames: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<KnnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentReport>,
}

/// Probe MSEs with their stored aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub mse: [f64; 5],
    pub average: f64,
    pub position: f64,
    pub motion: f64,
}

impl From<ProbeMetrics> for ProbeRecord {
    fn from(m: ProbeMetrics) -> Self {
        Self {
            mse: m.mse,
            average: m.average(),
            position: m.position(),
            motion: m.motion(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnRecord {
    pub error: [f64; 5],
    pub static_error: f64,
    pub motion_error: f64,
}

impl From<KnnReport> for KnnRecord {
    fn from(r: KnnReport) -> Self {
        Self {
            error: r.error,
            static_error: r.static_error(),
            motion_error: r.motion_error(),
        }
    }
}

impl ResultRow {
    pub fn lookback_window(&self) -> usize {
        crate::sampler::lookback_window(self.n_frames, self.stride)
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.embedding_dim, self.lookback_window(), self.n_frames)
    }

    /// Fills in whichever measurements `other` has and `self` lacks.
    fn absorb(&mut self, other: ResultRow) {
        self.probe = self.probe.or(other.probe);
        self.knn = self.knn.or(other.knn);
        self.alignment = self.alignment.or(other.alignment);
    }
}

/// Rows sorted by (d, lookback) with rows of the same configuration merged.
pub fn merge_rows(rows: impl IntoIterator<Item = ResultRow>) -> Vec<ResultRow> {
    let mut out: Vec<ResultRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.key() == r.key()) {
            Some(o) => o.absorb(r),
            None => out.push(r),
        }
    }
    out.sort_by_key(|r| r.key());
    out
}

const TOL: f64 = 1e-9;

/// Recomputes every aggregate from its per-attribute values.
pub fn check_consistency(rows: &[ResultRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let fail = |reason: String| EvalError::Inconsistent { row: i, reason };
        if let Some(p) = &r.probe {
            let m = ProbeMetrics { mse: p.mse };
            for (name, stored, fresh) in [
                ("average", p.average, m.average()),
                ("position", p.position, m.position()),
                ("motion", p.motion, m.motion()),
            ] {
                if (stored - fresh).abs() > TOL {
                    return Err(fail(format!("probe {name} {stored} != {fresh}")));
                }
            }
        }
        if let Some(k) = &r.knn {
            let m = KnnReport { error: k.error };
            for (name, stored, fresh) in [
                ("static", k.static_error, m.static_error()),
                ("motion", k.motion_error, m.motion_error()),
            ] {
                if (stored - fresh).abs() > TOL {
                    return Err(fail(format!("knn {name} {stored} != {fresh}")));
                }
            }
        }
    }
    Ok(())
}

fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["embedding_dim", "n_frames", "stride", "lookback_window"]
        .map(String::from)
        .to_vec();
    h.extend(["probe_average", "probe_position", "probe_motion"].map(String::from));
    h.extend(PROBE_TARGETS.iter().map(|n| format!("probe_{n}")));
    h.extend(["knn_static", "knn_motion"].map(String::from));
    h.extend(KnnReport::NAMES.iter().map(|n| format!("knn_{n}")));
    h.extend(["align_a_to_b", "align_b_to_a"].map(String::from));
    h
}

fn csv_cells(r: &ResultRow) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut c = vec![
        r.embedding_dim.to_string(),
        r.n_frames.to_string(),
        r.stride.to_string(),
        r.lookback_window().to_string(),
    ];
    let p = r.probe.as_ref();
    c.extend([p.map(|p| p.average), p.map(|p| p.position), p.map(|p| p.motion)].map(opt));
    c.extend((0..5).map(|i| opt(p.map(|p| p.mse[i]))));
    let k = r.knn.as_ref();
    c.extend([k.map(|k| k.static_error), k.map(|k| k.motion_error)].map(opt));
    c.extend((0..5).map(|i| opt(k.map(|k| k.error[i]))));
    let a = r.alignment.as_ref();
    c.extend([a.map(|a| a.a_to_b), a.map(|a| a.b_to_a)].map(opt));
    c
}

/// Comma-separated table, one row per configuration, in [`merge_rows`] order.
pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = csv_header().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&csv_cells(r).join(","));
        out.push('\n');
    }
    out
}

/// One JSON object per line.
pub fn to_jsonl(rows: &[ResultRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serialises") + "\n")
        .collect()
}

/// Aligned text table with one row per model configuration.
pub fn to_text(rows: &[ResultRow]) -> String {
    let fmt = |v: Option<f64>, digits: usize| v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into());
    let mut table: Vec<Vec<String>> = vec![[
        "d",
        "lookback",
        "Average",
        "Position",
        "Motion",
        "x",
        "sin",
        "cos",
        "x_dot",
        "th_dot",
        "Static%",
        "Motion%",
        "Align a>b",
        "Align b>a",
    ]
    .map(String::from)
    .to_vec()];
    for r in rows {
        let p = r.probe.as_ref();
        let k = r.knn.as_ref();
        let a = r.alignment.as_ref();
        let mut line = vec![
            r.embedding_dim.to_string(),
            if r.stride == 1 {
                r.n_frames.to_string()
            } else {
                format!("{}x{}", r.n_frames, r.stride)
            },
        ];
        line.extend([p.map(|p| p.average), p.map(|p| p.position), p.map(|p| p.motion)].map(|v| fmt(v, 4)));
        line.extend((0..5).map(|i| fmt(p.map(|p| p.mse[i]), 4)));
        line.extend([k.map(|k| k.static_error), k.map(|k| k.motion_error)].map(|v| fmt(v, 1)));
        line.extend([a.map(|a| a.a_to_b), a.map(|a| a.b_to_a)].map(|v| fmt(v, 3)));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out
}

/// Merges `rows`, checks them, and writes `table.csv`, `table.jsonl` and
/// `table.txt` into `dir`. Returns the merged rows.
pub fn table_report(rows: Vec<ResultRow>, dir: &Path) -> Result<Vec<ResultRow>> {
    let rows = merge_rows(rows);
    check_consistency(&rows)?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| EvalError::Io {
            path,
            reason: e.to_string(),
        })
    };
    std::fs::create_dir_all(dir).map_err(|e| EvalError::Io {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    write("table.csv", to_csv(&rows))?;
    write("table.jsonl", to_jsonl(&rows))?;
    write("table.txt", to_text(&rows))?;
    Ok(rows)
}

/// Parses rows written by [`to_jsonl`].
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| EvalError::Io {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
