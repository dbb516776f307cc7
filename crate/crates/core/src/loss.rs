//! Symmetrized n-pairs time-contrastive loss.

use std::ops::Range;

use crate::numeric::{Graph, NumericError, Scalar, Var};

pub const DEFAULT_L2_REG: f64 = 0.002;

/// n-pairs loss over anchors `a` and positives `b`, both `[rows, d]`.
///
/// Within each group the logits are `a_i . b_j`; row `i` targets column `i`.
/// Cross entropy is averaged over the two directions (a against b, b against a)
/// and over groups, then `l2_reg` times the mean squared embedding norm is added.
pub fn npairs_loss<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    groups: &[Range<usize>],
    l2_reg: f64,
) -> Result<Var, NumericError> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() != 2 {
        return Err(NumericError::ShapeMismatch {
            op: "npairs_loss",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    if groups.is_empty() {
        return Err(NumericError::Empty("npairs_loss groups"));
    }
    let rows = g.shape(a)[0];
    let mut total: Option<Var> = None;
    for r in groups {
        if r.len() < 2 {
            return Err(NumericError::InvalidArgument(format!(
                "n-pairs group {r:?} has fewer than two timesteps"
            )));
        }
        if r.end > rows {
            return Err(NumericError::InvalidArgument(format!(
                "group {r:?} exceeds {rows} rows"
            )));
        }
        let ag = g.slice_rows(a, r.start, r.end)?;
        let bg = g.slice_rows(b, r.start, r.end)?;
        let targets: Vec<usize> = (0..r.len()).collect();
        let ab = g.matmul_nt(ag, bg)?;
        let ba = g.matmul_nt(bg, ag)?;
        let ce_ab = g.softmax_cross_entropy_rows(ab, &targets)?;
        let ce_ba = g.softmax_cross_entropy_rows(ba, &targets)?;
        let sum = g.add(ce_ab, ce_ba)?;
        total = Some(match total {
            None => sum,
            Some(t) => g.add(t, sum)?,
        });
    }
    let contrastive = g.scale(total.unwrap(), T::lit(0.5 / groups.len() as f64));
    if l2_reg == 0.0 {
        return Ok(contrastive);
    }
    let pa = g.l2_penalty(a)?;
    let pb = g.l2_penalty(b)?;
    let pen = g.add(pa, pb)?;
    let pen = g.scale(pen, T::lit(0.5 * l2_reg));
    g.add(contrastive, pen)
}
