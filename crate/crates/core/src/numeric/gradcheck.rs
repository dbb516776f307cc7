use super::{Graph, NumericError, Result, Tensor, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the worst element-wise relative error,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and the node holding `x` and must return a
/// one-element node.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(NumericError::NonFinite("gradcheck forward value".into()));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(NumericError::NonFinite("gradcheck forward value".into()));
    }
    let analytic = g.backward(out)?.wrt(&g, v);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().wrt(&g, v).data(), &[2.0, 4.0]);
        let err = gradcheck(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = Tensor::new(vec![1], vec![1000.0]).unwrap();
        let r = gradcheck(
            |g, v| {
                let e = g.exp(v);
                Ok(g.sum(e))
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(NumericError::NonFinite(_))));
    }
}
