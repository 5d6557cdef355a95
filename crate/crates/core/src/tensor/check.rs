use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function built on a fresh graph.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t)?;
        let out = f(&mut g, v)?;
        let val = g
            .value(out)
            .item()
            .ok_or_else(|| Error::NotScalar {
                shape: g.value(out).shape().to_vec(),
            })?;
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Maximum over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
///
/// Disagreements (kinks, plateaus) are reported in the returned value, never
/// clamped away.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let mut g = Graph::new();
    let v = g.leaf(x.clone())?;
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor::randn(&[6], 1.0, &mut rng);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let c = g.constant(c.clone())?;
                let p = g.mul(x, c)?;
                g.sum(p)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn cosine_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let c = Tensor::randn(&[9], 1.0, &mut rng);
            let x = Tensor::randn(&[9], 1.0, &mut rng);
            let err = grad_check(
                |g, x| {
                    let c = g.constant(c.clone())?;
                    g.cosine(x, c)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn kink_disagreement_is_reported() {
        // |x| straddling zero within the step: numeric slope 0, analytic ±1.
        let x = Tensor::vector(vec![1e-9]);
        let err = grad_check(
            |g, x| {
                let a = g.abs(x)?;
                g.sum(a)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.99, "{err}");
    }

    #[test]
    fn non_finite_input_is_error() {
        let x = Tensor::vector(vec![f64::INFINITY]);
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-6).is_err());
    }
}
