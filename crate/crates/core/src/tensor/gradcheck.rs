use crate::error::{GcrError, Result};

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all parameters, using
/// central differences of step `eps`.
///
/// `f` maps a parameter vector to `(value, analytic gradient)`. It must be
/// deterministic; it is called once at `params` and twice per coordinate.
pub fn grad_check<F>(params: &[f64], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(GcrError::Config("finite-difference step must be positive".into()));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(GcrError::Numeric("non-finite value or gradient".into()));
    }
    if analytic.len() != params.len() {
        return Err(GcrError::Shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let (up, _) = f(&x)?;
        x[k] = orig - eps;
        let (down, _) = f(&x)?;
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GcrError::Numeric(format!("non-finite value perturbing parameter {k}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[k] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}


#[cfg(test)]
mod head_tests {
    use super::*;
    use crate::rng::{self, Stream};
    use crate::tensor::{DenseMatrix, HeadConfig, MlpHead, Mode};

    #[test]
    fn one_hidden_layer_head() {
        let mut rng = rng::stream(21, Stream::Init);
        let cfg = HeadConfig { hidden_units: 6, dropout: 0.0, ..HeadConfig::with_input(5) };
        let head = MlpHead::new(cfg, &mut rng).unwrap();
        let x = DenseMatrix::from_vec(
            3,
            5,
            (0..15).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect(),
        )
        .unwrap();
        let flat: Vec<f64> = head.params().iter().flat_map(|(_, t, _)| t.data().to_vec()).collect();
        let err = grad_check(&flat, 1e-5, |p| {
            let mut h = head.clone();
            let mut off = 0;
            for t in h.params_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            let (out, cache) = h.forward_batch(&x, Mode::Train, None)?;
            let g = h.backward(&cache, &[1.0, -0.5, 2.0])?;
            let value = out[0] - 0.5 * out[1] + 2.0 * out[2];
            Ok((value, g.params.iter().flat_map(|t| t.data().to_vec()).collect()))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
