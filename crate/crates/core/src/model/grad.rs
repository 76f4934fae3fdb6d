//! Numerical verification of the training path: analytic gradients against
//! central finite differences over a seeded subsample of parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients with central finite differences at `eps`.
///
/// `loss_fn` must be a deterministic function of the parameters; `grad_fn`
/// returns one gradient array per parameter entry, aligned with
/// `params.entries()`. The relative error of a coordinate is
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)` and the maximum over a seeded
/// random subsample of at least `min_samples` coordinates is reported.
pub fn grad_check(
    params: &ParamSet,
    eps: f64,
    min_samples: usize,
    seed: u64,
    loss_fn: &dyn Fn(&ParamSet) -> Result<f64>,
    grad_fn: &dyn Fn(&ParamSet) -> Result<Vec<ndarray::Array2<f64>>>,
) -> Result<GradCheckReport> {
    let analytic = grad_fn(params)?;
    for (entry, g) in params.entries().iter().zip(&analytic) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(entry.name.clone()));
        }
    }

    // Enumerate all coordinates, then draw the seeded subsample.
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, entry) in params.entries().iter().enumerate() {
        for r in 0..entry.value.nrows() {
            for c in 0..entry.value.ncols() {
                coords.push((pi, r, c));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let take = min_samples.min(coords.len());

    let mut max_rel = 0.0f64;
    let mut probe = params.clone();
    for &(pi, r, c) in coords.iter().take(take) {
        let original = probe.entries()[pi].value[(r, c)];
        probe.entries_mut()[pi].value[(r, c)] = original + eps;
        let plus = loss_fn(&probe)?;
        probe.entries_mut()[pi].value[(r, c)] = original - eps;
        let minus = loss_fn(&probe)?;
        probe.entries_mut()[pi].value[(r, c)] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "finite-difference probe at {}[{r},{c}]",
                params.entries()[pi].name
            )));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let ga = analytic[pi][(r, c)];
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }

    Ok(GradCheckReport { max_rel_err: max_rel, checked: take })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn quadratic_params() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::default();
        params.register(
            "x",
            Array2::from_shape_fn((5, 7), |_| rng.random_range(-2.0..2.0)),
            true,
        );
        params
    }

    #[test]
    fn quadratic_loss_checks_out() {
        // loss = sum(x^2); gradient 2x exactly.
        let params = quadratic_params();
        let report = grad_check(
            &params,
            1e-5,
            200,
            3,
            &|p| Ok(p.get("x").iter().map(|v| v * v).sum()),
            &|p| Ok(vec![p.get("x").mapv(|v| 2.0 * v)]),
        )
        .unwrap();
        assert_eq!(report.checked, 35);
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let params = quadratic_params();
        let report = grad_check(
            &params,
            1e-5,
            35,
            3,
            &|p| Ok(p.get("x").iter().map(|v| v * v).sum()),
            &|p| Ok(vec![p.get("x").mapv(|v| 2.5 * v)]),
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-2);
    }

    #[test]
    fn non_finite_gradients_error() {
        let params = quadratic_params();
        let err = grad_check(
            &params,
            1e-5,
            10,
            3,
            &|_| Ok(0.0),
            &|p| Ok(vec![p.get("x").mapv(|_| f64::NAN)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(_)));
    }
}
