//! Central finite-difference gradient checking.

use rand::Rng;

/// Relative error between an analytic and a numeric derivative.
///
/// Uses `|a - n| / max(|a|, |n|, floor)`, so pairs that are both tiny compare on
/// absolute terms instead of amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares `analytic[i]` against `(L(θ+h·e_i) − L(θ−h·e_i)) / 2h` for
/// `probe_count` coordinates drawn from `rng` (all coordinates when
/// `probe_count >= params.len()`).
///
/// `params` is restored exactly before returning.
pub fn finite_diff_check<F, R>(
    mut loss_fn: F,
    params: &mut [f64],
    analytic: &[f64],
    probe_count: usize,
    h: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let n = params.len();
    let indices: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, probe_count).into_vec()
    };

    let mut probes = Vec::with_capacity(indices.len());
    let mut max_rel_error = 0.0f64;
    for index in indices {
        let orig = params[index];
        params[index] = orig + h;
        let plus = loss_fn(params);
        params[index] = orig - h;
        let minus = loss_fn(params);
        params[index] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = relative_error(analytic[index], numeric, 1e-6);
        max_rel_error = max_rel_error.max(rel_error);
        probes.push(Probe {
            index,
            analytic: analytic[index],
            numeric,
            rel_error,
        });
    }
    GradCheckReport { max_rel_error, probes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_at_three() {
        let mut theta = [3.0];
        let r = finite_diff_check(
            |p| p[0] * p[0],
            &mut theta,
            &[6.0],
            1,
            1e-4,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(theta, [3.0]);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut theta = [1.0, 2.0, 3.0];
        let r = finite_diff_check(
            |_| 42.0,
            &mut theta,
            &[0.0; 3],
            3,
            1e-4,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut theta = [1.0, -1.0];
        let r = finite_diff_check(
            |p| p[0] * p[0] + p[1] * p[1],
            &mut theta,
            &[2.0, 2.0],
            2,
            1e-4,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.max_rel_error > 0.5);
    }

    proptest! {
        // Central differences are exact for polynomials of degree <= 2 up to rounding.
        #[test]
        fn quadratic_polynomials(coef in proptest::collection::vec(-5.0f64..5.0, 6),
                                 x in proptest::collection::vec(-3.0f64..3.0, 2)) {
            let loss = |p: &[f64]| {
                coef[0] + coef[1] * p[0] + coef[2] * p[1]
                    + coef[3] * p[0] * p[0] + coef[4] * p[0] * p[1] + coef[5] * p[1] * p[1]
            };
            let grad = [
                coef[1] + 2.0 * coef[3] * x[0] + coef[4] * x[1],
                coef[2] + coef[4] * x[0] + 2.0 * coef[5] * x[1],
            ];
            let mut p = x.clone();
            let r = finite_diff_check(loss, &mut p, &grad, 2, 1e-3, &mut ChaCha8Rng::seed_from_u64(1));
            prop_assert!(r.max_rel_error < 1e-6, "{:?}", r);
        }
    }
}
