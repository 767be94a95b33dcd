//! Finite-difference check of the analytic crosscoder gradient at f64.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::NormKind;
use super::model::{backward, loss, pre_activation, Objective};
use super::params::CrosscoderParams;
use crate::error::Result;
use crate::numerics::{finite_diff_check, seeded_rng, GradCheckReport, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub d_model: usize,
    pub d_sparse: usize,
    pub n_models: usize,
    pub n_tokens: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            d_model: 8,
            d_sparse: 16,
            n_models: 3,
            n_tokens: 4,
        }
    }
}

/// Distance kept from the ReLU and L1 kinks so that a step of `h` never
/// crosses one.
const KINK_MARGIN: f64 = 1e-2;

fn random_instance(dims: GradCheckDims, seed: u64) -> (CrosscoderParams<f64>, Vec<Matrix<f64>>) {
    let ids: Vec<String> = (0..dims.n_models).map(|i| format!("m{i}")).collect();
    let (d, s) = (dims.d_model, dims.d_sparse);
    for attempt in 0u64.. {
        let mut rng = seeded_rng(seed, attempt);
        let mut normal = |scale: f64| rng.sample::<f64, _>(StandardNormal) * scale;
        let mut p = CrosscoderParams::<f64>::zeros(ids.clone(), d, s);
        for m in 0..dims.n_models {
            p.enc[m] = Matrix::from_fn(s, d, |_, _| normal(0.5));
            p.dec[m] = Matrix::from_fn(d, s, |_, _| normal(0.5));
            p.dec_bias[m] = (0..d).map(|_| normal(0.1)).collect();
        }
        p.enc_bias = (0..s).map(|_| normal(0.1)).collect();
        let acts: Vec<Matrix<f64>> = (0..dims.n_models)
            .map(|_| Matrix::from_fn(dims.n_tokens, d, |_, _| normal(1.0)))
            .collect();
        let pre = pre_activation(&p, &acts).expect("consistent shapes");
        let clear_of_kinks = pre.as_slice().iter().all(|x| x.abs() > KINK_MARGIN)
            && p.dec.iter().all(|m| m.as_slice().iter().all(|x| x.abs() > KINK_MARGIN));
        if clear_of_kinks {
            return (p, acts);
        }
    }
    unreachable!()
}

/// Compares `backward` against central differences on every parameter of a
/// random instance. `corrupt` perturbs one analytic entry and exists as a
/// negative control for callers.
pub fn check_gradients(dims: GradCheckDims, norm_kind: NormKind, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let (params, acts) = random_instance(dims, seed);
    let objective = Objective {
        beta: super::config::DEFAULT_BETA,
        norm_kind,
    };
    let (_, grads) = backward(&params, &acts, objective)?;
    let mut analytic = grads.to_flat();
    if corrupt {
        analytic[0] += 1.0 + analytic[0].abs();
    }
    let mut flat = params.to_flat();
    Ok(finite_diff_check(
        |x| {
            loss(&params.with_flat(x), &acts, objective)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        },
        &mut flat,
        &analytic,
        usize::MAX,
        1e-6,
        &mut seeded_rng(seed, 1),
    ))
}
