//! Forward pass, loss and analytic gradients.
//!
//! For activations `a_i` (one `batch × d_model` matrix per model):
//!
//! ```text
//! f      = ReLU(Σ_i a_i · enc_iᵀ + enc_bias)
//! â_i    = f · dec_iᵀ + dec_bias_i
//! recon_i  = mean_b ‖a_i[b] − â_i[b]‖²
//! sparsity = mean_b Σ_k f[b,k] · Σ_i ‖dec_i[:,k]‖
//! total    = Σ_i recon_i + β · sparsity
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::NormKind;
use super::params::{CrosscoderParams, Gradients};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_tn, Matrix, Real};
use crate::par;

/// Loss weights shared by `loss` and `backward`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub beta: f64,
    pub norm_kind: NormKind,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            beta: super::config::DEFAULT_BETA,
            norm_kind: NormKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T: Real = f32> {
    pub pre_activation: Matrix<T>,
    pub features: Matrix<T>,
    pub reconstructions: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_per_model: BTreeMap<String, f64>,
    pub sparsity: f64,
    pub total: f64,
}

fn check_inputs<T: Real>(params: &CrosscoderParams<T>, acts: &[Matrix<T>]) -> Result<usize> {
    if acts.len() != params.n_models() {
        return Err(Error::ModelSetMismatch(format!(
            "{} activation matrices for {} models",
            acts.len(),
            params.n_models()
        )));
    }
    let b = acts[0].rows();
    for a in acts {
        if a.shape() != (b, params.d_model()) {
            return Err(Error::InvalidShape(format!(
                "activations are {}x{}, expected {b}x{}",
                a.rows(),
                a.cols(),
                params.d_model()
            )));
        }
    }
    Ok(b)
}

/// `Σ_i a_i · enc_iᵀ + enc_bias`, accumulated jointly in f64.
pub fn pre_activation<T: Real>(params: &CrosscoderParams<T>, acts: &[Matrix<T>]) -> Result<Matrix<T>> {
    let b = check_inputs(params, acts)?;
    let s = params.d_sparse();
    let mut pre = Matrix::zeros(b, s);
    par::for_each_row(pre.as_mut_slice(), s, |row, out| {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = params.enc_bias[k].as_f64();
            for (a, enc) in acts.iter().zip(&params.enc) {
                acc += crate::numerics::dot(a.row(row), enc.row(k));
            }
            *o = T::from_f64(acc);
        }
    });
    Ok(pre)
}

fn relu<T: Real>(pre: &Matrix<T>) -> Matrix<T> {
    pre.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Shared sparse code of a batch.
pub fn encode<T: Real>(params: &CrosscoderParams<T>, acts: &[Matrix<T>]) -> Result<Matrix<T>> {
    Ok(relu(&pre_activation(params, acts)?))
}

/// Code computed from one model's encoder branch plus the shared bias.
pub fn encode_single<T: Real>(params: &CrosscoderParams<T>, model_id: &str, acts: &Matrix<T>) -> Result<Matrix<T>> {
    let m = params.model_index(model_id)?;
    if acts.cols() != params.d_model() {
        return Err(Error::InvalidShape(format!(
            "activations have {} columns, d_model is {}",
            acts.cols(),
            params.d_model()
        )));
    }
    let s = params.d_sparse();
    let enc = &params.enc[m];
    let mut out = Matrix::zeros(acts.rows(), s);
    par::for_each_row(out.as_mut_slice(), s, |row, out| {
        for (k, o) in out.iter_mut().enumerate() {
            let v = params.enc_bias[k].as_f64() + crate::numerics::dot(acts.row(row), enc.row(k));
            *o = T::from_f64(v.max(0.0));
        }
    });
    Ok(out)
}

/// Per-model reconstructions of a code.
pub fn decode<T: Real>(params: &CrosscoderParams<T>, features: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
    if features.cols() != params.d_sparse() {
        return Err(Error::InvalidShape(format!(
            "code width {} differs from d_sparse {}",
            features.cols(),
            params.d_sparse()
        )));
    }
    params
        .dec
        .iter()
        .zip(&params.dec_bias)
        .map(|(dec, bias)| {
            let mut r = matmul(features, &dec.transpose())?;
            r.add_row_vector(bias)?;
            Ok(r)
        })
        .collect()
}

pub fn forward<T: Real>(params: &CrosscoderParams<T>, acts: &[Matrix<T>]) -> Result<ForwardCache<T>> {
    let pre_activation = pre_activation(params, acts)?;
    let features = relu(&pre_activation);
    let reconstructions = decode(params, &features)?;
    Ok(ForwardCache {
        pre_activation,
        features,
        reconstructions,
    })
}

fn breakdown<T: Real>(
    params: &CrosscoderParams<T>,
    acts: &[Matrix<T>],
    cache: &ForwardCache<T>,
    objective: Objective,
) -> Result<LossBreakdown> {
    let b = acts[0].rows().max(1) as f64;
    let mut recon_per_model = BTreeMap::new();
    let mut recon_total = 0.0;
    for ((id, a), r) in params.model_ids.iter().zip(acts).zip(&cache.reconstructions) {
        let err: f64 = a
            .as_slice()
            .iter()
            .zip(r.as_slice())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            / b;
        recon_total += err;
        recon_per_model.insert(id.clone(), err);
    }
    let norms = params.summed_dec_norms(objective.norm_kind);
    let sparsity = cache
        .features
        .column_sums()
        .iter()
        .zip(&norms)
        .map(|(f, n)| f * n)
        .sum::<f64>()
        / b;
    let total = recon_total + objective.beta * sparsity;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(LossBreakdown {
        recon_per_model,
        sparsity,
        total,
    })
}

pub fn loss<T: Real>(
    params: &CrosscoderParams<T>,
    acts: &[Matrix<T>],
    objective: Objective,
) -> Result<(LossBreakdown, ForwardCache<T>)> {
    let cache = forward(params, acts)?;
    let l = breakdown(params, acts, &cache, objective)?;
    Ok((l, cache))
}

/// Derivative of one decoder entry's norm contribution.
#[inline]
fn norm_grad(kind: NormKind, x: f64, col_l2: f64) -> f64 {
    match kind {
        NormKind::L1 => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        NormKind::L2 => {
            if col_l2 > 0.0 {
                x / col_l2
            } else {
                0.0
            }
        }
    }
}

/// Loss and exact gradients of `total` with respect to every parameter.
pub fn backward<T: Real>(
    params: &CrosscoderParams<T>,
    acts: &[Matrix<T>],
    objective: Objective,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let (l, cache) = loss(params, acts, objective)?;
    let batch = acts[0].rows();
    let (d, s) = (params.d_model(), params.d_sparse());
    let inv_b = 1.0 / batch.max(1) as f64;
    let beta = objective.beta;
    let mut grads = Gradients::zeros(params.model_ids.clone(), d, s);

    // d total / d â_i = 2 (â_i − a_i) / B
    let resid: Vec<Matrix<T>> = cache
        .reconstructions
        .iter()
        .zip(acts)
        .map(|(r, a)| {
            let mut g = r.sub(a)?;
            g.scale(T::from_f64(2.0 * inv_b));
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let feature_mean: Vec<f64> = cache.features.column_sums().iter().map(|x| x * inv_b).collect();
    let norms = params.summed_dec_norms(objective.norm_kind);

    // Code gradient: reconstruction path plus β·Σ_i‖dec_k^i‖/B from the penalty.
    let mut code_grad_acc = vec![0.0f64; batch * s];
    for (r, dec) in resid.iter().zip(&params.dec) {
        let g = matmul(r, dec)?;
        code_grad_acc
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(acc, &x)| *acc += x.as_f64());
    }
    let mut pre_grad = Matrix::<T>::zeros(batch, s);
    {
        let pre = &cache.pre_activation;
        let acc = &code_grad_acc;
        par::for_each_row(pre_grad.as_mut_slice(), s, |row, out| {
            for (k, o) in out.iter_mut().enumerate() {
                if pre.get(row, k) > T::zero() {
                    *o = T::from_f64(acc[row * s + k] + beta * norms[k] * inv_b);
                }
            }
        });
    }

    for m in 0..params.n_models() {
        // dec_i: reconstruction term (resid_iᵀ · f)ᵀ computed as fᵀ·resid_i to exploit sparsity.
        let recon_t = matmul_tn(&cache.features, &resid[m])?; // s × d
        let dec = &params.dec[m];
        let col_l2: Vec<f64> = (0..s).map(|k| NormKind::L2.of((0..d).map(|r| dec.get(r, k)))).collect();
        let g = &mut grads.dec[m];
        for r in 0..d {
            for k in 0..s {
                let x = dec.get(r, k).as_f64();
                let pen = beta * feature_mean[k] * norm_grad(objective.norm_kind, x, col_l2[k]);
                g.set(r, k, T::from_f64(recon_t.get(k, r).as_f64() + pen));
            }
        }
        grads.dec_bias[m] = resid[m].column_sums().into_iter().map(T::from_f64).collect();
        grads.enc[m] = matmul_tn(&pre_grad, &acts[m])?;
    }
    grads.enc_bias = pre_grad.column_sums().into_iter().map(T::from_f64).collect();

    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok((l, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::config::CrosscoderConfig;
    use crate::numerics::{finite_diff_check, seeded_rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> Matrix<f64> {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    fn hand_instance() -> CrosscoderParams<f64> {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 1, 1);
        p.enc[0] = scalar(2.0);
        p.enc[1] = scalar(3.0);
        p.enc_bias = vec![-1.0];
        p
    }

    #[test]
    fn hand_encode() {
        let p = hand_instance();
        let f = encode(&p, &[scalar(1.0), scalar(1.0)]).unwrap();
        assert_eq!(f.get(0, 0), 4.0);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_code() {
        let cfg = {
            let mut c = CrosscoderConfig::new(vec!["a".into(), "b".into(), "c".into()], 3, 0);
            c.d_sparse = 5;
            c
        };
        let p: CrosscoderParams<f64> = CrosscoderParams::init(&cfg, &mut seeded_rng(1, 0)).unwrap();
        let z = vec![Matrix::zeros(4, 3); 3];
        assert!(encode(&p, &z).unwrap().as_slice().iter().all(|&x| x == 0.0));
        assert!(encode_single(&p, "b", &z[0])
            .unwrap()
            .as_slice()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn negative_pre_activation_is_clipped() {
        let mut p = hand_instance();
        p.enc_bias = vec![-10.0];
        let pre = pre_activation(&p, &[scalar(1.0), scalar(1.0)]).unwrap();
        assert_eq!(pre.get(0, 0), -5.0);
        assert_eq!(encode(&p, &[scalar(1.0), scalar(1.0)]).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn model_count_mismatch() {
        let p = hand_instance();
        assert!(matches!(encode(&p, &[scalar(1.0)]), Err(Error::ModelSetMismatch(_))));
        assert!(matches!(
            encode_single(&p, "x", &scalar(1.0)),
            Err(Error::ModelSetMismatch(_))
        ));
    }

    #[test]
    fn single_branch_hand_value() {
        let p = hand_instance();
        // ReLU(3·2 − 1) on the "t" branch.
        assert_eq!(encode_single(&p, "t", &scalar(2.0)).unwrap().get(0, 0), 5.0);
        assert_eq!(encode_single(&p, "o", &scalar(0.25)).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn decode_zero_code_is_bias() {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 2, 3);
        p.dec_bias = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let r = decode(&p, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(r[0].row(1), &[1.0, 2.0]);
        assert_eq!(r[1].row(0), &[-1.0, 0.5]);
    }

    #[test]
    fn decode_one_hot_is_scaled_column() {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 2, 3);
        p.dec[1] = Matrix::from_rows(&[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]).unwrap();
        p.dec_bias[1] = vec![0.5, 0.5];
        let f = Matrix::from_rows(&[[0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(decode(&p, &f).unwrap()[1].row(0), &[4.5, 10.5]);
        assert!(decode(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn decode_matches_naive_loops() {
        let mut rng = seeded_rng(9, 0);
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 3, 4);
        for m in 0..2 {
            p.dec[m] = Matrix::from_fn(3, 4, |_, _| rng.sample(StandardNormal));
            p.dec_bias[m] = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        }
        let f = Matrix::from_fn(5, 4, |_, _| rng.random_range(0.0..2.0));
        let r = decode(&p, &f).unwrap();
        for m in 0..2 {
            for b in 0..5 {
                for d in 0..3 {
                    let mut want = p.dec_bias[m][d];
                    for k in 0..4 {
                        want += p.dec[m].get(d, k) * f.get(b, k);
                    }
                    assert!((r[m].get(b, d) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hand_loss_sparsity_only() {
        let mut p = hand_instance();
        p.dec[0] = scalar(1.0);
        p.dec[1] = scalar(3.0);
        // f = 4, so â_0 = 4 + b_0 and â_1 = 12 + b_1; choose biases for â = a = 1.
        p.dec_bias = vec![vec![-3.0], vec![-11.0]];
        let (l, _) = loss(&p, &[scalar(1.0), scalar(1.0)], Objective::default()).unwrap();
        assert_eq!(l.recon_per_model["o"], 0.0);
        assert_eq!(l.recon_per_model["t"], 0.0);
        assert_eq!(l.sparsity, 16.0);
        assert_eq!(l.total, 32.0);
    }

    #[test]
    fn perfect_trivial_reconstruction_is_zero_loss() {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 2, 2);
        p.enc_bias = vec![-1.0, -1.0];
        let a = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        p.dec_bias = vec![a.row(0).to_vec(), b.row(0).to_vec()];
        let (l, _) = loss(&p, &[a, b], Objective::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn gradients_vanish_at_an_optimum_with_no_penalty() {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["o".into(), "t".into()], 2, 2);
        p.enc[0] = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        p.dec[0] = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        p.dec[1] = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let a0 = Matrix::from_rows(&[[0.5, 1.5], [2.0, 0.25]]).unwrap();
        let a1 = a0.map(|x| 2.0 * x);
        let obj = Objective {
            beta: 0.0,
            norm_kind: NormKind::L1,
        };
        let (l, g) = backward(&p, &[a0, a1], obj).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inactive_feature_gets_no_encoder_gradient() {
        let mut rng = seeded_rng(4, 0);
        let mut cfg = CrosscoderConfig::new(vec!["o".into(), "t".into()], 3, 0);
        cfg.d_sparse = 4;
        let mut p: CrosscoderParams<f64> = CrosscoderParams::init(&cfg, &mut rng).unwrap();
        p.enc_bias[2] = -1e3;
        let acts: Vec<Matrix<f64>> = (0..2)
            .map(|_| Matrix::from_fn(6, 3, |_, _| rng.sample(StandardNormal)))
            .collect();
        let (_, g) = backward(&p, &acts, Objective::default()).unwrap();
        for m in 0..2 {
            assert!(g.enc[m].row(2).iter().all(|&x| x == 0.0));
        }
        assert_eq!(g.enc_bias[2], 0.0);
    }

    #[test]
    fn loss_decomposes() {
        let mut rng = seeded_rng(6, 0);
        let mut cfg = CrosscoderConfig::new(vec!["o".into(), "s".into(), "r".into()], 4, 0);
        cfg.d_sparse = 8;
        let p: CrosscoderParams<f64> = CrosscoderParams::init(&cfg, &mut rng).unwrap();
        let acts: Vec<Matrix<f64>> = (0..3)
            .map(|_| Matrix::from_fn(5, 4, |_, _| rng.sample(StandardNormal)))
            .collect();
        for kind in [NormKind::L1, NormKind::L2] {
            let obj = Objective {
                beta: 2.0,
                norm_kind: kind,
            };
            let (l, _) = loss(&p, &acts, obj).unwrap();
            let sum: f64 = l.recon_per_model.values().sum::<f64>() + 2.0 * l.sparsity;
            assert!((l.total - sum).abs() <= 1e-6 * l.total.abs());
        }
    }

    fn random_instance(seed: u64, d: usize, s: usize, k: usize, b: usize) -> (CrosscoderParams<f64>, Vec<Matrix<f64>>) {
        let ids = ["o", "s", "r"][..k].iter().map(|x| x.to_string()).collect();
        let mut rng = seeded_rng(seed, 0);
        let mut p = CrosscoderParams::<f64>::zeros(ids, d, s);
        for m in 0..k {
            p.enc[m] = Matrix::from_fn(s, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
            p.dec[m] = Matrix::from_fn(d, s, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
            p.dec_bias[m] = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        }
        p.enc_bias = (0..s).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let acts = (0..k)
            .map(|_| Matrix::from_fn(b, d, |_, _| rng.sample(StandardNormal)))
            .collect();
        (p, acts)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [NormKind::L1, NormKind::L2] {
            let (p, acts) = random_instance(11, 8, 16, 3, 4);
            let obj = Objective {
                beta: 2.0,
                norm_kind: kind,
            };
            let (_, g) = backward(&p, &acts, obj).unwrap();
            let mut flat = p.to_flat();
            let r = finite_diff_check(
                |x| loss(&p.with_flat(x), &acts, obj).unwrap().0.total,
                &mut flat,
                &g.to_flat(),
                usize::MAX,
                1e-6,
                &mut seeded_rng(0, 0),
            );
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn feature_permutation_leaves_loss_unchanged() {
        let (p, acts) = random_instance(12, 5, 9, 2, 7);
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let q = p.permute_features(&perm);
        let a = loss(&p, &acts, Objective::default()).unwrap().0.total;
        let b = loss(&q, &acts, Objective::default()).unwrap().0.total;
        assert!((a - b).abs() <= 1e-6 * a.abs());
    }

    #[test]
    fn single_branch_agrees_when_other_models_are_silent() {
        let (p, acts) = random_instance(13, 4, 8, 3, 5);
        let mut only = vec![Matrix::zeros(5, 4); 3];
        only[1] = acts[1].clone();
        let joint = encode(&p, &only).unwrap();
        let single = encode_single(&p, "s", &acts[1]).unwrap();
        assert!(joint.max_abs_diff(&single) < 1e-12);
    }
}
