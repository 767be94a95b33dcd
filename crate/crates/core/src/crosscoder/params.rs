use rand::Rng;

use super::config::{CrosscoderConfig, NormKind};
use crate::error::{Error, Result};
use crate::numerics::{unit_sphere, Matrix, Real};

/// Initial L2 norm of every decoder column.
pub const INIT_DECODER_NORM: f64 = 0.1;

/// Crosscoder weights. Feature `k` owns encoder row `k` of every model, entry
/// `k` of the shared encoder bias and decoder column `k` of every model.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderParams<T: Real = f32> {
    pub model_ids: Vec<String>,
    /// Per model, `d_sparse × d_model`.
    pub enc: Vec<Matrix<T>>,
    /// Shared across models, length `d_sparse`.
    pub enc_bias: Vec<T>,
    /// Per model, `d_model × d_sparse`.
    pub dec: Vec<Matrix<T>>,
    /// Per model, length `d_model`.
    pub dec_bias: Vec<Vec<T>>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = CrosscoderParams<T>;

impl<T: Real> CrosscoderParams<T> {
    pub fn zeros(model_ids: Vec<String>, d_model: usize, d_sparse: usize) -> Self {
        let k = model_ids.len();
        Self {
            model_ids,
            enc: vec![Matrix::zeros(d_sparse, d_model); k],
            enc_bias: vec![T::zero(); d_sparse],
            dec: vec![Matrix::zeros(d_model, d_sparse); k],
            dec_bias: vec![vec![T::zero(); d_model]; k],
        }
    }

    /// Sphere-uniform decoder columns at norm [`INIT_DECODER_NORM`], encoders tied
    /// to the decoder transpose, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &CrosscoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, s) = (config.d_model, config.d_sparse);
        let mut p = Self::zeros(config.model_ids.clone(), d, s);
        for m in 0..p.n_models() {
            for k in 0..s {
                let col: Vec<T> = unit_sphere(rng, d)
                    .into_iter()
                    .map(|x| T::from_f64(x * INIT_DECODER_NORM))
                    .collect();
                p.dec[m].set_column(k, &col);
            }
            p.enc[m] = p.dec[m].transpose();
        }
        Ok(p)
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn d_model(&self) -> usize {
        self.dec[0].rows()
    }

    pub fn d_sparse(&self) -> usize {
        self.enc_bias.len()
    }

    pub fn model_index(&self, model_id: &str) -> Result<usize> {
        self.model_ids
            .iter()
            .position(|m| m == model_id)
            .ok_or_else(|| Error::ModelSetMismatch(format!("model {model_id:?} not in {:?}", self.model_ids)))
    }

    pub fn dec_column(&self, model: usize, k: usize) -> Vec<T> {
        self.dec[model].column(k)
    }

    /// Decoder-column norm of feature `k` summed over models.
    pub fn summed_dec_norms(&self, kind: NormKind) -> Vec<f64> {
        let s = self.d_sparse();
        let mut out = vec![0.0; s];
        for dec in &self.dec {
            for (k, o) in out.iter_mut().enumerate() {
                *o += kind.of((0..dec.rows()).map(|r| dec.get(r, k)));
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> CrosscoderParams<U> {
        CrosscoderParams {
            model_ids: self.model_ids.clone(),
            enc: self.enc.iter().map(Matrix::cast).collect(),
            enc_bias: self.enc_bias.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
            dec: self.dec.iter().map(Matrix::cast).collect(),
            dec_bias: self
                .dec_bias
                .iter()
                .map(|b| b.iter().map(|&x| U::from_f64(x.as_f64())).collect())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.enc.iter().all(Matrix::all_finite)
            && self.dec.iter().all(Matrix::all_finite)
            && self.enc_bias.iter().all(|x| x.is_finite())
            && self.dec_bias.iter().flatten().all(|x| x.is_finite())
    }

    /// Moves feature `perm[k]` to position `k`.
    pub fn permute_features(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.d_sparse());
        let mut out = self.clone();
        for m in 0..self.n_models() {
            out.enc[m] = self.enc[m].gather_rows(perm);
            for (k, &src) in perm.iter().enumerate() {
                out.dec[m].set_column(k, &self.dec[m].column(src));
            }
        }
        out.enc_bias = perm.iter().map(|&src| self.enc_bias[src]).collect();
        out
    }

    /// Multiplies every decoder column of every model by `c`.
    pub fn scale_decoders(&mut self, c: T) {
        self.dec.iter_mut().for_each(|d| d.scale(c));
    }

    /// Names and flat storage of every tensor, in checkpoint order: per model
    /// `enc`, `dec`, `dec_bias`, then the shared `enc_bias`.
    pub fn tensors(&self) -> Vec<(String, (usize, usize), &[T])> {
        let mut v: Vec<(String, (usize, usize), &[T])> = Vec::new();
        for (m, id) in self.model_ids.iter().enumerate() {
            v.push((format!("enc/{id}"), self.enc[m].shape(), self.enc[m].as_slice()));
            v.push((format!("dec/{id}"), self.dec[m].shape(), self.dec[m].as_slice()));
            v.push((format!("dec_bias/{id}"), (1, self.dec_bias[m].len()), &self.dec_bias[m]));
        }
        v.push(("enc_bias".into(), (1, self.enc_bias.len()), &self.enc_bias));
        v
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for ((enc, dec), bias) in self
            .enc
            .iter_mut()
            .zip(self.dec.iter_mut())
            .zip(self.dec_bias.iter_mut())
        {
            v.push(enc.as_mut_slice());
            v.push(dec.as_mut_slice());
            v.push(bias.as_mut_slice());
        }
        v.push(self.enc_bias.as_mut_slice());
        v
    }

    /// All values in a fixed order: per model (enc, dec, dec_bias), then enc_bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for m in 0..self.n_models() {
            v.extend(self.enc[m].as_slice().iter().map(|x| x.as_f64()));
            v.extend(self.dec[m].as_slice().iter().map(|x| x.as_f64()));
            v.extend(self.dec_bias[m].iter().map(|x| x.as_f64()));
        }
        v.extend(self.enc_bias.iter().map(|x| x.as_f64()));
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat), using `self` for shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = flat.iter().map(|&x| T::from_f64(x));
        for m in 0..self.n_models() {
            out.enc[m]
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = it.next().unwrap());
            out.dec[m]
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = it.next().unwrap());
            out.dec_bias[m].iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        out.enc_bias.iter_mut().for_each(|x| *x = it.next().unwrap());
        assert!(it.next().is_none(), "flat vector longer than parameter set");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_norm, seeded_rng};

    fn cfg() -> CrosscoderConfig {
        let mut c = CrosscoderConfig::new(vec!["base".into(), "tuned".into()], 2, 0);
        c.d_sparse = 4;
        c
    }

    #[test]
    fn decoder_columns_start_at_fixed_norm() {
        let p: CrosscoderParams = CrosscoderParams::init(&cfg(), &mut seeded_rng(0, 0)).unwrap();
        for m in 0..2 {
            for k in 0..4 {
                assert!((l2_norm(&p.dec_column(m, k)) - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_is_tied_transpose_and_biases_zero() {
        let p: CrosscoderParams = CrosscoderParams::init(&cfg(), &mut seeded_rng(0, 0)).unwrap();
        for m in 0..2 {
            assert_eq!(p.enc[m], p.dec[m].transpose());
            assert!(p.dec_bias[m].iter().all(|&x| x == 0.0));
        }
        assert!(p.enc_bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a: CrosscoderParams = CrosscoderParams::init(&cfg(), &mut seeded_rng(5, 1)).unwrap();
        let b: CrosscoderParams = CrosscoderParams::init(&cfg(), &mut seeded_rng(5, 1)).unwrap();
        let bits = |p: &CrosscoderParams| p.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn flat_round_trip() {
        let p: CrosscoderParams<f64> = CrosscoderParams::init(&cfg(), &mut seeded_rng(2, 0)).unwrap();
        assert_eq!(p.with_flat(&p.to_flat()), p);
    }
}
