use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crosscoder::CrosscoderParams;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::SCHEMA_VERSION;

/// Clamp value used when amplifying features.
pub const DEFAULT_AMPLIFY_VALUE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Zero,
    Amplify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFeature {
    pub index: usize,
    pub enc_row: Vec<f32>,
    pub enc_bias: f32,
    pub dec_col: Vec<f32>,
}

impl SpecFeature {
    /// Single-branch activation of this feature on `a`.
    pub fn activation(&self, a: &[f32]) -> f64 {
        let pre: f64 = self
            .enc_row
            .iter()
            .zip(a)
            .map(|(&w, &x)| w as f64 * x as f64)
            .sum::<f64>()
            + self.enc_bias as f64;
        pre.max(0.0)
    }
}

/// Everything an activation hook needs to steer a set of features in one
/// model. For each listed feature the hook adds
/// `(target − f(a)) · dec_col` to the residual vector `a`, where `f` is the
/// feature's single-branch activation and `target` is 0 (zero) or `value`
/// (amplify).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    #[serde(default = "current_schema")]
    pub schema_version: u32,
    pub crosscoder_id: String,
    pub model_id: String,
    pub layer_index: u32,
    pub d_model: usize,
    pub mode: InterventionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub features: Vec<SpecFeature>,
}

fn current_schema() -> u32 {
    SCHEMA_VERSION
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.value) {
            (InterventionMode::Amplify, None) => return Err(Error::InvalidConfig("amplify mode needs a value".into())),
            (InterventionMode::Zero, Some(_)) => return Err(Error::InvalidConfig("zero mode takes no value".into())),
            (_, Some(v)) if !v.is_finite() => return Err(Error::InvalidConfig("value must be finite".into())),
            _ => {}
        }
        for f in &self.features {
            if f.enc_row.len() != self.d_model || f.dec_col.len() != self.d_model {
                return Err(Error::InvalidShape(format!(
                    "feature {} vectors do not have length d_model = {}",
                    f.index, self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> f64 {
        match self.mode {
            InterventionMode::Zero => 0.0,
            InterventionMode::Amplify => self.value.unwrap_or(DEFAULT_AMPLIFY_VALUE),
        }
    }

    /// The patched activation vector.
    pub fn apply(&self, a: &[f32]) -> Result<Vec<f32>> {
        if a.len() != self.d_model {
            return Err(Error::InvalidShape(format!(
                "activation has length {}, spec expects {}",
                a.len(),
                self.d_model
            )));
        }
        let target = self.target();
        let mut out: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        for f in &self.features {
            let c = target - f.activation(a);
            for (o, &d) in out.iter_mut().zip(&f.dec_col) {
                *o += c * d as f64;
            }
        }
        Ok(out.into_iter().map(|x| x as f32).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Bundles the target model's encoder rows, bias entries and decoder columns
/// for `features`. `value` is only used in amplify mode.
///
/// `input_scale` is the normalization factor the crosscoder saw on this
/// model's activations. It is folded into the exported vectors (encoder rows
/// times the scale, decoder columns divided by it) so the spec applies to raw
/// activations.
#[allow(clippy::too_many_arguments)]
pub fn export_intervention<T: Real>(
    params: &CrosscoderParams<T>,
    crosscoder_id: &str,
    layer_index: u32,
    features: &[usize],
    target_model_id: &str,
    mode: InterventionMode,
    value: f64,
    input_scale: f64,
) -> Result<InterventionSpec> {
    if features.is_empty() {
        return Err(Error::InvalidConfig("no features to export".into()));
    }
    if !(input_scale > 0.0 && input_scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "input scale must be positive, got {input_scale}"
        )));
    }
    let m = params.model_index(target_model_id)?;
    let d_sparse = params.d_sparse();
    let to32 = |v: Vec<T>, c: f64| v.into_iter().map(|x| (x.as_f64() * c) as f32).collect::<Vec<f32>>();
    let features = features
        .iter()
        .map(|&index| {
            if index >= d_sparse {
                return Err(Error::InvalidFeature { index, d_sparse });
            }
            Ok(SpecFeature {
                index,
                enc_row: to32(params.enc[m].row(index).to_vec(), input_scale),
                enc_bias: params.enc_bias[index].as_f64() as f32,
                dec_col: to32(params.dec_column(m, index), 1.0 / input_scale),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = InterventionSpec {
        schema_version: SCHEMA_VERSION,
        crosscoder_id: crosscoder_id.into(),
        model_id: target_model_id.into(),
        layer_index,
        d_model: params.d_model(),
        mode,
        value: (mode == InterventionMode::Amplify).then_some(value),
        features,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn toy(mode: InterventionMode, value: Option<f64>, dec: Vec<f32>) -> InterventionSpec {
        InterventionSpec {
            schema_version: SCHEMA_VERSION,
            crosscoder_id: "cc".into(),
            model_id: "rl".into(),
            layer_index: 3,
            d_model: 2,
            mode,
            value,
            features: vec![SpecFeature {
                index: 0,
                enc_row: vec![1.0, 0.0],
                enc_bias: 0.0,
                dec_col: dec,
            }],
        }
    }

    #[test]
    fn amplify_hand_delta() {
        let spec = toy(InterventionMode::Amplify, Some(3.0), vec![0.5, -0.5]);
        let out = spec.apply(&[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![2.0, -1.0]);
    }

    #[test]
    fn zero_mode_on_inactive_feature_is_a_noop() {
        let spec = toy(InterventionMode::Zero, None, vec![0.5, -0.5]);
        let a = [-2.0f32, 7.0];
        assert_eq!(spec.apply(&a).unwrap(), a.to_vec());
    }

    #[test]
    fn zero_mode_removes_an_orthonormal_feature() {
        let spec = toy(InterventionMode::Zero, None, vec![1.0, 0.0]);
        let out = spec.apply(&[1.5, 2.0]).unwrap();
        assert_eq!(spec.features[0].activation(&out), 0.0);
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn mode_and_value_must_agree() {
        assert!(toy(InterventionMode::Amplify, None, vec![0.0, 0.0]).validate().is_err());
        assert!(toy(InterventionMode::Zero, Some(1.0), vec![0.0, 0.0])
            .validate()
            .is_err());
        assert!(toy(InterventionMode::Zero, None, vec![0.0]).validate().is_err());
    }

    #[test]
    fn export_bundles_target_model_vectors() {
        let mut p = CrosscoderParams::<f32>::zeros(vec!["base".into(), "rl".into()], 2, 3);
        p.enc[1] = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        p.dec[1] = Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]).unwrap();
        p.enc_bias = vec![-1.0, -2.0, -3.0];
        let spec = export_intervention(
            &p,
            "cc",
            5,
            &[2],
            "rl",
            InterventionMode::Amplify,
            DEFAULT_AMPLIFY_VALUE,
            1.0,
        )
        .unwrap();
        assert_eq!(spec.value, Some(3.0));
        assert_eq!(spec.features[0].enc_row, vec![5.0, 6.0]);
        assert_eq!(spec.features[0].enc_bias, -3.0);
        assert_eq!(spec.features[0].dec_col, vec![0.3, 0.6]);
        let zero = export_intervention(&p, "cc", 5, &[0], "rl", InterventionMode::Zero, 3.0, 1.0).unwrap();
        assert_eq!(zero.value, None);
        assert!(matches!(
            export_intervention(&p, "cc", 5, &[3], "rl", InterventionMode::Zero, 3.0, 1.0),
            Err(Error::InvalidFeature { index: 3, d_sparse: 3 })
        ));
        assert!(export_intervention(&p, "cc", 5, &[0], "sft", InterventionMode::Zero, 3.0, 1.0).is_err());
    }

    #[test]
    fn folded_scale_matches_scaled_space() {
        let mut p = CrosscoderParams::<f64>::zeros(vec!["base".into(), "rl".into()], 2, 2);
        p.enc[1] = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        p.dec[1] = Matrix::from_rows(&[[0.6, 1.0], [0.8, 0.0]]).unwrap();
        p.enc_bias = vec![-0.5, 0.0];
        let s = 4.0;
        let spec = export_intervention(&p, "cc", 0, &[0], "rl", InterventionMode::Amplify, 3.0, s).unwrap();
        let raw = [0.5f32, 0.25];
        let scaled: Vec<f32> = raw.iter().map(|x| x * s as f32).collect();
        let unit = export_intervention(&p, "cc", 0, &[0], "rl", InterventionMode::Amplify, 3.0, 1.0).unwrap();
        assert!((spec.features[0].activation(&raw) - unit.features[0].activation(&scaled)).abs() < 1e-6);
        let patched_raw = spec.apply(&raw).unwrap();
        let patched_scaled = unit.apply(&scaled).unwrap();
        for (r, q) in patched_raw.iter().zip(&patched_scaled) {
            assert!((r * s as f32 - q).abs() < 1e-5);
        }
        assert!(export_intervention(&p, "cc", 0, &[0], "rl", InterventionMode::Zero, 3.0, 0.0).is_err());
    }

    #[test]
    fn json_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = toy(InterventionMode::Zero, None, vec![0.5, -0.5]);
        spec.save(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["mode"], "zero");
        assert!(v.get("value").is_none());
        assert_eq!(v["features"][0]["dec_col"][1], -0.5);
        assert_eq!(InterventionSpec::load(&path).unwrap(), spec);

        let no_version = r#"{"crosscoder_id":"c","model_id":"m","layer_index":0,"d_model":1,
            "mode":"amplify","value":3.0,"features":[]}"#;
        std::fs::write(&path, no_version).unwrap();
        assert_eq!(InterventionSpec::load(&path).unwrap().target(), 3.0);
    }
}
