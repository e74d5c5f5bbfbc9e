//! Nested text/image classifier-free guidance over dense prediction vectors.
//!
//! Text guidance is applied first, then image guidance on top of the
//! text-guided prediction:
//!
//! ```text
//! v_text  = v_t_unc + s_t * (v_t    - v_t_unc)
//! v_final = v_i_unc + s_i * (v_text - v_i_unc)
//! ```
//!
//! The kernel is agnostic to the prediction parameterization (noise, velocity, ...).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEXT_SCALE: f64 = 4.0;
pub const DEFAULT_IMAGE_SCALE: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("prediction lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
}

/// A finite dense prediction in model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GuidanceError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(PredictionVector(values))
        } else {
            Err(GuidanceError::NonFiniteInput("prediction"))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PredictionVector {
    type Error = GuidanceError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        PredictionVector::new(v)
    }
}

impl From<PredictionVector> for Vec<f64> {
    fn from(v: PredictionVector) -> Self {
        v.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s_t: f64,
    pub s_i: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s_t: DEFAULT_TEXT_SCALE,
            s_i: DEFAULT_IMAGE_SCALE,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !self.s_t.is_finite() {
            return Err(GuidanceError::NonFiniteInput("s_t"));
        }
        if !self.s_i.is_finite() {
            return Err(GuidanceError::NonFiniteInput("s_i"));
        }
        Ok(())
    }
}

/// `uncond + scale * (cond - uncond)`, elementwise. Unit scale returns `cond`
/// bit for bit; the formula alone can be off by one ulp there.
fn guide(
    cond: &[f64],
    uncond: &[f64],
    scale: f64,
    scale_name: &'static str,
) -> Result<PredictionVector, GuidanceError> {
    if cond.len() != uncond.len() {
        return Err(GuidanceError::LengthMismatch(cond.len(), uncond.len()));
    }
    if !scale.is_finite() {
        return Err(GuidanceError::NonFiniteInput(scale_name));
    }
    if scale == 1.0 {
        return PredictionVector::new(cond.to_vec());
    }
    let out = cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect();
    PredictionVector::new(out)
}

pub fn apply_text_cfg(
    v_t: &PredictionVector,
    v_t_unc: &PredictionVector,
    s_t: f64,
) -> Result<PredictionVector, GuidanceError> {
    guide(&v_t.0, &v_t_unc.0, s_t, "s_t")
}

pub fn apply_image_cfg(
    v_text: &PredictionVector,
    v_i_unc: &PredictionVector,
    s_i: f64,
) -> Result<PredictionVector, GuidanceError> {
    guide(&v_text.0, &v_i_unc.0, s_i, "s_i")
}

pub fn nested_cfg(
    v_t: &PredictionVector,
    v_t_unc: &PredictionVector,
    v_i_unc: &PredictionVector,
    cfg: &GuidanceConfig,
) -> Result<PredictionVector, GuidanceError> {
    if v_t.len() != v_i_unc.len() {
        return Err(GuidanceError::LengthMismatch(v_t.len(), v_i_unc.len()));
    }
    let v_text = apply_text_cfg(v_t, v_t_unc, cfg.s_t)?;
    apply_image_cfg(&v_text, v_i_unc, cfg.s_i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> PredictionVector {
        PredictionVector::new(v.to_vec()).unwrap()
    }

    fn close(a: &PredictionVector, b: &PredictionVector) -> bool {
        a.len() == b.len()
            && a.as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
    }

    #[test]
    fn text_cfg_examples() {
        let v_t = pv(&[2.0, -1.5]);
        let v_u = pv(&[1.0, 0.25]);
        assert_eq!(apply_text_cfg(&v_t, &v_u, 1.0).unwrap(), v_t);
        assert_eq!(apply_text_cfg(&v_t, &v_u, 0.0).unwrap(), v_u);
        // 1 + 4 * (2 - 1) = 5
        assert_eq!(apply_text_cfg(&pv(&[2.0]), &pv(&[1.0]), 4.0).unwrap(), pv(&[5.0]));
    }

    #[test]
    fn unit_scale_is_bit_exact() {
        // -4.9 + (5.28 - -4.9) rounds to 5.279999999999999.
        assert_eq!(apply_text_cfg(&pv(&[5.28]), &pv(&[-4.9]), 1.0).unwrap(), pv(&[5.28]));
    }

    #[test]
    fn image_cfg_examples() {
        // 0 + 2 * (5 - 0) = 10
        assert_eq!(apply_image_cfg(&pv(&[5.0]), &pv(&[0.0]), 2.0).unwrap(), pv(&[10.0]));
        let v = pv(&[0.3, 7.0]);
        assert_eq!(apply_image_cfg(&v, &pv(&[1.0, 2.0]), 1.0).unwrap(), v);
        assert_eq!(apply_image_cfg(&v, &v, 123.0).unwrap(), v);
    }

    #[test]
    fn nested_examples() {
        let cfg = GuidanceConfig::default();
        assert_eq!((cfg.s_t, cfg.s_i), (4.0, 2.0));
        let out = nested_cfg(&pv(&[2.0]), &pv(&[1.0]), &pv(&[0.0]), &cfg).unwrap();
        assert_eq!(out, pv(&[10.0]));
        let v_t = pv(&[0.5, -2.0, 9.0]);
        let unit = GuidanceConfig { s_t: 1.0, s_i: 1.0 };
        assert!(close(
            &nested_cfg(&v_t, &pv(&[1.0, 1.0, 1.0]), &pv(&[3.0, 3.0, 3.0]), &unit).unwrap(),
            &v_t
        ));
    }

    #[test]
    fn stage_order_matters() {
        // Image stage first: 0 + 2 * (2 - 0) = 4; then text stage: 1 + 4 * (4 - 1) = 13.
        let swapped = apply_text_cfg(
            &apply_image_cfg(&pv(&[2.0]), &pv(&[0.0]), 2.0).unwrap(),
            &pv(&[1.0]),
            4.0,
        )
        .unwrap();
        assert_eq!(swapped, pv(&[13.0]));
        let nested = nested_cfg(&pv(&[2.0]), &pv(&[1.0]), &pv(&[0.0]), &GuidanceConfig::default()).unwrap();
        assert_ne!(swapped, nested);
    }

    #[test]
    fn errors() {
        assert_eq!(
            apply_text_cfg(&pv(&[1.0]), &pv(&[1.0, 2.0]), 1.0),
            Err(GuidanceError::LengthMismatch(1, 2))
        );
        assert!(PredictionVector::new(vec![f64::NAN]).is_err());
        assert_eq!(
            apply_text_cfg(&pv(&[1.0]), &pv(&[1.0]), f64::INFINITY),
            Err(GuidanceError::NonFiniteInput("s_t"))
        );
        let cfg = GuidanceConfig::default();
        assert!(nested_cfg(&pv(&[1.0]), &pv(&[1.0]), &pv(&[1.0, 2.0]), &cfg).is_err());
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..16)
    }

    proptest! {
        #[test]
        fn all_equal_is_fixed_point(v in vec3(), s_t in -10.0f64..10.0, s_i in -10.0f64..10.0) {
            let p = pv(&v);
            let out = nested_cfg(&p, &p, &p, &GuidanceConfig { s_t, s_i }).unwrap();
            for (a, b) in out.as_slice().iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn affine_in_text_scale(v in vec3(), s_t in -5.0f64..5.0, s_i in -5.0f64..5.0) {
            let n = v.len();
            let v_t = pv(&v);
            let v_tu = pv(&v.iter().map(|x| x * 0.5 - 1.0).collect::<Vec<_>>());
            let v_iu = pv(&vec![0.25; n]);
            let at = |s: f64| nested_cfg(&v_t, &v_tu, &v_iu, &GuidanceConfig { s_t: s, s_i }).unwrap();
            let (a, b) = (at(s_t), at(s_t + 1.0));
            // d v_final / d s_t = s_i * (v_t - v_t_unc)
            for (i, x) in v.iter().enumerate() {
                let slope = s_i * (x - (x * 0.5 - 1.0));
                let fd = b.as_slice()[i] - a.as_slice()[i];
                prop_assert!((fd - slope).abs() <= 1e-12 * slope.abs().max(1.0));
            }
        }
    }
}
