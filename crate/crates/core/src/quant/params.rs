//! Per-tensor affine uint8 mapping.
//!
//! A real value `x` maps to `q = clamp(round(x / scale) + zero_point, 0, 255)`
//! and back to `scale * (q - zero_point)`. Ranges are always widened to
//! contain zero so that `0.0` survives the round trip exactly, which keeps
//! zero padding and ReLU floors free of quantization error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale / zero-point pair for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    #[serde(with = "wide_f32")]
    pub scale: f32,
    pub zero_point: u8,
}

/// Rounds half away from negative infinity (`floor(v + 0.5)`).
///
/// Used for every rounding step in the quantized path so results do not
/// depend on the platform's ties-to-even behaviour.
#[inline]
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: u8) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::NonFiniteRange {
                min: scale,
                max: scale,
            });
        }
        Ok(Self { scale, zero_point })
    }

    /// Unit scale, zero offset. Integers in `[0, 255]` map to themselves.
    pub const IDENTITY: QuantParams = QuantParams {
        scale: 1.0,
        zero_point: 0,
    };

    #[inline]
    pub fn quantize(&self, x: f32) -> u8 {
        let q = round_half_up(x as f64 / self.scale as f64) + self.zero_point as f64;
        q.clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f32 {
        (self.scale as f64 * (q as i32 - self.zero_point as i32) as f64) as f32
    }

    /// Smallest and largest representable real values.
    pub fn representable_range(&self) -> (f32, f32) {
        (self.dequantize(0), self.dequantize(255))
    }
}

/// Derives parameters covering `[min, max]` widened to include zero.
///
/// `scale = (max' - min') / 255`, `zero_point = round(-min' / scale)`. The
/// all-zero range maps to `scale = 1, zero_point = 0`.
pub fn compute_qparams(min: f32, max: f32) -> Result<QuantParams> {
    if !min.is_finite() || !max.is_finite() || min > max {
        return Err(Error::NonFiniteRange { min, max });
    }
    let lo = (min as f64).min(0.0);
    let hi = (max as f64).max(0.0);
    if hi == lo {
        return Ok(QuantParams::IDENTITY);
    }
    let span = hi - lo;
    let scale = (span / 255.0) as f32;
    // Computed from the exact span rather than the rounded f32 scale so that
    // symmetric ranges land on the half-way tie deterministically.
    let zero_point = round_half_up(255.0 * -lo / span).clamp(0.0, 255.0) as u8;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NonFiniteRange { min, max });
    }
    Ok(QuantParams { scale, zero_point })
}

/// Parameters from the observed extremes of `values` (empty → degenerate range).
pub fn qparams_for_values(values: &[f32]) -> Result<QuantParams> {
    let (min, max) = min_max(values);
    compute_qparams(min, max)
}

pub(crate) fn min_max(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((0.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Quantizes an f32 tensor. Already-quantized tensors are re-mapped through
/// their real values.
pub fn quantize_tensor(t: &Tensor, qp: QuantParams) -> Tensor {
    let values: Vec<u8> = t.f32_values().iter().map(|&x| qp.quantize(x)).collect();
    Tensor::from_u8(t.shape().to_vec(), values, qp).expect("shape preserved")
}

pub fn dequantize_tensor(t: &Tensor) -> Tensor {
    t.to_f32()
}

/// Serializes an f32 through f64 so the JSON text carries every digit of the
/// exact binary value (at least 9 significant digits for non-trivial scales).
pub(crate) mod wide_f32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(*v as f64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        Ok(f64::deserialize(d)? as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_range() {
        let qp = compute_qparams(0.0, 255.0).unwrap();
        assert_eq!(qp.scale, 1.0);
        assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn symmetric_range_rounds_tie_up() {
        let qp = compute_qparams(-1.0, 1.0).unwrap();
        assert!((qp.scale - 2.0 / 255.0).abs() < 1e-9);
        assert!((qp.scale - 0.007843).abs() < 1e-6);
        assert_eq!(qp.zero_point, 128);
    }

    #[test]
    fn degenerate_range() {
        assert_eq!(compute_qparams(0.0, 0.0).unwrap(), QuantParams::IDENTITY);
    }

    #[test]
    fn positive_only_range_is_widened_to_zero() {
        let qp = compute_qparams(2.0, 4.0).unwrap();
        assert_eq!(qp.zero_point, 0);
        assert!((qp.scale - 4.0 / 255.0).abs() < 1e-9);
        assert_eq!(qp.dequantize(qp.quantize(0.0)), 0.0);
    }

    #[test]
    fn non_finite_range_rejected() {
        assert!(matches!(
            compute_qparams(f32::NAN, 1.0),
            Err(Error::NonFiniteRange { .. })
        ));
        assert!(matches!(
            compute_qparams(0.0, f32::INFINITY),
            Err(Error::NonFiniteRange { .. })
        ));
        assert!(compute_qparams(2.0, 1.0).is_err());
    }

    #[test]
    fn tenth_scale_example() {
        let qp = QuantParams::new(0.1, 0).unwrap();
        let q = qp.quantize(1.23);
        assert_eq!(q, 12);
        let back = qp.dequantize(q);
        assert!((back - 1.2).abs() < 1e-6);
        assert!((back - 1.23).abs() <= 0.05);
    }

    #[test]
    fn saturation() {
        let qp = compute_qparams(-1.0, 1.0).unwrap();
        assert_eq!(qp.quantize(1e6), 255);
        assert_eq!(qp.quantize(-1e6), 0);
    }

    #[test]
    fn zero_maps_to_zero_point() {
        for (lo, hi) in [(-3.0, 7.5), (-0.001, 100.0), (-50.0, -1.0), (0.5, 0.75)] {
            let qp = compute_qparams(lo, hi).unwrap();
            assert_eq!(qp.quantize(0.0), qp.zero_point);
            assert_eq!(qp.dequantize(qp.zero_point), 0.0);
        }
    }

    #[test]
    fn scale_survives_json() {
        let qp = compute_qparams(-0.3, 1.7).unwrap();
        let text = serde_json::to_string(&qp).unwrap();
        let back: QuantParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back.scale.to_bits(), qp.scale.to_bits());
    }
}
