//! Per-tensor affine uint8 quantization: static (calibrated) PTQ and dynamic
//! quantization, with selective coverage by layer kind.

pub mod params;
mod plan;

pub use params::{compute_qparams, dequantize_tensor, quantize_tensor, round_half_up, QuantParams};
pub use plan::{
    apply_dq, apply_ptq, calibrate, covered_param_bytes, dynamic_plan, KindPreset, QuantMode,
    QuantPlan, TensorRange, DYNAMIC_KINDS, STATIC_KINDS,
};
