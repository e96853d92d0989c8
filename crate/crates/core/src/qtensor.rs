//! Symmetric uniform quantisation with straight-through-estimator
//! gradients.
//!
//! `q = clamp(round(x / s), lo, hi)` with rounding half away from zero.
//! Signed tensors use the narrow range `[-(2^(b-1) - 1), 2^(b-1) - 1]` so
//! that 2-bit weights are ternary; unsigned tensors use `[0, 2^b - 1]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bitwidth {0} (expected 2, 3, 4 or 8)")]
    Bitwidth(u8),
    #[error("scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("shape {shape:?} does not hold {len} values")]
    Shape { shape: Vec<usize>, len: usize },
}

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub signed: bool,
    pub scale: f64,
    pub narrow: bool,
}

impl QuantSpec {
    pub fn new(bits: u8, signed: bool, scale: f64, narrow: bool) -> Result<Self, QuantError> {
        let spec = QuantSpec {
            bits,
            signed,
            scale,
            narrow,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Narrow-range signed spec used for weights.
    pub fn weight(bits: u8, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, true, scale, true)
    }

    /// Unsigned spec used for post-ReLU activations.
    pub fn activation(bits: u8, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, false, scale, false)
    }

    /// Full-range signed 8-bit with scale 1/128: raw input bytes.
    pub fn input() -> Self {
        QuantSpec {
            bits: 8,
            signed: true,
            scale: 1.0 / 128.0,
            narrow: false,
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(QuantError::Bitwidth(self.bits));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(QuantError::Scale(self.scale));
        }
        Ok(())
    }

    pub fn with_scale(self, scale: f64) -> Result<Self, QuantError> {
        Self::new(self.bits, self.signed, scale, self.narrow)
    }

    pub fn lo(&self) -> i32 {
        match (self.signed, self.narrow) {
            (false, _) => 0,
            (true, true) => -self.hi(),
            (true, false) => -(1 << (self.bits - 1)),
        }
    }

    pub fn hi(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    /// Integer level of one value.
    #[inline]
    pub fn level(&self, x: f64) -> i32 {
        let r = (x / self.scale).round();
        r.clamp(self.lo() as f64, self.hi() as f64) as i32
    }

    /// Whether `x` lies inside `[lo * s, hi * s]`, where the STE passes
    /// gradient through.
    #[inline]
    pub fn passes(&self, x: f64) -> bool {
        x >= self.lo() as f64 * self.scale && x <= self.hi() as f64 * self.scale
    }

    /// Fake-quantised value `s * q`.
    #[inline]
    pub fn fake(&self, x: f64) -> f64 {
        self.level(x) as f64 * self.scale
    }

    /// STE gradient of `s * q(x)` with respect to `s`: `q - x/s` inside the
    /// range, the clamped level outside it.
    #[inline]
    pub fn scale_grad(&self, x: f64) -> f64 {
        let v = x / self.scale;
        let (lo, hi) = (self.lo() as f64, self.hi() as f64);
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v.round() - v
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub values: Vec<i32>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

impl QTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_finite(x: &[f64]) -> Result<(), QuantError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(QuantError::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn quantize(x: &[f64], shape: &[usize], spec: QuantSpec) -> Result<QTensor, QuantError> {
    spec.validate()?;
    if shape.iter().product::<usize>() != x.len() {
        return Err(QuantError::Shape {
            shape: shape.to_vec(),
            len: x.len(),
        });
    }
    check_finite(x)?;
    Ok(QTensor {
        values: x.iter().map(|&v| spec.level(v)).collect(),
        spec,
        shape: shape.to_vec(),
    })
}

pub fn dequantize(q: &QTensor) -> Vec<f64> {
    q.values.iter().map(|&v| v as f64 * q.spec.scale).collect()
}

/// Forward values of a fake-quant op plus what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuant {
    pub output: Vec<f64>,
    /// STE mask: true where the input was inside the representable range.
    pub pass: Vec<bool>,
}

impl FakeQuant {
    /// Gradient with respect to the input under the saturating STE.
    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        grad_out
            .iter()
            .zip(&self.pass)
            .map(|(&g, &p)| if p { g } else { 0.0 })
            .collect()
    }
}

pub fn fake_quant(x: &[f64], spec: QuantSpec) -> Result<FakeQuant, QuantError> {
    spec.validate()?;
    check_finite(x)?;
    Ok(FakeQuant {
        output: x.iter().map(|&v| spec.fake(v)).collect(),
        pass: x.iter().map(|&v| spec.passes(v)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// Recomputed from the tensor every step (weights).
    MaxAbs,
    /// Computed once to initialise a trainable scale (activations).
    LearnedInit,
}

/// `max|x| / hi`; an all-zero tensor falls back to 1.
pub fn calibrate_scale(x: &[f64], spec: QuantSpec, mode: ScaleMode) -> f64 {
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 || !max_abs.is_finite() {
        log::warn!("{:?} calibration on an all-zero tensor; using scale 1", mode);
        return 1.0;
    }
    max_abs / spec.hi() as f64
}
