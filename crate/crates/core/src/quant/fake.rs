//! Asymmetric min/max fake quantization with real-valued level counts.
//!
//! For a quantization unit `u` with range `[zmin, zmax]` and bit-width `b`:
//!
//! ```text
//! s     = 2^b - 1            (fractional b gives a fractional level count)
//! delta = (zmax - zmin) / s
//! n     = clamp(round((x - zmin) / delta), 0, floor(s))
//! x_hat = zmin + n * delta
//! ```
//!
//! Rounding is half away from zero. A unit whose range collapses to a point
//! passes through unchanged with `delta = 1`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Granularity, QuantAxis};

/// Floors of level counts within this distance of an integer snap to it,
/// so that e.g. `b = log2(3)` yields exactly three levels.
const LEVEL_SNAP: f64 = 1e-6;

/// How elements of a tensor map onto quantization units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitLayout {
    pub units: usize,
    /// Stride of the quantized axis in the flat layout.
    pub stride: usize,
    /// Length of the quantized axis.
    pub axis_len: usize,
    /// Axis entries per unit.
    pub group: usize,
    pub granularity: Granularity,
    pub axis: QuantAxis,
}

impl UnitLayout {
    pub fn new(shape: &[usize], granularity: Granularity, axis: QuantAxis) -> Result<Self> {
        let (stride, axis_len) = match axis {
            QuantAxis::Channel => (1, shape.last().copied().unwrap_or(1)),
            QuantAxis::Token => {
                if shape.len() < 2 {
                    return Err(Error::Invalid(format!(
                        "token axis needs rank >= 2, got shape {shape:?}"
                    )));
                }
                (shape[shape.len() - 1], shape[shape.len() - 2])
            }
        };
        let group = match granularity {
            Granularity::Tensor => axis_len.max(1),
            Granularity::Channel => 1,
            Granularity::Group(g) => {
                if g == 0 {
                    return Err(Error::Invalid("group size must be positive".into()));
                }
                g.min(axis_len.max(1))
            }
        };
        let units = if granularity == Granularity::Tensor {
            1
        } else {
            axis_len.div_ceil(group)
        };
        Ok(UnitLayout {
            units,
            stride,
            axis_len,
            group,
            granularity,
            axis,
        })
    }

    #[inline]
    pub fn unit_of(&self, flat: usize) -> usize {
        if self.units == 1 {
            0
        } else {
            (flat / self.stride) % self.axis_len / self.group
        }
    }

    /// Element count of every unit for a tensor with `numel` elements.
    pub fn counts(&self, numel: usize) -> Vec<usize> {
        let mut c = vec![0usize; self.units];
        for i in 0..numel {
            c[self.unit_of(i)] += 1;
        }
        c
    }
}

/// Output of a fake quantizer plus what backward and the wire need.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeQuantResult {
    pub x_hat: Tensor,
    pub layout: UnitLayout,
    /// Effective (possibly fractional) bit-width per unit.
    pub bits: Vec<f64>,
    pub zmin: Vec<f32>,
    pub zmax: Vec<f32>,
    /// Step size per unit.
    pub delta: Vec<f32>,
    /// Quantization index per element.
    pub indices: Vec<u32>,
    /// `n - v` per element, where `v = (x - zmin) / delta`.
    pub residual: Vec<f32>,
}

impl FakeQuantResult {
    /// Integer width used to transmit each unit's indices.
    pub fn wire_bits(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| wire_bits(b)).collect()
    }
}

pub fn wire_bits(bits: f64) -> u8 {
    bits.ceil().clamp(1.0, 16.0) as u8
}

/// Largest index reachable at `bits`.
pub fn max_index(bits: f64) -> u32 {
    let s = bits.exp2() - 1.0;
    (s + LEVEL_SNAP).floor() as u32
}

/// Step size for a unit with range `[zmin, zmax]` at `bits`.
pub fn step_size(zmin: f32, zmax: f32, bits: f64) -> f32 {
    let range = zmax - zmin;
    if range == 0.0 {
        return 1.0;
    }
    let s = bits.exp2() - 1.0;
    (range as f64 / s) as f32
}

#[inline]
pub fn dequantize(zmin: f32, delta: f32, n: u32) -> f32 {
    zmin + n as f32 * delta
}

/// Fake-quantizes `x`; `bits` holds one entry per unit or a single shared entry.
pub fn fake_quant(x: &Tensor, bits: &[f64], layout: UnitLayout) -> Result<FakeQuantResult> {
    let units = layout.units;
    let bits: Vec<f64> = match bits.len() {
        1 => vec![bits[0]; units],
        n if n == units => bits.to_vec(),
        n => {
            return Err(Error::Invalid(format!("expected {units} bit-widths (or one), got {n}")));
        }
    };
    if let Some(b) = bits.iter().find(|b| !(**b >= 1.0 && **b <= 32.0)) {
        return Err(Error::Invalid(format!("bit-width {b} is below 1 or not finite")));
    }
    if !x.is_finite() {
        return Err(Error::Numerical("fake_quant input contains NaN or Inf".into()));
    }

    let mut zmin = vec![f32::INFINITY; units];
    let mut zmax = vec![f32::NEG_INFINITY; units];
    for (i, &v) in x.data().iter().enumerate() {
        let u = layout.unit_of(i);
        zmin[u] = zmin[u].min(v);
        zmax[u] = zmax[u].max(v);
    }
    // units without elements (empty tensors) collapse to a zero range
    for u in 0..units {
        if zmin[u] > zmax[u] {
            zmin[u] = 0.0;
            zmax[u] = 0.0;
        }
    }
    let delta: Vec<f32> = (0..units).map(|u| step_size(zmin[u], zmax[u], bits[u])).collect();
    let top: Vec<f32> = bits.iter().map(|&b| max_index(b) as f32).collect();

    let mut indices = Vec::with_capacity(x.numel());
    let mut residual = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let u = layout.unit_of(i);
        let scaled = (v - zmin[u]) / delta[u];
        let n = scaled.round().clamp(0.0, top[u]);
        indices.push(n as u32);
        residual.push(n - scaled);
        out.push(dequantize(zmin[u], delta[u], n as u32));
    }
    Ok(FakeQuantResult {
        x_hat: Tensor::new(x.shape().to_vec(), out)?,
        layout,
        bits,
        zmin,
        zmax,
        delta,
        indices,
        residual,
    })
}

/// Convenience wrapper for a single shared bit-width.
pub fn fake_quant_uniform(x: &Tensor, bits: f64, granularity: Granularity, axis: QuantAxis) -> Result<FakeQuantResult> {
    let layout = UnitLayout::new(x.shape(), granularity, axis)?;
    fake_quant(x, &[bits], layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_tensor_example() {
        let x = Tensor::from_vec(vec![0.0, 0.3, 1.0]);
        let r = fake_quant_uniform(&x, 2.0, Granularity::Tensor, QuantAxis::Channel).unwrap();
        assert_eq!(r.indices, vec![0, 1, 3]);
        assert!((r.delta[0] - 1.0 / 3.0).abs() < 1e-7);
        let want = [0.0, 0.333_333_3, 1.0];
        for (a, b) in r.x_hat.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_tensor_passes_through() {
        let x = Tensor::full(&[2, 3], 0.7);
        let r = fake_quant_uniform(&x, 3.0, Granularity::Channel, QuantAxis::Channel).unwrap();
        assert_eq!(r.x_hat, x);
        assert!(r.delta.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn log2_3_bits_gives_three_levels() {
        let x = Tensor::from_vec((0..11).map(|i| i as f32 / 10.0).collect());
        let r = fake_quant_uniform(&x, 3f64.log2(), Granularity::Tensor, QuantAxis::Channel).unwrap();
        let mut levels: Vec<u32> = r.indices.clone();
        levels.dedup();
        assert_eq!(levels, vec![0, 1, 2]);
        assert_eq!(max_index(3f64.log2()), 2);
        assert!((r.delta[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_low_bits_and_nan() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        assert!(fake_quant_uniform(&x, 0.5, Granularity::Tensor, QuantAxis::Channel).is_err());
        let x = Tensor::from_vec(vec![0.0, f32::NAN]);
        assert!(matches!(
            fake_quant_uniform(&x, 4.0, Granularity::Tensor, QuantAxis::Channel),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn layouts() {
        let l = UnitLayout::new(&[2, 3, 4], Granularity::Channel, QuantAxis::Channel).unwrap();
        assert_eq!(l.units, 4);
        assert_eq!(l.unit_of(5), 1);
        let l = UnitLayout::new(&[2, 3, 4], Granularity::Channel, QuantAxis::Token).unwrap();
        assert_eq!(l.units, 3);
        assert_eq!(l.unit_of(5), 1);
        assert_eq!(l.unit_of(13), 0);
        let l = UnitLayout::new(&[2, 10], Granularity::Group(4), QuantAxis::Channel).unwrap();
        assert_eq!(l.units, 3);
        assert_eq!(l.counts(20), vec![8, 8, 4]);
        let l = UnitLayout::new(&[2, 10], Granularity::Tensor, QuantAxis::Channel).unwrap();
        assert_eq!(l.units, 1);
    }

    #[test]
    fn wire_bits_ceil() {
        assert_eq!(wire_bits(3.7), 4);
        assert_eq!(wire_bits(4.0), 4);
        assert_eq!(wire_bits(4.01), 5);
        assert_eq!(wire_bits(1.0), 1);
    }
}
