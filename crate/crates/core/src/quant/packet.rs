//! Transmissible form of a fake-quantized tensor: integer indices plus the
//! per-unit range metadata needed to dequantize them.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::fake::{dequantize, FakeQuantResult, UnitLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantPacket {
    pub shape: Vec<usize>,
    pub layout: UnitLayout,
    pub wire_bits: Vec<u8>,
    pub zmin: Vec<f32>,
    pub delta: Vec<f32>,
    pub indices: Vec<u32>,
}

impl QuantPacket {
    pub fn from_result(r: &FakeQuantResult) -> Self {
        QuantPacket {
            shape: r.x_hat.shape().to_vec(),
            layout: r.layout,
            wire_bits: r.wire_bits(),
            zmin: r.zmin.clone(),
            delta: r.delta.clone(),
            indices: r.indices.clone(),
        }
    }

    /// Checks that metadata lengths agree and every index fits its width.
    pub fn validate(&self) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        let u = self.layout.units;
        if self.wire_bits.len() != u || self.zmin.len() != u || self.delta.len() != u || self.indices.len() != numel {
            return Err(Error::Invalid(format!(
                "packet for shape {:?} with {u} units has {} widths, {} zmins, {} deltas, {} indices",
                self.shape,
                self.wire_bits.len(),
                self.zmin.len(),
                self.delta.len(),
                self.indices.len()
            )));
        }
        if let Some(&w) = self.wire_bits.iter().find(|&&w| !(1..=16).contains(&w)) {
            return Err(Error::Invalid(format!("wire bits {w} outside [1, 16]")));
        }
        for (i, &n) in self.indices.iter().enumerate() {
            let w = self.wire_bits[self.layout.unit_of(i)];
            if n >> w != 0 {
                return Err(Error::Invalid(format!("index {n} at {i} does not fit in {w} bits")));
            }
        }
        Ok(())
    }

    /// `zmin + n * delta` per element; equals the quantizer's `x_hat` bit for bit.
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .indices
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let u = self.layout.unit_of(i);
                dequantize(self.zmin[u], self.delta[u], n)
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("validated packet")
    }
}
