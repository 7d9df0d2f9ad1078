//! Delta quantization against a cached reconstruction (AQ-SGD baseline).
//!
//! Each endpoint keeps its own cache of the last reconstruction per
//! `(site, sample)`. The sender quantizes `x - cached`, the receiver adds the
//! dequantized delta to its copy, and both store the new reconstruction.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::fake::{fake_quant, FakeQuantResult, UnitLayout};

#[derive(Clone, Debug, Default)]
pub struct AqsgdCache {
    entries: HashMap<(String, u64), Tensor>,
}

/// Forward of the delta quantizer.
#[derive(Clone, Debug)]
pub struct AqsgdResult {
    /// Quantization of the delta; this is what goes on the wire.
    pub delta: FakeQuantResult,
    /// `cached + delta_hat`.
    pub x_hat: Tensor,
}

impl AqsgdCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, site: &str, sample: u64) -> Option<&Tensor> {
        self.entries.get(&(site.to_string(), sample))
    }

    /// Stacks the cached rows for `samples`, zeros where absent.
    pub fn previous(&self, site: &str, samples: &[u64], shape: &[usize]) -> Result<Tensor> {
        check_rows(samples, shape)?;
        let row_shape = &shape[1..];
        let row_len: usize = row_shape.iter().product();
        let mut data = Vec::with_capacity(row_len * samples.len());
        for &s in samples {
            match self.get(site, s) {
                Some(t) if t.shape() == row_shape => data.extend_from_slice(t.data()),
                Some(t) => {
                    return Err(Error::shape("aqsgd cache", t.shape(), row_shape));
                }
                None => data.extend(std::iter::repeat_n(0.0, row_len)),
            }
        }
        Tensor::new(shape.to_vec(), data)
    }

    fn store(&mut self, site: &str, samples: &[u64], x_hat: &Tensor) -> Result<()> {
        let row_shape = x_hat.shape()[1..].to_vec();
        let row_len: usize = row_shape.iter().product();
        for (i, &s) in samples.iter().enumerate() {
            let row = Tensor::new(row_shape.clone(), x_hat.data()[i * row_len..(i + 1) * row_len].to_vec())?;
            self.entries.insert((site.to_string(), s), row);
        }
        Ok(())
    }

    /// Receiver side: adds a dequantized delta to the cached rows and stores
    /// the result.
    pub fn reconstruct(&mut self, site: &str, samples: &[u64], delta_hat: &Tensor) -> Result<Tensor> {
        let prev = self.previous(site, samples, delta_hat.shape())?;
        let x_hat = add(&prev, delta_hat);
        self.store(site, samples, &x_hat)?;
        Ok(x_hat)
    }
}

fn check_rows(samples: &[u64], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape[0] != samples.len() {
        return Err(Error::Invalid(format!(
            "leading axis of {shape:?} must match {} sample keys",
            samples.len()
        )));
    }
    Ok(())
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Quantizes `x - cache[site, samples]` and updates the cache with the
/// reconstruction. The leading axis of `x` indexes `samples`.
pub fn aqsgd_fake_quant(
    x: &Tensor,
    cache: &mut AqsgdCache,
    site: &str,
    samples: &[u64],
    bits: f64,
    layout: UnitLayout,
) -> Result<AqsgdResult> {
    let prev = cache.previous(site, samples, x.shape())?;
    let diff = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect(),
    )?;
    let delta = fake_quant(&diff, &[bits], layout)?;
    let x_hat = add(&prev, &delta.x_hat);
    cache.store(site, samples, &x_hat)?;
    Ok(AqsgdResult { delta, x_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Granularity, QuantAxis};

    fn layout(shape: &[usize]) -> UnitLayout {
        UnitLayout::new(shape, Granularity::Channel, QuantAxis::Channel).unwrap()
    }

    #[test]
    fn cache_miss_is_plain_quantization() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 0.9, -0.2, 0.4]).unwrap();
        let mut cache = AqsgdCache::new();
        let r = aqsgd_fake_quant(&x, &mut cache, "s0", &[0, 1], 2.0, layout(x.shape())).unwrap();
        let plain = fake_quant(&x, &[2.0], layout(x.shape())).unwrap();
        assert_eq!(r.x_hat, plain.x_hat);
        assert_eq!(r.delta.indices, plain.indices);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn absent_key_delta_is_x() {
        let cache = AqsgdCache::new();
        let prev = cache.previous("s0", &[7], &[1, 4]).unwrap();
        assert!(prev.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_change_under_same_key_fails() {
        let mut cache = AqsgdCache::new();
        let x = Tensor::zeros(&[1, 4]);
        aqsgd_fake_quant(&x, &mut cache, "s0", &[3], 4.0, layout(x.shape())).unwrap();
        let y = Tensor::zeros(&[1, 5]);
        assert!(aqsgd_fake_quant(&y, &mut cache, "s0", &[3], 4.0, layout(y.shape())).is_err());
    }

    #[test]
    fn receiver_matches_sender() {
        let mut tx = AqsgdCache::new();
        let mut rx = AqsgdCache::new();
        for step in 0..3 {
            let x = Tensor::new(
                vec![2, 2],
                vec![0.3 + step as f32 * 0.01, -0.1, 0.8, 0.25 - step as f32 * 0.02],
            )
            .unwrap();
            let r = aqsgd_fake_quant(&x, &mut tx, "a", &[4, 9], 3.0, layout(x.shape())).unwrap();
            let got = rx.reconstruct("a", &[4, 9], &r.delta.x_hat).unwrap();
            assert_eq!(got, r.x_hat);
        }
    }
}
