//! Real-valued AWGN channel, power normalization and Shannon capacity.

use branchy_tensor::{Scalar, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// `10·log10(P/σ²)`; `inf` gives a noiseless channel.
    pub snr_db: f64,
    pub bandwidth_hz: f64,
    /// Average per-symbol power `P`.
    pub power: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { snr_db: 20.0, bandwidth_hz: 10_000.0, power: 1.0 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::Config("channel.bandwidth_hz must be positive".into()));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Config("channel.power must be positive".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("channel.snr_db must be a number".into()));
        }
        Ok(())
    }

    pub fn with_snr(self, snr_db: f64) -> Self {
        ChannelConfig { snr_db, ..self }
    }

    pub fn with_bandwidth(self, bandwidth_hz: f64) -> Self {
        ChannelConfig { bandwidth_hz, ..self }
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// `σ² = P / 10^(snr_db/10)`.
    pub fn noise_variance(&self) -> f64 {
        self.power / self.snr_linear()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_variance().sqrt()
    }
}

/// Scales `z` to `z·sqrt(d·P)/‖z‖`, so the mean symbol power is exactly `P`.
pub fn power_normalize<T: Scalar>(z: &Tensor<T>, power: f64) -> Result<Tensor<T>> {
    Ok(z.l2_normalize((z.len() as f64 * power).sqrt())?)
}

/// `d` draws of `N(0, σ²)`.
pub fn awgn_noise(d: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    (0..d).map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// `y = x + n`. The noise is a constant of the graph, so gradients pass
/// through unchanged and the layer has no parameters.
pub fn awgn_transmit<T: Scalar>(x: &Tensor<T>, config: &ChannelConfig, rng: &mut Rng) -> Result<Tensor<T>> {
    let sigma = config.noise_sigma();
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise: Vec<T> = awgn_noise(x.len(), sigma, rng).into_iter().map(T::from_f64_lossy).collect();
    Ok(x.add(&Tensor::new(noise, x.shape())?)?)
}

/// `C = W·log2(1 + SNR)` in bit/s.
pub fn shannon_capacity(config: &ChannelConfig) -> f64 {
    config.bandwidth_hz * (1.0 + config.snr_linear()).log2()
}
