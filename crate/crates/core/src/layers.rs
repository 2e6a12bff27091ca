use branchy_tensor::{Binding, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;

/// Fully connected layer `x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6/(in+out))`, zero bias.
    pub fn new(store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound) as f32).collect();
        let weight = store.add(format!("{name}.weight"), &[fan_in, fan_out], w)?;
        let bias = store.add(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out])?;
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    /// Accepts `[rows, in]` or a single `[in]` vector (returned as `[out]`).
    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() == 1 {
            let y = self.forward(bind, &x.reshape(&[1, x.len()])?)?;
            return Ok(y.reshape(&[self.fan_out])?);
        }
        Ok(x.matmul(&bind.get(self.weight))?.add_row(&bind.get(self.bias))?)
    }

    /// Multiply-add cost on `rows` inputs.
    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.fan_in * self.fan_out) as u64
    }
}

/// Stack of linear layers with leaky-ReLU between them, and after the last
/// one when `activate_last` is set.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        widths: &[usize],
        slope: f64,
        activate_last: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, slope, activate_last })
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(bind, &h)?;
            if self.activate_last || i + 1 < self.layers.len() {
                h = h.leaky_relu(self.slope);
            }
        }
        Ok(h)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.flops(rows)).sum()
    }
}
