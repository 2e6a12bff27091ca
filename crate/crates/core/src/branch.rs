//! Early-exit branches.
//!
//! Device side: shared pointwise MLP, mean‖max readout, linear JSCC encoder
//! and power normalization. The AWGN channel sits in between. Server side:
//! fully connected layers straight from the received symbols to logits.

use branchy_tensor::{Binding, ParamStore, ReduceKind, Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_transmit, power_normalize, ChannelConfig};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    /// 1-based index of the backbone layer this branch taps.
    pub exit_after_layer: usize,
    pub pointwise_widths: Vec<usize>,
    /// Channel symbols per transmission (`d_b`).
    pub symbol_count: usize,
    pub server_widths: Vec<usize>,
}

impl BranchSpec {
    pub fn desk_defaults() -> Vec<BranchSpec> {
        Self::ladder(&[384, 256, 128, 32])
    }

    pub fn paper_defaults() -> Vec<BranchSpec> {
        Self::ladder(&[1536, 1024, 512, 128])
    }

    fn ladder(symbols: &[usize]) -> Vec<BranchSpec> {
        symbols
            .iter()
            .enumerate()
            .map(|(i, &d)| BranchSpec {
                exit_after_layer: i + 1,
                pointwise_widths: vec![64],
                symbol_count: d,
                server_widths: vec![128],
            })
            .collect()
    }
}

/// `mean_i x_i ‖ max_i x_i` over the rows of an `N×F` matrix, as `[2F]`.
pub fn readout<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 2 {
        return Err(TensorError::Dimension(format!("readout expects N×F, got {:?}", features.shape())).into());
    }
    let mean = features.reduce(0, ReduceKind::Mean)?;
    let max = features.reduce(0, ReduceKind::Max)?;
    Ok(Tensor::concat(&[mean, max], 0)?)
}

/// Readout of an empty point set has no value.
pub fn readout_rows<T: Scalar>(rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let Some(first) = rows.first() else {
        return Err(Error::Domain("readout of an empty cloud".into()));
    };
    let data = rows.iter().flatten().copied().collect();
    readout(&Tensor::new(data, &[rows.len(), first.len()])?)
}

pub fn readout_flops(n: usize, width: usize) -> u64 {
    // mean: n-1 adds + 1 divide; max: n-1 comparisons
    (width * n + width * (n - 1)) as u64
}

/// Power-normalized channel input. `zero_input` marks an all-zero encoder
/// output, which cannot be normalized and is sent as zeros.
pub struct Transmission<T: Scalar> {
    pub symbols: Tensor<T>,
    pub zero_input: bool,
}

pub struct BranchOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub sent: Tensor<T>,
    pub zero_input: bool,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub spec: BranchSpec,
    pub pointwise: Mlp,
    pub encoder: Linear,
    pub server: Mlp,
}

impl Branch {
    pub fn new(
        store: &mut ParamStore<f32>,
        index: usize,
        spec: &BranchSpec,
        in_dim: usize,
        num_classes: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spec.symbol_count == 0 {
            return Err(Error::Config(format!("branches[{index}].symbol_count must be positive")));
        }
        let name = format!("branch{}", index + 1);
        let mut widths = vec![in_dim];
        widths.extend(&spec.pointwise_widths);
        let pointwise = Mlp::new(store, &format!("{name}.pointwise"), &widths, slope, true, rng)?;
        let s_dim = 2 * *widths.last().unwrap();
        let encoder = Linear::new(store, &format!("{name}.encoder"), s_dim, spec.symbol_count, rng)?;
        let mut widths = vec![spec.symbol_count];
        widths.extend(&spec.server_widths);
        widths.push(num_classes);
        let server = Mlp::new(store, &format!("{name}.server"), &widths, slope, false, rng)?;
        Ok(Branch { spec: spec.clone(), pointwise, encoder, server })
    }

    pub fn symbol_count(&self) -> usize {
        self.spec.symbol_count
    }

    /// Shared MLP applied to each point independently.
    pub fn pointwise_mlp<T: Scalar>(&self, bind: &Binding<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.pointwise.forward(bind, features)
    }

    pub fn jscc_encode<T: Scalar>(&self, bind: &Binding<T>, s: &Tensor<T>, power: f64) -> Result<Transmission<T>> {
        let z = self.encoder.forward(bind, s)?;
        if z.data().iter().all(|v| *v == T::zero()) {
            return Ok(Transmission { symbols: Tensor::zeros(z.shape())?, zero_input: true });
        }
        Ok(Transmission { symbols: power_normalize(&z, power)?, zero_input: false })
    }

    pub fn server_decode_classify<T: Scalar>(&self, bind: &Binding<T>, received: &Tensor<T>) -> Result<Tensor<T>> {
        if received.rank() != 1 || received.len() != self.symbol_count() {
            return Err(TensorError::Dimension(format!(
                "server expects {} symbols, received {:?}",
                self.symbol_count(),
                received.shape()
            ))
            .into());
        }
        self.server.forward(bind, received)
    }

    /// Device half: features of the tapped layer to channel symbols.
    pub fn device_forward<T: Scalar>(&self, bind: &Binding<T>, features: &Tensor<T>, power: f64) -> Result<Transmission<T>> {
        let h = self.pointwise_mlp(bind, features)?;
        self.jscc_encode(bind, &readout(&h)?, power)
    }

    /// Full exit. `rng = None` means a noiseless link.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        features: &Tensor<T>,
        channel: &ChannelConfig,
        rng: Option<&mut Rng>,
    ) -> Result<BranchOutput<T>> {
        let tx = self.device_forward(bind, features, channel.power)?;
        let received = match rng {
            Some(rng) => awgn_transmit(&tx.symbols, channel, rng)?,
            None => tx.symbols.clone(),
        };
        let logits = self.server_decode_classify(bind, &received)?;
        Ok(BranchOutput { logits, sent: tx.symbols, zero_input: tx.zero_input })
    }

    /// On-device cost on `n` points (pointwise MLP, readout, encoder).
    pub fn device_flops(&self, n: usize) -> u64 {
        self.pointwise.flops(n) + readout_flops(n, self.pointwise.out_width()) + self.encoder.flops(1)
    }

    pub fn server_flops(&self) -> u64 {
        self.server.flops(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn readout_examples() {
        let s = readout(&t(&[1., 2., 3., 0.], &[2, 2])).unwrap();
        assert_eq!(s.data(), &[2., 1., 3., 2.]);
        let one = readout(&t(&[4., -1.], &[1, 2])).unwrap();
        assert_eq!(one.data(), &[4., -1., 4., -1.]);
        let swapped = readout(&t(&[3., 0., 1., 2.], &[2, 2])).unwrap();
        assert_eq!(swapped.data(), s.data());
        assert!(matches!(readout_rows::<f64>(&[]), Err(Error::Domain(_))));
    }

    fn branch(d: usize) -> (ParamStore<f32>, Branch) {
        let mut store = ParamStore::new();
        let mut rng = stream(4, Purpose::Init, &[]);
        let spec = BranchSpec { exit_after_layer: 1, pointwise_widths: vec![6], symbol_count: d, server_widths: vec![8] };
        let b = Branch::new(&mut store, 0, &spec, 3, 5, 0.2, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn shapes_and_power() {
        let (store, b) = branch(7);
        let bind = Binding::frozen(&store);
        let x = Tensor::<f32>::new((0..30).map(|i| (i as f32 * 0.37).sin()).collect(), &[10, 3]).unwrap();
        let tx = b.device_forward(&bind, &x, 2.0).unwrap();
        assert_eq!(tx.symbols.len(), 7);
        let ms: f64 = tx.symbols.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 7.0;
        assert!((ms - 2.0).abs() < 1e-6);
        let out = b.forward(&bind, &x, &ChannelConfig::default(), None).unwrap();
        assert_eq!(out.logits.shape(), &[5]);
        assert!(b.server_decode_classify(&bind, &Tensor::zeros(&[6]).unwrap()).is_err());
    }

    #[test]
    fn pointwise_rows_are_independent() {
        let (store, b) = branch(4);
        let bind = Binding::frozen(&store);
        let x = Tensor::<f32>::new(vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, -1.0, 0.5, 2.0], &[3, 3]).unwrap();
        let y = b.pointwise_mlp(&bind, &x).unwrap();
        assert_eq!(&y.data()[..6], &y.data()[6..12]);
        let perm = x.gather_rows(&[2, 0, 1]).unwrap();
        let yp = b.pointwise_mlp(&bind, &perm).unwrap();
        assert_eq!(yp.data(), y.gather_rows(&[2, 0, 1]).unwrap().data());
    }

    #[test]
    fn zero_symbol_count_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = stream(4, Purpose::Init, &[]);
        let spec = BranchSpec { exit_after_layer: 1, pointwise_widths: vec![6], symbol_count: 0, server_widths: vec![8] };
        assert!(matches!(Branch::new(&mut store, 0, &spec, 3, 5, 0.2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn all_zero_encoder_output_is_flagged() {
        let (mut store, b) = branch(4);
        for p in store.iter_mut().filter(|p| p.name.starts_with("branch1.encoder")) {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let bind = Binding::frozen(&store);
        let x = Tensor::<f32>::new(vec![1.0; 12], &[4, 3]).unwrap();
        let tx = b.device_forward(&bind, &x, 1.0).unwrap();
        assert!(tx.zero_input);
        assert!(tx.symbols.data().iter().all(|&v| v == 0.0));
    }
}
