//! Backbone plus early-exit branches.

use branchy_tensor::{Binding, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::branch::{Branch, BranchSpec};
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::gnn::{Backbone, BackboneConfig};
use crate::pointcloud::PointCloud;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub branches: Vec<BranchSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), branches: BranchSpec::desk_defaults() }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig { backbone: BackboneConfig::paper_scale(), branches: BranchSpec::paper_defaults() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let depth = self.backbone.layer_widths.len();
        for (i, b) in self.branches.iter().enumerate() {
            if !(1..=depth).contains(&b.exit_after_layer) {
                return Err(Error::Config(format!("branches[{i}].exit_after_layer must be in 1..={depth}")));
            }
            if b.symbol_count == 0 {
                return Err(Error::Config(format!("branches[{i}].symbol_count must be positive")));
            }
            if b.pointwise_widths.is_empty() || b.pointwise_widths.contains(&0) || b.server_widths.contains(&0) {
                return Err(Error::Config(format!("branches[{i}] widths must be non-empty and positive")));
            }
        }
        Ok(())
    }
}

/// Where the channel noise of one forward pass comes from.
#[derive(Debug, Clone, Copy)]
pub enum Noise {
    /// Noiseless link (`σ = 0`).
    Off,
    /// Branch `b` draws from `stream(seed, purpose, [tag, sample_id, b])`.
    Seeded { seed: u64, purpose: Purpose, tag: u64 },
}

pub struct NetOutput<T: Scalar> {
    pub main: Tensor<T>,
    pub branches: Vec<Tensor<T>>,
    /// Branches whose encoder output was all zeros (sent as zeros).
    pub zero_inputs: usize,
}

#[derive(Debug, Clone)]
pub struct BranchyNet {
    pub backbone: Backbone,
    pub branches: Vec<Branch>,
    pub num_classes: usize,
}

impl BranchyNet {
    /// Builds the network and its freshly initialized parameters. Init
    /// draws come from the data seed.
    pub fn init(config: &ModelConfig, num_classes: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, Purpose::Init, &[]);
        let backbone = Backbone::new(&mut store, &config.backbone, num_classes, &mut rng)?;
        let slope = config.backbone.leaky_slope;
        let branches = config
            .branches
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let width = config.backbone.layer_widths[spec.exit_after_layer - 1];
                Branch::new(&mut store, i, spec, width, num_classes, slope, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok((BranchyNet { backbone, branches, num_classes }, store))
    }

    pub fn depth(&self) -> usize {
        self.backbone.layers.len()
    }

    pub fn main_logits<T: Scalar>(&self, bind: &Binding<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backbone.forward(bind, points)?.logits)
    }

    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        points: &Tensor<T>,
        sample_id: u64,
        channel: &ChannelConfig,
        noise: Noise,
    ) -> Result<NetOutput<T>> {
        let main = self.backbone.forward(bind, points)?;
        let (branches, zero_inputs) = self.exits(bind, &main.features, sample_id, channel, noise)?;
        Ok(NetOutput { main: main.logits, branches, zero_inputs })
    }

    /// Logits of every branch from the backbone feature maps, and the number
    /// of zero-input transmissions.
    pub fn exits<T: Scalar>(
        &self,
        bind: &Binding<T>,
        features: &[Tensor<T>],
        sample_id: u64,
        channel: &ChannelConfig,
        noise: Noise,
    ) -> Result<(Vec<Tensor<T>>, usize)> {
        let mut logits = Vec::with_capacity(self.branches.len());
        let mut zero_inputs = 0;
        for (b, branch) in self.branches.iter().enumerate() {
            let feats = &features[branch.spec.exit_after_layer - 1];
            let out = match noise {
                Noise::Off => branch.forward(bind, feats, channel, None)?,
                Noise::Seeded { seed, purpose, tag } => {
                    let mut rng = rng::stream(seed, purpose, &[tag, sample_id, b as u64]);
                    branch.forward(bind, feats, channel, Some(&mut rng))?
                }
            };
            zero_inputs += usize::from(out.zero_input);
            logits.push(out.logits);
        }
        Ok((logits, zero_inputs))
    }

    /// Device-side FLOPs of exit `b`: backbone prefix plus branch head.
    pub fn branch_device_flops(&self, b: usize, n: usize) -> u64 {
        let branch = &self.branches[b];
        self.backbone.prefix_flops(n, branch.spec.exit_after_layer) + branch.device_flops(n)
    }

    pub fn full_flops(&self, n: usize) -> u64 {
        self.backbone.prefix_flops(n, self.depth()) + self.backbone.head_flops(n)
    }
}

/// Cloud as an `N×3` constant tensor.
pub fn points_tensor<T: Scalar>(cloud: &PointCloud) -> Result<Tensor<T>> {
    let data = cloud.points.iter().flatten().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(Tensor::new(data, &[cloud.len(), 3])?)
}

pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, id: u64) -> PointCloud {
        let raw: Vec<[f64; 3]> = (0..n).map(|i| {
            let t = i as f64 * 0.7 + id as f64;
            [t.sin(), (1.3 * t).cos(), (0.4 * t).sin()]
        }).collect();
        PointCloud::from_raw(&raw, 0, id).unwrap()
    }

    #[test]
    fn four_exits_from_one_pass() {
        let (net, store) = BranchyNet::init(&ModelConfig::default(), 8, 1).unwrap();
        let bind = Binding::frozen(&store);
        let out = net.forward(&bind, &points_tensor(&cloud(32, 0)).unwrap(), 0, &ChannelConfig::default(), Noise::Off).unwrap();
        assert_eq!(out.main.shape(), &[8]);
        assert_eq!(out.branches.len(), 4);
        assert!(out.branches.iter().all(|b| b.shape() == [8]));
        assert_eq!(out.zero_inputs, 0);
    }

    #[test]
    fn noise_streams_are_keyed_by_sample() {
        let (net, store) = BranchyNet::init(&ModelConfig::default(), 4, 1).unwrap();
        let bind = Binding::frozen(&store);
        let pts = points_tensor(&cloud(20, 3)).unwrap();
        let noise = Noise::Seeded { seed: 9, purpose: Purpose::EvalNoise, tag: 0 };
        let ch = ChannelConfig::default().with_snr(0.0);
        let a = net.forward(&bind, &pts, 5, &ch, noise).unwrap();
        let b = net.forward(&bind, &pts, 5, &ch, noise).unwrap();
        let c = net.forward(&bind, &pts, 6, &ch, noise).unwrap();
        assert_eq!(a.branches[0].data(), b.branches[0].data());
        assert_ne!(a.branches[0].data(), c.branches[0].data());
        assert_eq!(a.main.data(), c.main.data());
    }

    #[test]
    fn bad_exit_index_is_a_config_error() {
        let mut cfg = ModelConfig::default();
        cfg.branches[0].exit_after_layer = 5;
        assert!(matches!(BranchyNet::init(&cfg, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1f32, 0.5, 0.5, -1.0]), 1);
    }
}
