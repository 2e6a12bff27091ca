//! Main branch: dynamic kNN graphs and EdgeConv layers.
//!
//! Before every layer the graph is rebuilt from that layer's input features.
//! An EdgeConv layer computes `e_ij = φ(x_i ‖ x_j − x_i)` for each neighbor
//! `j` of `i` with a shared linear layer + leaky-ReLU `φ`, and takes the
//! coordinatewise max over neighbors.

use branchy_tensor::{flops, Binding, ParamStore, ReduceKind, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::branch::readout;
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::rng::Rng;

/// Exact k-nearest-neighbor lists, row `i` at `neighbors[i*k..(i+1)*k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn num_points(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Operations charged for the distance evaluations of one graph build:
/// all `N²` ordered pairs at 8 operations per feature coordinate.
pub fn knn_flops(n: usize, dim: usize) -> u64 {
    (n * n * 8 * dim) as u64
}

/// Euclidean kNN of each row of the `n×dim` matrix `features`, excluding
/// the point itself. Rows are ordered by ascending distance, ties by index.
pub fn knn_graph<T: Scalar>(features: &[T], n: usize, dim: usize, k: usize) -> Result<KnnGraph> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} needs 0 < k < N = {n}")));
    }
    if features.len() != n * dim {
        return Err(Error::Config(format!("features hold {} values, expected {n}×{dim}", features.len())));
    }
    let x: Vec<f64> = features.iter().map(|v| v.to_f64_lossy()).collect();
    // ‖x_i − x_j‖² = ‖x_i‖² + ‖x_j‖² − 2·x_i·x_j, with the Gram matrix from gemm
    let sq: Vec<f64> = x.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let sq_max = sq.iter().copied().fold(0.0, f64::max);
    let mut gram = vec![0.0f64; n * n];
    f64::gemm(n, dim, n, &x, false, &x, true, &mut gram, false);
    flops::record(knn_flops(n, dim));
    let mut neighbors = Vec::with_capacity(n * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let mut near: Vec<(f64, usize)> = Vec::new();
    let mut row = vec![0.0f64; n];
    for i in 0..n {
        for ((d, &g), &s) in row.iter_mut().zip(&gram[i * n..(i + 1) * n]).zip(&sq) {
            let v = sq[i] + s - 2.0 * g;
            *d = if v > 0.0 { v } else { 0.0 };
        }
        row[i] = f64::INFINITY;
        best.clear();
        best.extend((0..n).filter(|&j| j != i).take(k).map(|j| (row[j], j)));
        best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut worst = best[k - 1].0;
        let start = k + usize::from(i < k);
        for (j, &d) in row.iter().enumerate().skip(start) {
            // j ascends, so a later candidate must be strictly closer to displace
            if d < worst {
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, j));
                best.pop();
                worst = best[k - 1].0;
            }
        }
        // Gram distances carry rounding error, so everything near the k-th
        // one is re-ranked on directly computed distances
        let limit = worst + 8.0 * f64::EPSILON * (dim as f64 + 2.0) * (sq[i] + sq_max);
        let xi = &x[i * dim..(i + 1) * dim];
        near.clear();
        near.extend(row.iter().enumerate().filter(|&(_, &d)| d <= limit).map(|(j, _)| {
            let d: f64 = xi.iter().zip(&x[j * dim..(j + 1) * dim]).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        }));
        // fewer than k survive only when distances are NaN
        let ranked = if near.len() >= k {
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            &near
        } else {
            &best
        };
        neighbors.extend(ranked.iter().take(k).map(|&(_, j)| j));
    }
    Ok(KnnGraph { k, neighbors })
}

#[derive(Debug, Clone)]
pub struct EdgeConv {
    /// `2F → F'`; rows `0..F` act on `x_i`, rows `F..2F` on `x_j − x_i`.
    pub linear: Linear,
    pub slope: f64,
}

impl EdgeConv {
    pub fn in_dim(&self) -> usize {
        self.linear.fan_in / 2
    }

    pub fn out_dim(&self) -> usize {
        self.linear.fan_out
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>, graph: &KnnGraph) -> Result<(usize, usize)> {
        let f = self.in_dim();
        if x.rank() != 2 || x.shape()[1] != f {
            return Err(branchy_tensor::TensorError::Dimension(format!("edge_conv expects N×{f}, got {:?}", x.shape())).into());
        }
        let n = x.shape()[0];
        if graph.num_points() != n {
            return Err(Error::Config(format!("graph has {} points, features {n}", graph.num_points())));
        }
        Ok((n, graph.k))
    }

    /// Per-edge evaluation exactly as defined: gathers `x_i ‖ x_j − x_i` for
    /// all `N·k` edges and applies the linear layer to each.
    pub fn forward_reference<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>, graph: &KnnGraph) -> Result<Tensor<T>> {
        let (n, k) = self.check(x, graph)?;
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let xi = x.gather_rows(&centers)?;
        let xj = x.gather_rows(&graph.neighbors)?;
        let edges = Tensor::concat(&[xi.clone(), xj.sub(&xi)?], 1)?;
        let e = self.linear.forward(bind, &edges)?.leaky_relu(self.slope);
        Ok(e.reshape(&[n, k, self.out_dim()])?.reduce(1, ReduceKind::Max)?)
    }

    /// Same function as [`EdgeConv::forward_reference`]. With
    /// `W = [W_a; W_b]` the edge pre-activation is `x_i·(W_a − W_b) + x_j·W_b + b`,
    /// and leaky-ReLU is increasing, so the max over neighbors moves inside:
    /// `φ(x_i·(W_a − W_b) + b + max_j x_j·W_b)`.
    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>, graph: &KnnGraph) -> Result<Tensor<T>> {
        let (_, k) = self.check(x, graph)?;
        let f = self.in_dim();
        let w = bind.get(self.linear.weight);
        let top: Vec<usize> = (0..f).collect();
        let bottom: Vec<usize> = (f..2 * f).collect();
        let w_b = w.gather_rows(&bottom)?;
        let w_center = w.gather_rows(&top)?.sub(&w_b)?;
        let p = x.matmul(&w_center)?;
        let m = x.matmul(&w_b)?.gather_max(&graph.neighbors, k)?;
        Ok(p.add(&m)?.add_row(&bind.get(self.linear.bias))?.leaky_relu(self.slope))
    }

    /// Nominal per-edge cost: graph build, edge MLP on `N·k` rows, max over neighbors.
    pub fn flops(&self, n: usize, k: usize) -> u64 {
        knn_flops(n, self.in_dim()) + self.linear.flops(n * k) + (n * (k - 1) * self.out_dim()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layer_widths: Vec<usize>,
    pub k: usize,
    /// Hidden widths of the classifier head (the class count is appended).
    pub head_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { layer_widths: vec![32, 32, 32, 64], k: 8, head_widths: vec![128], leaky_slope: 0.2 }
    }
}

impl BackboneConfig {
    pub fn paper_scale() -> Self {
        BackboneConfig { layer_widths: vec![64, 64, 64, 128], k: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::Config("backbone.layer_widths must be non-empty and positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("backbone.k must be positive".into()));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Config("backbone.head_widths must be positive".into()));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.layer_widths.iter().sum()
    }
}

pub struct MainOutput<T: Scalar> {
    pub logits: Tensor<T>,
    /// `N×F_l` output of every layer, for the branch exits.
    pub features: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub layers: Vec<EdgeConv>,
    pub head: Mlp,
    pub k: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore<f32>, config: &BackboneConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layer_widths.len());
        let mut prev = 3;
        for (l, &w) in config.layer_widths.iter().enumerate() {
            let linear = Linear::new(store, &format!("backbone.edge{}", l + 1), 2 * prev, w, rng)?;
            layers.push(EdgeConv { linear, slope: config.leaky_slope });
            prev = w;
        }
        let mut widths = vec![2 * config.concat_width()];
        widths.extend(&config.head_widths);
        widths.push(num_classes);
        let head = Mlp::new(store, "backbone.head", &widths, config.leaky_slope, false, rng)?;
        Ok(Backbone { layers, head, k: config.k })
    }

    /// Feature maps of the first `depth` layers (the on-device prefix).
    pub fn features<T: Scalar>(&self, bind: &Binding<T>, points: &Tensor<T>, depth: usize) -> Result<Vec<Tensor<T>>> {
        let n = points.shape()[0];
        if n <= self.k {
            return Err(Error::Config(format!("cloud of {n} points is too small for k = {}", self.k)));
        }
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let x = out.last().unwrap_or(points);
            let graph = knn_graph(x.data(), n, x.shape()[1], self.k)?;
            let y = layer.forward(bind, x, &graph)?;
            out.push(y);
        }
        Ok(out)
    }

    pub fn head_forward<T: Scalar>(&self, bind: &Binding<T>, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        let all = Tensor::concat(features, 1)?;
        self.head.forward(bind, &readout(&all)?)
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, points: &Tensor<T>) -> Result<MainOutput<T>> {
        let features = self.features(bind, points, self.layers.len())?;
        let logits = self.head_forward(bind, &features)?;
        Ok(MainOutput { logits, features })
    }

    /// Device cost of the first `depth` layers on `n` points.
    pub fn prefix_flops(&self, n: usize, depth: usize) -> u64 {
        self.layers[..depth].iter().map(|l| l.flops(n, self.k)).sum()
    }

    /// Cost of the pointwise concatenation readout and classifier head.
    pub fn head_flops(&self, n: usize) -> u64 {
        let width: usize = self.layers.iter().map(EdgeConv::out_dim).sum();
        crate::branch::readout_flops(n, width) + self.head.flops(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn collinear_example() {
        let pts = [0.0f64, 0., 0., 1., 0., 0., 3., 0., 0.];
        let g = knn_graph(&pts, 3, 3, 1).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
    }

    #[test]
    fn full_k_is_a_permutation_of_others() {
        let pts: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64).collect();
        let g = knn_graph(&pts, 5, 3, 4).unwrap();
        for i in 0..5 {
            let mut row = g.row(i).to_vec();
            row.sort();
            let expected: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(row, expected);
        }
    }

    #[test]
    fn non_finite_features_still_give_k_neighbors() {
        let mut pts: Vec<f64> = (0..18).map(|i| i as f64).collect();
        pts[4] = f64::NAN;
        let g = knn_graph(&pts, 6, 3, 2).unwrap();
        assert_eq!(g.num_points(), 6);
        assert!((0..6).all(|i| !g.row(i).contains(&i)));
    }

    #[test]
    fn duplicate_points_tie_by_index() {
        let pts = [0.0f64, 0., 0., 1., 1., 1., 1., 1., 1., 1., 1., 1.];
        let g = knn_graph(&pts, 4, 3, 2).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
        assert_eq!(g.row(3), &[1, 2]);
        assert_eq!(g.row(1), &[2, 3]);
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(knn_graph(&[0.0f64; 9], 3, 3, 3), Err(Error::Config(_))));
    }

    fn layer(f: usize, out: usize) -> (ParamStore<f32>, EdgeConv) {
        let mut store = ParamStore::new();
        let mut rng = stream(1, Purpose::Init, &[]);
        let linear = Linear::new(&mut store, "e", 2 * f, out, &mut rng).unwrap();
        (store, EdgeConv { linear, slope: 0.2 })
    }

    #[test]
    fn fused_matches_reference() {
        let (store, conv) = layer(4, 5);
        let store = store.cast::<f64>();
        let bind = Binding::frozen(&store);
        let mut rng = stream(2, Purpose::Sample, &[]);
        let x: Vec<f64> = crate::channel::awgn_noise(10 * 4, 1.0, &mut rng);
        let graph = knn_graph(&x, 10, 4, 3).unwrap();
        let xt = Tensor::new(x, &[10, 4]).unwrap();
        let a = conv.forward(&bind, &xt, &graph).unwrap();
        let b = conv.forward_reference(&bind, &xt, &graph).unwrap();
        assert_eq!(a.shape(), &[10, 5]);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, conv) = layer(3, 4);
        let bind = Binding::frozen(&store);
        let x: Vec<f32> = (0..24).map(|i| ((i * 13) % 7) as f32 * 0.3 - 1.0).collect();
        let graph = knn_graph(&x, 8, 3, 3).unwrap();
        let mut shuffled = graph.clone();
        for i in 0..8 {
            shuffled.neighbors[i * 3..(i + 1) * 3].reverse();
        }
        let xt = Tensor::new(x, &[8, 3]).unwrap();
        assert_eq!(conv.forward(&bind, &xt, &graph).unwrap().data(), conv.forward(&bind, &xt, &shuffled).unwrap().data());
    }

    #[test]
    fn self_neighbors_zero_the_offset_half() {
        // every neighbor equal to x_i: with the offset rows of W zeroed the
        // output depends on x_i only
        let (mut store, conv) = layer(2, 2);
        let w = &mut store.get_mut(conv.linear.weight).data;
        w[4..].iter_mut().for_each(|v| *v = 0.0);
        let bind = Binding::frozen(&store);
        let x = Tensor::<f32>::new(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], &[3, 2]).unwrap();
        let graph = KnnGraph { k: 2, neighbors: vec![1, 2, 0, 2, 0, 1] };
        let y = conv.forward(&bind, &x, &graph).unwrap();
        assert_eq!(&y.data()[..2], &y.data()[2..4]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (store, conv) = layer(3, 4);
        let bind = Binding::frozen(&store);
        let x = Tensor::<f32>::zeros(&[5, 2]).unwrap();
        let graph = KnnGraph { k: 1, neighbors: vec![1, 0, 1, 2, 3] };
        assert!(conv.forward(&bind, &x, &graph).is_err());
    }
}
