//! Activations, losses and norm scaling.
//!
//! Softmax-family operations act on the last axis; losses treat a rank-1
//! tensor as a batch of one and average over the batch.

use crate::error::{dim_err, domain_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn log_softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn last_dim(&self) -> usize {
        *self.shape().last().expect("tensors have rank >= 1")
    }

    fn batch(&self) -> usize {
        self.len() / self.last_dim()
    }

    /// `max(x, slope·x)` for `0 <= slope < 1`; `slope = 0` is ReLU.
    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::from_f64_lossy(slope);
        let out = self.data().iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * s })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(0.0)
    }

    pub fn log_softmax(&self) -> Tensor<T> {
        let width = self.last_dim();
        let out = log_softmax_rows(self.data(), width);
        let probs: Vec<T> = out.iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, pr) in g.chunks_exact(width).zip(probs.chunks_exact(width)) {
                    let total: T = gr.iter().copied().sum();
                    gx.extend(gr.iter().zip(pr).map(|(&g, &p)| g - p * total));
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn softmax(&self) -> Tensor<T> {
        let width = self.last_dim();
        let out: Vec<T> = log_softmax_rows(self.data(), width).into_iter().map(T::exp).collect();
        let probs = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, pr) in g.chunks_exact(width).zip(probs.chunks_exact(width)) {
                    let dot: T = gr.iter().zip(pr).map(|(&g, &p)| g * p).sum();
                    gx.extend(gr.iter().zip(pr).map(|(&g, &p)| p * (g - dot)));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean cross-entropy of integer labels against logits `[batch, classes]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (width, batch) = (self.last_dim(), self.batch());
        if labels.len() != batch {
            return dim_err(format!("cross_entropy: {} labels for batch of {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return domain_err(format!("label {bad} out of range for {width} classes"));
        }
        let mut target = vec![T::zero(); self.len()];
        for (b, &l) in labels.iter().enumerate() {
            target[b * width + l] = T::one();
        }
        self.soft_cross_entropy(&target)
    }

    /// Mean of `-Σ p·log softmax(x)` against a target distribution per row.
    pub fn soft_cross_entropy(&self, target: &[T]) -> Result<Tensor<T>> {
        let (width, batch) = (self.last_dim(), self.batch());
        if target.len() != self.len() {
            return dim_err(format!("soft target of length {} for logits {:?}", target.len(), self.shape()));
        }
        if target.iter().any(|&p| p < T::zero() || !p.is_finite()) {
            return domain_err("soft target has negative or non-finite mass");
        }
        let logp = log_softmax_rows(self.data(), width);
        let inv_b = T::one() / T::from_usize(batch).unwrap();
        let loss = -logp.iter().zip(target).map(|(&l, &p)| if p > T::zero() { p * l } else { T::zero() }).sum::<T>() * inv_b;
        let target = target.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(logp.len());
                for (lr, pr) in logp.chunks_exact(width).zip(target.chunks_exact(width)) {
                    let mass: T = pr.iter().copied().sum();
                    gx.extend(lr.iter().zip(pr).map(|(&l, &p)| (l.exp() * mass - p) * inv_b * g[0]));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean `KL(target ‖ softmax(x))` over the batch, with `0·ln 0 = 0`.
    pub fn kl_div(&self, target: &[T]) -> Result<Tensor<T>> {
        let ce = self.soft_cross_entropy(target)?;
        let batch = T::from_usize(self.batch()).unwrap();
        let neg_entropy: T = target.iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum::<T>() / batch;
        let shift = Tensor::scalar(neg_entropy);
        ce.add(&shift)
    }

    /// Rescales the whole tensor to Euclidean norm `target_norm`.
    pub fn l2_normalize(&self, target_norm: f64) -> Result<Tensor<T>> {
        let norm = self.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm <= T::zero() || !norm.is_finite() {
            return domain_err("cannot normalize a zero or non-finite vector");
        }
        let c = T::from_f64_lossy(target_norm);
        let unit: Vec<T> = self.data().iter().map(|&v| v / norm).collect();
        let out = unit.iter().map(|&u| u * c).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                // d(c·z/‖z‖) = c/‖z‖ · (I - u uᵀ)
                let proj: T = g.iter().zip(&unit).map(|(&g, &u)| g * u).sum();
                let k = c / norm;
                vec![Some(g.iter().zip(&unit).map(|(&g, &u)| k * (g - u * proj)).collect())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(t(&[0., 0.], &[2]).softmax().data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_flat_logits_is_ln2() {
        let l = t(&[0., 0.], &[1, 2]).cross_entropy(&[0]).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let x = t(&[0., 0.], &[1, 2]);
        assert!(matches!(x.cross_entropy(&[2]), Err(crate::TensorError::Domain(_))));
        assert!(x.cross_entropy(&[0, 1]).is_err());
    }

    #[test]
    fn kl_with_itself_is_zero() {
        let logits = t(&[0.3, -1.2, 2.0], &[3]);
        let p = logits.softmax().to_vec();
        assert!(logits.kl_div(&p).unwrap().item().unwrap().abs() < 1e-12);
        let one_hot = [0., 1., 0.];
        let peaked = t(&[-50., 50., -50.], &[3]);
        assert!(peaked.kl_div(&one_hot).unwrap().item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_values() {
        let y = t(&[-2., 0., 3.], &[3]).leaky_relu(0.2);
        assert_eq!(y.data(), &[-0.4, 0., 3.]);
        assert_eq!(t(&[-2., 3.], &[2]).relu().data(), &[0., 3.]);
    }

    #[test]
    fn l2_normalize_hits_target_norm() {
        let y = t(&[3., 4.], &[2]).l2_normalize(2f64.sqrt()).unwrap();
        assert!((y.data()[0] - 0.848528137).abs() < 1e-8);
        assert!((y.data()[1] - 1.131370850).abs() < 1e-8);
        assert!(t(&[0., 0.], &[2]).l2_normalize(1.0).is_err());
    }
}
