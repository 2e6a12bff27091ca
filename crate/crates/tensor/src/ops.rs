use crate::error::{dim_err, domain_err, Result};
use crate::flops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(), false, other.data(), false, &mut out, false);
        flops::record(2 * (m * k * n) as u64);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    fn same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!("{op}: shapes {:?} and {:?} differ", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64_lossy(c);
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Adds a vector of length `shape[last]` to every trailing row.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let width = *self.shape().last().expect("rank >= 1");
        if bias.rank() != 1 || bias.len() != width {
            return dim_err(format!("add_row: bias {:?} against {:?}", bias.shape(), self.shape()));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(width) {
            row.iter_mut().zip(b).for_each(|(x, &b)| *x += b);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); width];
                for row in g.chunks_exact(width) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Selects slices along axis 0 (rows may repeat); backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if self.rank() == 0 || indices.is_empty() {
            return dim_err("gather_rows needs a ranked tensor and at least one index");
        }
        let rows = self.shape()[0];
        let width = self.len() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return dim_err(format!("gather_rows: index {bad} out of range for {rows} rows"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); rows * width];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gx[i * width..(i + 1) * width];
                    dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(a, &v)| *a += v);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[g] = max over indices[g·group .. (g+1)·group] of self[index]`,
    /// coordinatewise. Same value as `gather_rows` followed by a max over
    /// each group, without materializing the gathered rows.
    pub fn gather_max(&self, indices: &[usize], group: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 || group == 0 || indices.is_empty() || !indices.len().is_multiple_of(group) {
            return dim_err(format!("gather_max: {} indices in groups of {group} over {:?}", indices.len(), self.shape()));
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return dim_err(format!("gather_max: index {bad} out of range for {rows} rows"));
        }
        let groups = indices.len() / group;
        let src = self.data();
        let mut out = Vec::with_capacity(groups * width);
        let mut arg = Vec::with_capacity(groups * width);
        for idx in indices.chunks_exact(group) {
            let first = idx[0] * width;
            let start = out.len();
            out.extend_from_slice(&src[first..first + width]);
            arg.extend((0..width).map(|c| first + c));
            for &i in &idx[1..] {
                let row = &src[i * width..(i + 1) * width];
                for c in 0..width {
                    if row[c] > out[start + c] {
                        out[start + c] = row[c];
                        arg[start + c] = i * width + c;
                    }
                }
            }
        }
        flops::record((groups * (group - 1) * width) as u64);
        let len = self.len();
        Ok(Tensor::from_op(
            out,
            vec![groups, width],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); len];
                for (&src, &v) in arg.iter().zip(g) {
                    gx[src] += v;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = xs.first() else {
            return dim_err("concat of zero tensors");
        };
        let rank = first.rank();
        if axis >= rank {
            return dim_err(format!("concat axis {axis} for rank {rank}"));
        }
        for x in xs {
            let ok = x.rank() == rank
                && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return dim_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", x.shape(), first.shape()));
            }
        }
        if xs.len() == 1 {
            return Ok(first.clone());
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let chunks: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (x, &c) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&x.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
        Ok(Tensor::from_op(
            out,
            shape,
            xs.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<T>> = chunks.iter().map(|&c| Vec::with_capacity(c * outer)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gx, &c) in grads.iter_mut().zip(&chunks) {
                        gx.extend_from_slice(&g[pos..pos + c]);
                        pos += c;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Reduces `axis` away. Max routes its gradient to the first maximal element.
    pub fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return dim_err(format!("reduce axis {axis} for shape {:?}", self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if n == 0 {
            return domain_err("reduction over an empty axis");
        }
        let src = self.data();
        let at = move |o: usize, j: usize, i: usize| (o * n + j) * inner + i;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let slices = (outer * inner) as u64;
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &src[at(o, j, 0)..at(o, j, 0) + inner];
                        out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                let mean = kind == ReduceKind::Mean;
                let w = if mean { T::one() / T::from_usize(n).unwrap() } else { T::one() };
                if mean {
                    out.iter_mut().for_each(|v| *v *= w);
                }
                flops::record(slices * (n as u64 - 1) + if mean { slices } else { 0 });
                Ok(Tensor::from_op(
                    out,
                    shape,
                    vec![self.clone()],
                    Box::new(move |g| {
                        let mut gx = vec![T::zero(); outer * n * inner];
                        for o in 0..outer {
                            for j in 0..n {
                                let base = at(o, j, 0);
                                gx[base..base + inner]
                                    .iter_mut()
                                    .zip(&g[o * inner..(o + 1) * inner])
                                    .for_each(|(a, &v)| *a = v * w);
                            }
                        }
                        vec![Some(gx)]
                    }),
                ))
            }
            ReduceKind::Max => {
                let mut out = Vec::with_capacity(outer * inner);
                let mut arg = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[at(o, 0, i)];
                        let mut best_j = 0;
                        for j in 1..n {
                            let v = src[at(o, j, i)];
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        out.push(best);
                        arg.push(at(o, best_j, i));
                    }
                }
                flops::record(slices * (n as u64 - 1));
                let len = self.len();
                Ok(Tensor::from_op(
                    out,
                    shape,
                    vec![self.clone()],
                    Box::new(move |g| {
                        let mut gx = vec![T::zero(); len];
                        for (&src, &v) in arg.iter().zip(g) {
                            gx[src] += v;
                        }
                        vec![Some(gx)]
                    }),
                ))
            }
        }
    }

    /// Sum of every element as a one-element tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let len = self.len();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; len])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[1., 0., 0., 1.], &[2, 2]);
        let b = t(&[5., 6., 7., 8.], &[2, 2]);
        assert_eq!(id.matmul(&b).unwrap().data(), b.data());
        let r = t(&[1., 2.], &[1, 2]).matmul(&t(&[3., 4.], &[2, 1])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(t(&[1., 2.], &[1, 2]).matmul(&t(&[1., 2., 3.], &[3, 1])).is_err());
        assert!(t(&[1., 2.], &[2]).matmul(&t(&[1., 2.], &[2, 1])).is_err());
    }

    #[test]
    fn matmul_grad_is_row_sums_of_b() {
        let a = Tensor::<f64>::leaf(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let b = Tensor::<f64>::leaf(vec![1., -1., 2., 0.5, 3., 7.], &[3, 2]).unwrap();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        // d/dA_ij sum(AB) = sum_n B_jn
        assert_eq!(a.grad().unwrap(), vec![0., 2.5, 10., 0., 2.5, 10.]);
        // d/dB_jn sum(AB) = sum_m A_mj
        assert_eq!(b.grad().unwrap(), vec![5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn reduce_examples() {
        let x = t(&[1., 2., 3., 4.], &[2, 2]);
        assert_eq!(x.reduce(0, ReduceKind::Mean).unwrap().data(), &[2., 3.]);
        assert_eq!(x.reduce(0, ReduceKind::Max).unwrap().data(), &[3., 4.]);
        assert_eq!(x.reduce(1, ReduceKind::Sum).unwrap().data(), &[3., 7.]);
        let row = t(&[4., -1., 2.], &[1, 3]);
        assert_eq!(row.reduce(0, ReduceKind::Mean).unwrap().data(), row.data());
        assert!(x.reduce(2, ReduceKind::Sum).is_err());
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let x = Tensor::<f64>::leaf(vec![2., 5., 2., 5., 1., 5.], &[3, 2]).unwrap();
        let m = x.reduce(0, ReduceKind::Max).unwrap();
        assert_eq!(m.data(), &[2., 5.]);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn concat_examples() {
        let a = t(&[1., 2.], &[2, 1]);
        let b = t(&[3., 4.], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1., 3., 2., 4.]);
        assert_eq!(Tensor::concat(&[a.clone()], 1).unwrap().data(), a.data());
        let wide = Tensor::concat(&[Tensor::<f64>::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[2, 5]).unwrap()], 1).unwrap();
        assert_eq!(wide.shape(), &[2, 8]);
        assert!(Tensor::concat(&[t(&[1., 2.], &[2]), t(&[1., 2.], &[2, 1])], 0).is_err());
    }

    #[test]
    fn concat_backward_slices() {
        let a = Tensor::<f64>::leaf(vec![1., 2.], &[2, 1]).unwrap();
        let b = Tensor::<f64>::leaf(vec![3., 4., 5., 6.], &[2, 2]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        let w = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        c.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1., 4.]);
        assert_eq!(b.grad().unwrap(), vec![2., 3., 5., 6.]);
    }

    #[test]
    fn gather_scatter_adds() {
        let x = Tensor::<f64>::leaf(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let g = x.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.data(), &[3., 4., 3., 4., 1., 2.]);
        g.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 1., 2., 2.]);
        assert!(x.gather_rows(&[2]).is_err());
    }

    #[test]
    fn flops_follow_convention() {
        let a = t(&[1.; 8], &[2, 4]);
        let w = t(&[1.; 8], &[4, 2]);
        let (_, n) = crate::flops::measure(|| a.matmul(&w).unwrap());
        assert_eq!(n, 2 * 2 * 4 * 2);
        let (_, n) = crate::flops::measure(|| a.reduce(0, ReduceKind::Max).unwrap());
        assert_eq!(n, 4);
        let (_, n) = crate::flops::measure(|| a.reduce(0, ReduceKind::Mean).unwrap());
        assert_eq!(n, 8);
    }
}
