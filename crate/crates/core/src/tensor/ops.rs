//! Forward and backward implementations for every tensor operation.

use super::{el, BackCtx, Element, Tensor};

fn prod(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (elements before `axis`, length of `axis`, elements after `axis`).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = prod(&shape[..axis]);
    let inner = prod(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permuted_copy<E: Copy>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let nd = shape.len();
    assert_eq!(axes.len(), nd, "permute axes must cover every dimension");
    let mut seen = vec![false; nd];
    for &a in axes {
        assert!(a < nd && !seen[a], "bad permutation {axes:?}");
        seen[a] = true;
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += map_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= map_strides[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

impl<E: Element> Tensor<E> {
    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn zip_with(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op needs matching shapes: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        let data = self.zip_with(other, |a, b| a + b);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        let data = self.zip_with(other, |a, b| a - b);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        let data = self.zip_with(other, |a, b| a * b);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                vec![
                    Some(ctx.grad.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    Some(ctx.grad.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor<E>) -> Tensor<E> {
        let data = self.zip_with(other, |a, b| a / b);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let da = ctx.grad.iter().zip(b).map(|(&g, &b)| g / b).collect();
                let db = ctx
                    .grad
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn add_scalar(&self, v: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a + v).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx<E>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, v: E) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a * v).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                vec![Some(ctx.grad.iter().map(|&g| g * v).collect())]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        self.mul_scalar(-E::one())
    }

    pub fn exp(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                vec![Some(
                    ctx.grad.iter().zip(ctx.out_data).map(|(&g, &y)| g * y).collect(),
                )]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx<E>| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.out_data)
                        .map(|(&g, &y)| g * (E::one() - y * y))
                        .collect(),
                )]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Matrix multiplication
    // ------------------------------------------------------------------

    /// `[.., k] x [k, n]` (leading dims flattened into rows), or fully
    /// batched `[B.., m, k] x [B.., k, n]` with equal batch prefixes.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let s = self.shape();
        let r = rhs.shape();
        assert!(s.len() >= 2, "matmul lhs needs >= 2 dims, got {s:?}");
        if r.len() == 2 {
            let k = s[s.len() - 1];
            assert_eq!(k, r[0], "matmul inner dims differ: {s:?} x {r:?}");
            let n = r[1];
            let m = prod(&s[..s.len() - 1]);
            let mut out = vec![E::zero(); m * n];
            E::gemm(
                m, k, n,
                E::one(),
                self.data(), k as isize, 1,
                rhs.data(), n as isize, 1,
                E::zero(),
                &mut out, n as isize, 1,
            );
            let mut out_shape = s[..s.len() - 1].to_vec();
            out_shape.push(n);
            Tensor::from_op(
                out_shape,
                out,
                vec![self.clone(), rhs.clone()],
                Box::new(move |ctx: &BackCtx<E>| {
                    let a = ctx.parents[0].data();
                    let w = ctx.parents[1].data();
                    // dA = G W^T
                    let mut da = vec![E::zero(); m * k];
                    E::gemm(
                        m, n, k,
                        E::one(),
                        ctx.grad, n as isize, 1,
                        w, 1, n as isize,
                        E::zero(),
                        &mut da, k as isize, 1,
                    );
                    // dW = A^T G
                    let mut dw = vec![E::zero(); k * n];
                    E::gemm(
                        k, m, n,
                        E::one(),
                        a, 1, k as isize,
                        ctx.grad, n as isize, 1,
                        E::zero(),
                        &mut dw, n as isize, 1,
                    );
                    vec![Some(da), Some(dw)]
                }),
            )
        } else {
            assert_eq!(s.len(), r.len(), "batched matmul rank mismatch: {s:?} x {r:?}");
            let nb = s.len() - 2;
            assert_eq!(&s[..nb], &r[..nb], "batched matmul batch dims differ: {s:?} x {r:?}");
            let (m, k) = (s[nb], s[nb + 1]);
            assert_eq!(k, r[nb], "matmul inner dims differ: {s:?} x {r:?}");
            let n = r[nb + 1];
            let batches = prod(&s[..nb]);
            let mut out = vec![E::zero(); batches * m * n];
            for b in 0..batches {
                E::gemm(
                    m, k, n,
                    E::one(),
                    &self.data()[b * m * k..(b + 1) * m * k], k as isize, 1,
                    &rhs.data()[b * k * n..(b + 1) * k * n], n as isize, 1,
                    E::zero(),
                    &mut out[b * m * n..(b + 1) * m * n], n as isize, 1,
                );
            }
            let mut out_shape = s[..nb].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            Tensor::from_op(
                out_shape,
                out,
                vec![self.clone(), rhs.clone()],
                Box::new(move |ctx: &BackCtx<E>| {
                    let a = ctx.parents[0].data();
                    let w = ctx.parents[1].data();
                    let mut da = vec![E::zero(); batches * m * k];
                    let mut dw = vec![E::zero(); batches * k * n];
                    for b in 0..batches {
                        let g = &ctx.grad[b * m * n..(b + 1) * m * n];
                        E::gemm(
                            m, n, k,
                            E::one(),
                            g, n as isize, 1,
                            &w[b * k * n..(b + 1) * k * n], 1, n as isize,
                            E::zero(),
                            &mut da[b * m * k..(b + 1) * m * k], k as isize, 1,
                        );
                        E::gemm(
                            k, m, n,
                            E::one(),
                            &a[b * m * k..(b + 1) * m * k], 1, k as isize,
                            g, n as isize, 1,
                            E::zero(),
                            &mut dw[b * k * n..(b + 1) * k * n], n as isize, 1,
                        );
                    }
                    vec![Some(da), Some(dw)]
                }),
            )
        }
    }

    // ------------------------------------------------------------------
    // Shape manipulation
    // ------------------------------------------------------------------

    pub fn permute(&self, axes: &[usize]) -> Tensor<E> {
        let (out_shape, out) = permuted_copy(self.data(), self.shape(), axes);
        let axes_owned = axes.to_vec();
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, g) = permuted_copy(ctx.grad, ctx.out_shape, &inverse);
                vec![Some(g)]
            }),
        )
    }

    /// Swap the last two dimensions.
    pub fn transpose_last2(&self) -> Tensor<E> {
        let nd = self.ndim();
        assert!(nd >= 2, "transpose needs >= 2 dims");
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        assert_eq!(
            prod(shape),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackCtx<E>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.ndim(), base.len(), "concat rank mismatch");
            for (d, (&a, &b)) in base.iter().zip(p.shape()).enumerate() {
                assert!(d == axis || a == b, "concat shapes differ off-axis");
            }
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let src = &p.data()[o * len * inner..(o + 1) * len * inner];
                out.extend_from_slice(src);
            }
        }
        let parents: Vec<Tensor<E>> = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(
            out_shape,
            out,
            parents,
            Box::new(move |ctx: &BackCtx<E>| {
                let mut grads: Vec<Option<Vec<E>>> =
                    lens.iter().map(|&l| Some(Vec::with_capacity(outer * l * inner))).collect();
                let mut offset = 0usize;
                let row = total * inner;
                for (gi, &len) in lens.iter().enumerate() {
                    let g = grads[gi].as_mut().unwrap();
                    for o in 0..outer {
                        let start = o * row + offset;
                        g.extend_from_slice(&ctx.grad[start..start + len * inner]);
                    }
                    offset += len * inner;
                }
                grads
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let (outer, full, inner) = around_axis(&shape, axis);
        assert!(start + len <= full, "narrow out of range");
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut g = vec![E::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner]
                        .copy_from_slice(&ctx.grad[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Gather along `axis`: `out[.., t, ..] = self[.., idx[t], ..]`.
    /// Indices may repeat; gradient scatter-adds.
    pub fn index_select(&self, axis: usize, idx: &[usize]) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let (outer, full, inner) = around_axis(&shape, axis);
        for &i in idx {
            assert!(i < full, "index_select index {i} out of range {full}");
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = idx.len();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&self.data()[base..base + inner]);
            }
        }
        let idx_owned = idx.to_vec();
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut g = vec![E::zero(); outer * full * inner];
                for o in 0..outer {
                    for (t, &i) in idx_owned.iter().enumerate() {
                        let src = (o * idx_owned.len() + t) * inner;
                        let dst = (o * full + i) * inner;
                        for c in 0..inner {
                            g[dst + c] += ctx.grad[src + c];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Tile into a new leading dimension of size `n`; gradient sums it away.
    pub fn broadcast_leading(&self, n: usize) -> Tensor<E> {
        let chunk = self.numel();
        let mut out_shape = Vec::with_capacity(self.ndim() + 1);
        out_shape.push(n);
        out_shape.extend_from_slice(self.shape());
        let mut out = Vec::with_capacity(n * chunk);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut g = vec![E::zero(); chunk];
                for b in 0..n {
                    for c in 0..chunk {
                        g[c] += ctx.grad[b * chunk + c];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Normalization and broadcasted vector ops
    // ------------------------------------------------------------------

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = around_axis(&shape, axis);
        assert!(len > 0, "softmax over an empty axis");
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let mut mx = x[at(0)];
                for t in 1..len {
                    if x[at(t)] > mx {
                        mx = x[at(t)];
                    }
                }
                let mut sum = E::zero();
                for t in 0..len {
                    let e = (x[at(t)] - mx).exp();
                    out[at(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[at(t)] = out[at(t)] / sum;
                }
            }
        }
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let y = ctx.out_data;
                let mut g = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let mut dot = E::zero();
                        for t in 0..len {
                            dot += ctx.grad[at(t)] * y[at(t)];
                        }
                        for t in 0..len {
                            g[at(t)] = y[at(t)] * (ctx.grad[at(t)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Normalize the last axis to zero mean and unit variance (no affine
    /// part; scale/shift with [`Tensor::mul_rowvec`] / [`Tensor::add_rowvec`]).
    pub fn layer_norm(&self, eps: f64) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("layer_norm needs >= 1 dim");
        assert!(d > 0, "layer_norm over an empty axis");
        let lanes = self.numel() / d;
        let epsv = el::<E>(eps);
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        let dn = el::<E>(d as f64);
        for l in 0..lanes {
            let lane = &x[l * d..(l + 1) * d];
            let mean = lane.iter().copied().sum::<E>() / dn;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let inv = (var + epsv).sqrt().recip();
            for (o, &v) in out[l * d..(l + 1) * d].iter_mut().zip(lane) {
                *o = (v - mean) * inv;
            }
        }
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let x = ctx.parents[0].data();
                let y = ctx.out_data;
                let mut g = vec![E::zero(); x.len()];
                for l in 0..lanes {
                    let xs = &x[l * d..(l + 1) * d];
                    let ys = &y[l * d..(l + 1) * d];
                    let gs = &ctx.grad[l * d..(l + 1) * d];
                    let mean = xs.iter().copied().sum::<E>() / dn;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
                    let inv = (var + epsv).sqrt().recip();
                    let gmean = gs.iter().copied().sum::<E>() / dn;
                    let gymean =
                        gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<E>() / dn;
                    for t in 0..d {
                        g[l * d + t] = inv * (gs[t] - gmean - ys[t] * gymean);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Multiply each trailing-axis lane elementwise by `v` (shape `[d]`).
    pub fn mul_rowvec(&self, v: &Tensor<E>) -> Tensor<E> {
        let d = *self.shape().last().unwrap();
        assert_eq!(v.shape(), &[d], "rowvec must be [last_dim]");
        let rows = self.numel() / d;
        let mut out = Vec::with_capacity(self.numel());
        for r in 0..rows {
            for c in 0..d {
                out.push(self.data()[r * d + c] * v.data()[c]);
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let x = ctx.parents[0].data();
                let v = ctx.parents[1].data();
                let mut dx = vec![E::zero(); x.len()];
                let mut dv = vec![E::zero(); d];
                for r in 0..rows {
                    for c in 0..d {
                        let g = ctx.grad[r * d + c];
                        dx[r * d + c] = g * v[c];
                        dv[c] += g * x[r * d + c];
                    }
                }
                vec![Some(dx), Some(dv)]
            }),
        )
    }

    /// Add `v` (shape `[d]`) to each trailing-axis lane.
    pub fn add_rowvec(&self, v: &Tensor<E>) -> Tensor<E> {
        let d = *self.shape().last().unwrap();
        assert_eq!(v.shape(), &[d], "rowvec must be [last_dim]");
        let rows = self.numel() / d;
        let mut out = Vec::with_capacity(self.numel());
        for r in 0..rows {
            for c in 0..d {
                out.push(self.data()[r * d + c] + v.data()[c]);
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut dv = vec![E::zero(); d];
                for r in 0..rows {
                    for c in 0..d {
                        dv[c] += ctx.grad[r * d + c];
                    }
                }
                vec![Some(ctx.grad.to_vec()), Some(dv)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Reductions and loss
    // ------------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum_all().mul_scalar(el::<E>(1.0 / n as f64))
    }

    /// Mean along `axis`, removing that dimension.
    pub fn mean_axis(&self, axis: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = around_axis(&shape, axis);
        assert!(len > 0, "mean over an empty axis");
        let scale = el::<E>(1.0 / len as f64);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += self.data()[(o * len + t) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let mut g = vec![E::zero(); outer * len * inner];
                for o in 0..outer {
                    for t in 0..len {
                        for i in 0..inner {
                            g[(o * len + t) * inner + i] = ctx.grad[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean cross-entropy of `[B, C]` logits against integer labels, with the
    /// log-softmax fused for stability.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cross_entropy needs [batch, classes] logits");
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b, "one label per batch row");
        for &l in labels {
            assert!(l < c, "label {l} out of range {c}");
        }
        let x = self.data();
        let mut total = E::zero();
        for (row, &label) in labels.iter().enumerate() {
            let lane = &x[row * c..(row + 1) * c];
            let mx = lane.iter().copied().fold(lane[0], E::max);
            let lse = mx + lane.iter().map(|&v| (v - mx).exp()).sum::<E>().ln();
            total += lse - lane[label];
        }
        let labels_owned = labels.to_vec();
        Tensor::from_op(
            vec![1],
            vec![total / el::<E>(b as f64)],
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let x = ctx.parents[0].data();
                let scale = ctx.grad[0] / el::<E>(b as f64);
                let mut g = vec![E::zero(); b * c];
                for (row, &label) in labels_owned.iter().enumerate() {
                    let lane = &x[row * c..(row + 1) * c];
                    let mx = lane.iter().copied().fold(lane[0], E::max);
                    let sum: E = lane.iter().map(|&v| (v - mx).exp()).sum();
                    for t in 0..c {
                        let p = (lane[t] - mx).exp() / sum;
                        let ind = if t == label { E::one() } else { E::zero() };
                        g[row * c + t] = scale * (p - ind);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Spatial ops
    // ------------------------------------------------------------------

    /// Depthwise 2D convolution: `[B, C, H, W]` by per-channel kernels
    /// `[C, k, k]`, stride 1, zero padding `(k-1)/2` so the output keeps H, W.
    /// The kernel side must be odd; even sides cannot center on a pixel.
    pub fn conv2d_depthwise(&self, kernel: &Tensor<E>) -> Tensor<E> {
        let s = self.shape();
        let ks = kernel.shape();
        assert_eq!(s.len(), 4, "conv input must be [B, C, H, W]");
        assert_eq!(ks.len(), 3, "kernel must be [C, k, k]");
        assert_eq!(s[1], ks[0], "kernel channels must match input channels");
        assert_eq!(ks[1], ks[2], "kernel must be square");
        assert_eq!(ks[1] % 2, 1, "kernel side must be odd");
        let (bs, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let k = ks[1];
        let pad = (k - 1) as i64 / 2;
        let x = self.data();
        let kd = kernel.data();
        let mut out = vec![E::zero(); bs * ch * h * w];
        let at = |b: usize, c: usize, y: usize, xx: usize| ((b * ch + c) * h + y) * w + xx;
        for b in 0..bs {
            for c in 0..ch {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = E::zero();
                        for u in 0..k {
                            let sy = y as i64 + u as i64 - pad;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for v in 0..k {
                                let sx = xx as i64 + v as i64 - pad;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                acc += kd[(c * k + u) * k + v]
                                    * x[at(b, c, sy as usize, sx as usize)];
                            }
                        }
                        out[at(b, c, y, xx)] = acc;
                    }
                }
            }
        }
        Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let x = ctx.parents[0].data();
                let kd = ctx.parents[1].data();
                let at = |b: usize, c: usize, y: usize, xx: usize| ((b * ch + c) * h + y) * w + xx;
                let mut dx = vec![E::zero(); x.len()];
                let mut dk = vec![E::zero(); kd.len()];
                for b in 0..bs {
                    for c in 0..ch {
                        for y in 0..h {
                            for xx in 0..w {
                                let g = ctx.grad[at(b, c, y, xx)];
                                for u in 0..k {
                                    let sy = y as i64 + u as i64 - pad;
                                    if sy < 0 || sy >= h as i64 {
                                        continue;
                                    }
                                    for v in 0..k {
                                        let sx = xx as i64 + v as i64 - pad;
                                        if sx < 0 || sx >= w as i64 {
                                            continue;
                                        }
                                        let src = at(b, c, sy as usize, sx as usize);
                                        dx[src] += g * kd[(c * k + u) * k + v];
                                        dk[(c * k + u) * k + v] += g * x[src];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dk)]
            }),
        )
    }

    /// Max pooling with square window == stride `f`; H and W must divide.
    pub fn max_pool2d(&self, f: usize) -> Tensor<E> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "pool input must be [B, C, H, W]");
        assert!(f > 0 && s[2] % f == 0 && s[3] % f == 0, "pool factor must divide H and W");
        let (bs, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / f, w / f);
        let x = self.data();
        let mut out = vec![E::zero(); bs * ch * oh * ow];
        for b in 0..bs {
            for c in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[((b * ch + c) * h + oy * f) * w + ox * f];
                        for u in 0..f {
                            for v in 0..f {
                                let val = x[((b * ch + c) * h + oy * f + u) * w + ox * f + v];
                                if val > best {
                                    best = val;
                                }
                            }
                        }
                        out[((b * ch + c) * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        Tensor::from_op(
            vec![bs, ch, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx<E>| {
                let x = ctx.parents[0].data();
                let mut g = vec![E::zero(); x.len()];
                for b in 0..bs {
                    for c in 0..ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                // first max in scan order receives the gradient
                                let mut best_at = ((b * ch + c) * h + oy * f) * w + ox * f;
                                let mut best = x[best_at];
                                for u in 0..f {
                                    for v in 0..f {
                                        let at =
                                            ((b * ch + c) * h + oy * f + u) * w + ox * f + v;
                                        if x[at] > best {
                                            best = x[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                g[best_at] += ctx.grad[((b * ch + c) * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

impl<E: Element> std::ops::Add for &Tensor<E> {
    type Output = Tensor<E>;
    fn add(self, rhs: &Tensor<E>) -> Tensor<E> {
        Tensor::add(self, rhs)
    }
}

impl<E: Element> std::ops::Sub for &Tensor<E> {
    type Output = Tensor<E>;
    fn sub(self, rhs: &Tensor<E>) -> Tensor<E> {
        Tensor::sub(self, rhs)
    }
}

impl<E: Element> std::ops::Mul for &Tensor<E> {
    type Output = Tensor<E>;
    fn mul(self, rhs: &Tensor<E>) -> Tensor<E> {
        Tensor::mul(self, rhs)
    }
}
