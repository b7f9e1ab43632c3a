//! Forward definitions of the differentiable primitives and their adjoints.

use super::kernels::{gemm, gemm_acc, inverse_axes, permute, transpose};
use super::{Node, Op, Var, NORM_CLAMP};
use crate::{Scalar, Tensor};

const GELU_COEFF: f64 = 0.044_715;

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_COEFF);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn emit(self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'t, T> {
        self.tape.push(value, op, needs_grad)
    }

    fn zip_with(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert!(std::ptr::eq(self.tape, other.tape), "{name}: operands on different tapes");
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    fn map_value(self, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value().map(f)
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, "add", |a, b| a + b);
        let ng = self.needs_grad() || other.needs_grad();
        self.emit(v, Op::Add(self.id, other.id), ng)
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, "sub", |a, b| a - b);
        let ng = self.needs_grad() || other.needs_grad();
        self.emit(v, Op::Sub(self.id, other.id), ng)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, "mul", |a, b| a * b);
        let ng = self.needs_grad() || other.needs_grad();
        self.emit(v, Op::Mul(self.id, other.id), ng)
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Var<'t, T> {
        let v = {
            let x = self.value();
            let b = bias.value();
            let n = last_dim(x.shape());
            assert_eq!(b.shape(), [n], "add_bias: bias shape {:?} vs rows of {n}", b.shape());
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let ng = self.needs_grad() || bias.needs_grad();
        self.emit(v, Op::AddBias(self.id, bias.id), ng)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.map_value(|x| x * c);
        self.emit(v, Op::Scale(self.id, c), self.needs_grad())
    }

    /// `[..., k] · [k, n] -> [..., n]`; leading axes are flattened into rows.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let v = {
            let a = self.value();
            let b = rhs.value();
            assert_eq!(b.rank(), 2, "matmul: right operand must be 2-D, got {:?}", b.shape());
            let k = last_dim(a.shape());
            assert_eq!(b.shape()[0], k, "matmul: inner dims {:?} x {:?}", a.shape(), b.shape());
            let n = b.shape()[1];
            let m = a.len() / k.max(1);
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(n);
            Tensor::from_parts(shape, gemm(a.data(), b.data(), m, k, n))
        };
        let ng = self.needs_grad() || rhs.needs_grad();
        self.emit(v, Op::MatMul(self.id, rhs.id), ng)
    }

    /// Batched product `[B..., m, k] · [B..., k, n] -> [B..., m, n]`.
    pub fn batch_matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let v = {
            let a = self.value();
            let b = rhs.value();
            let (ra, rb) = (a.rank(), b.rank());
            assert!(ra >= 3 && ra == rb, "batch_matmul: ranks {ra} and {rb}");
            assert_eq!(a.shape()[..ra - 2], b.shape()[..rb - 2], "batch_matmul: batch dims");
            let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
            let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
            assert_eq!(k, k2, "batch_matmul: inner dims");
            let batches = a.len() / (m * k).max(1);
            let mut out = vec![T::zero(); batches * m * n];
            for i in 0..batches {
                gemm_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = a.shape()[..ra - 2].to_vec();
            shape.extend([m, n]);
            Tensor::from_parts(shape, out)
        };
        let ng = self.needs_grad() || rhs.needs_grad();
        self.emit(v, Op::BatchMatMul(self.id, rhs.id), ng)
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let v = {
            let x = self.value();
            assert_eq!(axes.len(), x.rank(), "permute: axes {axes:?} for rank {}", x.rank());
            let mut seen = vec![false; axes.len()];
            for &a in axes {
                assert!(a < axes.len() && !seen[a], "permute: invalid axes {axes:?}");
                seen[a] = true;
            }
            let (shape, data) = permute(x.data(), x.shape(), axes);
            Tensor::from_parts(shape, data)
        };
        self.emit(v, Op::Permute(self.id, axes.to_vec()), self.needs_grad())
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Var<'t, T> {
        let rank = self.value().rank();
        assert!(rank >= 2, "transpose needs rank >= 2");
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = {
            let x = self.value();
            assert_eq!(
                shape.iter().product::<usize>(),
                x.len(),
                "reshape: {:?} -> {shape:?}",
                x.shape()
            );
            Tensor::from_parts(shape.to_vec(), x.data().to_vec())
        };
        self.emit(v, Op::Reshape(self.id), self.needs_grad())
    }

    /// Selects rows of a 2-D tensor: `[V, D] -> [indices.len(), D]`.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t, T> {
        let v = {
            let table = self.value();
            assert_eq!(table.rank(), 2, "gather_rows: table must be 2-D");
            let (rows, d) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                assert!(i < rows, "gather_rows: index {i} out of {rows}");
                data.extend_from_slice(table.row(i));
            }
            Tensor::from_parts(vec![indices.len(), d], data)
        };
        self.emit(v, Op::Gather(self.id, indices.to_vec()), self.needs_grad())
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(self) -> Var<'t, T> {
        let v = {
            let x = self.value();
            let n = last_dim(x.shape());
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.emit(v, Op::Softmax(self.id), self.needs_grad())
    }

    /// Softmax over the last axis restricted to keys where `key_mask` is set.
    ///
    /// `key_mask` holds one row of length `last_dim` per group of
    /// `rows_per_mask` consecutive rows. Masked entries come out as exact zeros.
    pub fn masked_softmax(self, key_mask: &[bool], rows_per_mask: usize) -> Var<'t, T> {
        let v = {
            let x = self.value();
            let n = last_dim(x.shape());
            let rows = x.len() / n.max(1);
            assert_eq!(key_mask.len() * rows_per_mask, rows * n, "masked_softmax: mask size");
            let mut data = x.data().to_vec();
            for (r, row) in data.chunks_mut(n).enumerate() {
                let mask = &key_mask[(r / rows_per_mask) * n..(r / rows_per_mask + 1) * n];
                let mut max = T::neg_infinity();
                for (&v, &m) in row.iter().zip(mask) {
                    if m && v > max {
                        max = v;
                    }
                }
                assert!(max > T::neg_infinity(), "masked_softmax: row {r} has no visible key");
                let mut total = T::zero();
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v = if m { (*v - max).exp() } else { T::zero() };
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.emit(v, Op::MaskedSoftmax(self.id), self.needs_grad())
    }

    pub fn log_softmax(self) -> Var<'t, T> {
        let v = {
            let x = self.value();
            let n = last_dim(x.shape());
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.emit(v, Op::LogSoftmax(self.id), self.needs_grad())
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Var<'t, T> {
        let (v, xhat, rstd) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let d = last_dim(x.shape());
            assert_eq!(g.shape(), [d], "layer_norm: gamma shape");
            assert_eq!(b.shape(), [d], "layer_norm: beta shape");
            let dn = T::lit(d as f64);
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(x.len() / d);
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        self.emit(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.map_value(|x| gelu_parts(x).0);
        self.emit(v, Op::Gelu(self.id), self.needs_grad())
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.map_value(T::tanh);
        self.emit(v, Op::Tanh(self.id), self.needs_grad())
    }

    pub fn square(self) -> Var<'t, T> {
        let v = self.map_value(|x| x * x);
        self.emit(v, Op::Square(self.id), self.needs_grad())
    }

    pub fn ln(self) -> Var<'t, T> {
        let v = self.map_value(T::ln);
        self.emit(v, Op::Log(self.id), self.needs_grad())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().data().iter().copied().sum());
        self.emit(v, Op::Sum(self.id), self.needs_grad())
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = {
            let x = self.value();
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64))
        };
        self.emit(v, Op::Mean(self.id), self.needs_grad())
    }

    /// Sums the last axis away.
    pub fn sum_last(self) -> Var<'t, T> {
        let v = {
            let x = self.value();
            let n = last_dim(x.shape());
            let data = x.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
            let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
            Tensor::from_parts(shape, data)
        };
        self.emit(v, Op::SumLast(self.id), self.needs_grad())
    }

    /// Mean over axis 1 of `[N, L, H]` using only positions with `mask = 1`.
    ///
    /// `mask` is `[N, L]` of zeros and ones; every row needs at least one one.
    pub fn masked_mean(self, mask: &[T]) -> Var<'t, T> {
        let v = {
            let x = self.value();
            assert_eq!(x.rank(), 3, "masked_mean: expected [N, L, H]");
            let (n, l, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(mask.len(), n * l, "masked_mean: mask size");
            let mut out = vec![T::zero(); n * h];
            for i in 0..n {
                let m = &mask[i * l..(i + 1) * l];
                let count: T = m.iter().copied().sum();
                assert!(count > T::zero(), "masked_mean: row {i} fully masked");
                let o = &mut out[i * h..(i + 1) * h];
                for (p, &w) in m.iter().enumerate() {
                    if w != T::zero() {
                        let src = &x.data()[(i * l + p) * h..(i * l + p + 1) * h];
                        for (acc, &s) in o.iter_mut().zip(src) {
                            *acc += w * s;
                        }
                    }
                }
                for acc in o.iter_mut() {
                    *acc /= count;
                }
            }
            Tensor::from_parts(vec![n, h], out)
        };
        self.emit(
            v,
            Op::MaskedMean {
                x: self.id,
                mask: mask.to_vec(),
            },
            self.needs_grad(),
        )
    }

    /// Scales each row of a `[R, D]` tensor to unit L2 norm; the norm is
    /// clamped below at [`NORM_CLAMP`].
    pub fn normalize_rows(self) -> Var<'t, T> {
        let (v, norms) = {
            let x = self.value();
            let d = last_dim(x.shape());
            let clamp = T::lit(NORM_CLAMP);
            let mut norms = Vec::with_capacity(x.len() / d.max(1));
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let raw = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                let norm = if raw > clamp {
                    raw
                } else {
                    self.tape.clamped_norms.set(self.tape.clamped_norms.get() + 1);
                    log::warn!("normalize_rows: norm {raw} clamped to {NORM_CLAMP}");
                    clamp
                };
                norms.push(norm);
                out.extend(row.iter().map(|&v| v / norm));
            }
            (Tensor::from_parts(x.shape().to_vec(), out), norms)
        };
        self.emit(v, Op::NormalizeRows { x: self.id, norms }, self.needs_grad())
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Adds `f`'s contribution into the gradient slot of `parent`, if it needs one.
fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    parent: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[parent].needs_grad {
        return;
    }
    let slot = grads[parent].get_or_insert_with(|| vec![T::zero(); nodes[parent].value.len()]);
    f(slot);
}

fn acc_scaled<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], parent: usize, g: &[T], c: T) {
    acc(nodes, grads, parent, |slot| {
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += c * v;
        }
    });
}

/// Propagates the output gradient `g` of node `id` into its parents.
pub(super) fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_scaled(nodes, grads, *a, g, T::one());
            acc_scaled(nodes, grads, *b, g, T::one());
        }
        Op::Sub(a, b) => {
            acc_scaled(nodes, grads, *a, g, T::one());
            acc_scaled(nodes, grads, *b, g, -T::one());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(nodes, grads, *a, |s| {
                for ((s, &gv), &y) in s.iter_mut().zip(g).zip(bv) {
                    *s += gv * y;
                }
            });
            acc(nodes, grads, *b, |s| {
                for ((s, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                    *s += gv * x;
                }
            });
        }
        Op::AddBias(x, b) => {
            acc_scaled(nodes, grads, *x, g, T::one());
            let n = nodes[*b].value.len();
            acc(nodes, grads, *b, |s| {
                for row in g.chunks(n) {
                    for (s, &gv) in s.iter_mut().zip(row) {
                        *s += gv;
                    }
                }
            });
        }
        Op::Scale(x, c) => acc_scaled(nodes, grads, *x, g, *c),
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.len() / k.max(1);
            acc(nodes, grads, *a, |s| {
                let bt = transpose(bv.data(), k, n);
                gemm_acc(g, &bt, s, m, n, k);
            });
            acc(nodes, grads, *b, |s| {
                let at = transpose(av.data(), m, k);
                gemm_acc(&at, g, s, k, m, n);
            });
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let r = av.rank();
            let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
            let batches = av.len() / (m * k).max(1);
            acc(nodes, grads, *a, |s| {
                for i in 0..batches {
                    let bt = transpose(&bv.data()[i * k * n..(i + 1) * k * n], k, n);
                    gemm_acc(&g[i * m * n..(i + 1) * m * n], &bt, &mut s[i * m * k..(i + 1) * m * k], m, n, k);
                }
            });
            acc(nodes, grads, *b, |s| {
                for i in 0..batches {
                    let at = transpose(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                    gemm_acc(&at, &g[i * m * n..(i + 1) * m * n], &mut s[i * k * n..(i + 1) * k * n], k, m, n);
                }
            });
        }
        Op::Permute(x, axes) => {
            let (_, back) = permute(g, out.shape(), &inverse_axes(axes));
            acc_scaled(nodes, grads, *x, &back, T::one());
        }
        Op::Reshape(x) => acc_scaled(nodes, grads, *x, g, T::one()),
        Op::Gather(table, indices) => {
            let d = nodes[*table].value.shape()[1];
            acc(nodes, grads, *table, |s| {
                for (r, &i) in indices.iter().enumerate() {
                    for (s, &gv) in s[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *s += gv;
                    }
                }
            });
        }
        Op::Softmax(x) | Op::MaskedSoftmax(x) => {
            let n = last_dim(out.shape());
            acc(nodes, grads, *x, |s| {
                for ((s, y), gr) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((s, &yv), &gv) in s.iter_mut().zip(y).zip(gr) {
                        *s += yv * (gv - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let n = last_dim(out.shape());
            acc(nodes, grads, *x, |s| {
                for ((s, y), gr) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((s, &yv), &gv) in s.iter_mut().zip(y).zip(gr) {
                        *s += gv - yv.exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = last_dim(out.shape());
            let gam = nodes[*gamma].value.data();
            acc(nodes, grads, *gamma, |s| {
                for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((s, &gv), &h) in s.iter_mut().zip(gr).zip(xh) {
                        *s += gv * h;
                    }
                }
            });
            acc(nodes, grads, *beta, |s| {
                for gr in g.chunks(d) {
                    for (s, &gv) in s.iter_mut().zip(gr) {
                        *s += gv;
                    }
                }
            });
            let dn = T::lit(d as f64);
            acc(nodes, grads, *x, |s| {
                for (((s, gr), xh), &r) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_d += dh;
                        mean_dx += dh * xh[j];
                    }
                    mean_d /= dn;
                    mean_dx /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        s[j] += r * (dh - mean_d - xh[j] * mean_dx);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            acc(nodes, grads, *x, |s| {
                for ((s, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                    *s += gv * gelu_parts(v).1;
                }
            });
        }
        Op::Tanh(x) => acc(nodes, grads, *x, |s| {
            for ((s, &gv), &y) in s.iter_mut().zip(g).zip(out.data()) {
                *s += gv * (T::one() - y * y);
            }
        }),
        Op::Square(x) => {
            let xv = nodes[*x].value.data();
            acc(nodes, grads, *x, |s| {
                for ((s, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                    *s += gv * (v + v);
                }
            });
        }
        Op::Log(x) => {
            let xv = nodes[*x].value.data();
            acc(nodes, grads, *x, |s| {
                for ((s, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                    *s += gv / v;
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |s| {
            for s in s.iter_mut() {
                *s += g[0];
            }
        }),
        Op::Mean(x) => {
            let c = g[0] / T::lit(nodes[*x].value.len() as f64);
            acc(nodes, grads, *x, |s| {
                for s in s.iter_mut() {
                    *s += c;
                }
            });
        }
        Op::SumLast(x) => {
            let n = last_dim(nodes[*x].value.shape());
            acc(nodes, grads, *x, |s| {
                for (row, &gv) in s.chunks_mut(n).zip(g) {
                    for s in row.iter_mut() {
                        *s += gv;
                    }
                }
            });
        }
        Op::MaskedMean { x, mask } => {
            let shape = nodes[*x].value.shape();
            let (n, l, h) = (shape[0], shape[1], shape[2]);
            acc(nodes, grads, *x, |s| {
                for i in 0..n {
                    let m = &mask[i * l..(i + 1) * l];
                    let count: T = m.iter().copied().sum();
                    let gr = &g[i * h..(i + 1) * h];
                    for (p, &w) in m.iter().enumerate() {
                        if w != T::zero() {
                            let c = w / count;
                            for (s, &gv) in s[(i * l + p) * h..(i * l + p + 1) * h].iter_mut().zip(gr) {
                                *s += c * gv;
                            }
                        }
                    }
                }
            });
        }
        Op::NormalizeRows { x, norms } => {
            let d = last_dim(out.shape());
            let clamp = T::lit(NORM_CLAMP);
            let xv = nodes[*x].value.data();
            acc(nodes, grads, *x, |s| {
                for (((s, y), gr), (&norm, xr)) in s
                    .chunks_mut(d)
                    .zip(out.data().chunks(d))
                    .zip(g.chunks(d))
                    .zip(norms.iter().zip(xv.chunks(d)))
                {
                    let raw = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw > clamp {
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((s, &yv), &gv) in s.iter_mut().zip(y).zip(gr) {
                            *s += (gv - yv * dot) / norm;
                        }
                    } else {
                        for (s, &gv) in s.iter_mut().zip(gr) {
                            *s += gv / norm;
                        }
                    }
                }
            });
        }
    }
}
