//! Tensor operations: forward kernels plus their backward closures.
//!
//! Matrix multiplication dispatches to the tuned gemm kernel and splits
//! output rows across the rayon pool when a single product is large enough
//! to be worth it. Every parallel path writes disjoint output regions with a
//! fixed sequential reduction order, so results are bit-identical regardless
//! of thread count.

use std::sync::Arc;

use crate::rng::RngStream;
use crate::scalar::Scalar;

use super::{Shape, Tensor, TensorError, TensorResult};

/// Minimum flops (2*m*k*n) before a single gemm is split across threads.
const GEMM_PAR_FLOPS: usize = 1 << 23;
/// Minimum rows per thread chunk when splitting.
const GEMM_PAR_MIN_ROWS: usize = 32;

// ── Gemm plumbing ───────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

#[derive(Clone, Copy)]
struct SendConstPtr<T>(*const T);
unsafe impl<T> Send for SendConstPtr<T> {}
unsafe impl<T> Sync for SendConstPtr<T> {}

/// `C[m,n] = A[m,k] * B[k,n] * 1 + beta * C`, strided views, row split
/// across threads for large products.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    let flops = 2 * m * k * n;
    let threads = rayon::current_num_threads();
    if flops >= GEMM_PAR_FLOPS && threads > 1 && m >= 2 * GEMM_PAR_MIN_ROWS {
        let chunks = threads.min(m / GEMM_PAR_MIN_ROWS).max(1);
        let rows_per = m.div_ceil(chunks);
        let a_send = SendConstPtr(a);
        let b_send = SendConstPtr(b);
        let c_send = SendPtr(c);
        rayon::scope(|s| {
            for chunk in 0..chunks {
                let r0 = chunk * rows_per;
                let r1 = ((chunk + 1) * rows_per).min(m);
                if r0 >= r1 {
                    continue;
                }
                s.spawn(move |_| {
                    let (a_send, b_send, c_send) = (a_send, b_send, c_send);
                    unsafe {
                        T::gemm(
                            r1 - r0,
                            k,
                            n,
                            T::ONE,
                            a_send.0.offset(r0 as isize * rsa),
                            rsa,
                            csa,
                            b_send.0,
                            rsb,
                            csb,
                            beta,
                            c_send.0.offset(r0 as isize * rsc),
                            rsc,
                            csc,
                        );
                    }
                });
            }
        });
    } else {
        unsafe {
            T::gemm(m, k, n, T::ONE, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        }
    }
}

// ── Broadcast helpers ───────────────────────────────────────────────

/// Right-aligned broadcast of two shapes (numpy rules).
fn broadcast_shapes(op: &'static str, a: &Shape, b: &Shape) -> Result<Shape, TensorError> {
    let (da, db) = (a.dims(), b.dims());
    let ndim = da.len().max(db.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let xa = if i < ndim - da.len() { 1 } else { da[i - (ndim - da.len())] };
        let xb = if i < ndim - db.len() { 1 } else { db[i - (ndim - db.len())] };
        if xa != xb && xa != 1 && xb != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_string(),
                rhs: b.to_string(),
            });
        }
        out[i] = xa.max(xb);
    }
    Ok(Shape::from_vec(out))
}

/// Strides of `shape` aligned to `out` rank, zeroed on broadcast axes.
fn broadcast_strides(shape: &Shape, out: &Shape) -> Vec<usize> {
    let dims = shape.dims();
    let ndim = out.ndim();
    let offset = ndim - dims.len();
    let own = shape.strides();
    let mut s = vec![0usize; ndim];
    for i in 0..dims.len() {
        if dims[i] != 1 {
            s[offset + i] = own[i];
        }
    }
    s
}

/// Expand `src` (of shape `src_shape`) to `out_shape` element order.
fn expand_to<T: Scalar>(src: &[T], src_shape: &Shape, out_shape: &Shape) -> Vec<T> {
    let numel = out_shape.numel();
    let strides = broadcast_strides(src_shape, out_shape);
    let dims = out_shape.dims();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; dims.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for ax in (0..dims.len()).rev() {
            coords[ax] += 1;
            off += strides[ax];
            if coords[ax] < dims[ax] {
                break;
            }
            off -= strides[ax] * dims[ax];
            coords[ax] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped like `from`) down to `to` by folding broadcast axes.
fn reduce_to_shape<T: Scalar>(grad: &[T], from: &Shape, to: &Shape) -> Vec<T> {
    if from.dims() == to.dims() {
        return grad.to_vec();
    }
    let to_numel = to.numel();
    // Fast path: `to` is an exact suffix of `from`.
    if is_suffix(to, from) && to_numel > 0 {
        let mut out = vec![T::ZERO; to_numel];
        for chunk in grad.chunks_exact(to_numel) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += *g;
            }
        }
        return out;
    }
    let strides = broadcast_strides(to, from);
    let dims = from.dims();
    let mut out = vec![T::ZERO; to_numel];
    let mut coords = vec![0usize; dims.len()];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for ax in (0..dims.len()).rev() {
            coords[ax] += 1;
            off += strides[ax];
            if coords[ax] < dims[ax] {
                break;
            }
            off -= strides[ax] * dims[ax];
            coords[ax] = 0;
        }
    }
    out
}

fn is_suffix(small: &Shape, big: &Shape) -> bool {
    let (s, b) = (small.dims(), big.dims());
    s.len() <= b.len() && b[b.len() - s.len()..] == *s
}

// ── Elementwise binary ops ──────────────────────────────────────────

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd_lhs:expr, $bwd_rhs:expr) => {
        pub fn $name(&self, rhs: &Tensor<T>) -> TensorResult<T> {
            let out_shape = broadcast_shapes($opname, self.shape(), rhs.shape())?;
            let f = $fwd;
            let data: Vec<T> = if self.dims() == rhs.dims() {
                self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect()
            } else if is_suffix(rhs.shape(), self.shape()) {
                let r = rhs.data();
                let mut v = Vec::with_capacity(out_shape.numel());
                for chunk in self.data().chunks_exact(r.len().max(1)) {
                    v.extend(chunk.iter().zip(r).map(|(&a, &b)| f(a, b)));
                }
                v
            } else {
                let a = expand_to(self.data(), self.shape(), &out_shape);
                let b = expand_to(rhs.data(), rhs.shape(), &out_shape);
                a.iter().zip(&b).map(|(&a, &b)| f(a, b)).collect()
            };
            let lhs_t = self.clone();
            let rhs_t = rhs.clone();
            let out_shape_b = out_shape.clone();
            Ok(Tensor::result(
                data,
                out_shape,
                vec![self.clone(), rhs.clone()],
                move |g: &[T]| {
                    if lhs_t.requires_grad_flag() {
                        let gl: Vec<T> = $bwd_lhs(g, &lhs_t, &rhs_t, &out_shape_b);
                        lhs_t.accumulate_grad_owned(reduce_to_shape(&gl, &out_shape_b, lhs_t.shape()));
                    }
                    if rhs_t.requires_grad_flag() {
                        let gr: Vec<T> = $bwd_rhs(g, &lhs_t, &rhs_t, &out_shape_b);
                        rhs_t.accumulate_grad_owned(reduce_to_shape(&gr, &out_shape_b, rhs_t.shape()));
                    }
                },
            ))
        }
    };
}

impl<T: Scalar> Tensor<T> {
    binary_op!(
        add,
        "add",
        |a, b| a + b,
        |g: &[T], _l: &Tensor<T>, _r: &Tensor<T>, _s: &Shape| g.to_vec(),
        |g: &[T], _l: &Tensor<T>, _r: &Tensor<T>, _s: &Shape| g.to_vec()
    );

    binary_op!(
        sub,
        "sub",
        |a, b| a - b,
        |g: &[T], _l: &Tensor<T>, _r: &Tensor<T>, _s: &Shape| g.to_vec(),
        |g: &[T], _l: &Tensor<T>, _r: &Tensor<T>, _s: &Shape| g.iter().map(|&x| -x).collect()
    );

    binary_op!(
        mul,
        "mul",
        |a, b| a * b,
        |g: &[T], _l: &Tensor<T>, r: &Tensor<T>, s: &Shape| {
            let b = expand_to(r.data(), r.shape(), s);
            g.iter().zip(&b).map(|(&g, &b)| g * b).collect()
        },
        |g: &[T], l: &Tensor<T>, _r: &Tensor<T>, s: &Shape| {
            let a = expand_to(l.data(), l.shape(), s);
            g.iter().zip(&a).map(|(&g, &a)| g * a).collect()
        }
    );

    /// Sum of same-shape terms as a single graph node.
    pub fn add_n(terms: &[&Tensor<T>]) -> TensorResult<T> {
        assert!(!terms.is_empty());
        let shape = terms[0].shape().clone();
        for t in terms {
            if t.dims() != shape.dims() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_n",
                    lhs: shape.to_string(),
                    rhs: t.shape().to_string(),
                });
            }
        }
        let mut data = terms[0].data().to_vec();
        for t in &terms[1..] {
            for (o, &x) in data.iter_mut().zip(t.data()) {
                *o += x;
            }
        }
        let parents: Vec<Tensor<T>> = terms.iter().map(|t| (*t).clone()).collect();
        let captured = parents.clone();
        Ok(Tensor::result(data, shape, parents, move |g: &[T]| {
            for t in &captured {
                t.accumulate_grad(g);
            }
        }))
    }

    pub fn add_scalar(&self, v: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x + v).collect();
        let parent = self.clone();
        Tensor::result(data, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad(g);
        })
    }

    pub fn mul_scalar(&self, v: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x * v).collect();
        let parent = self.clone();
        Tensor::result(data, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(g.iter().map(|&x| x * v).collect());
        })
    }

    // ── Elementwise unary ops ───────────────────────────────────────

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::ONE)
    }

    pub fn relu(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.maximum(T::ZERO)).collect();
        let parent = self.clone();
        let saved = self.data_arc();
        Tensor::result(data, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                    .collect(),
            );
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.tanh()).collect();
        let out = Arc::new(data);
        let parent = self.clone();
        let saved = Arc::clone(&out);
        Tensor::result_shared(out, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &t)| g * (T::ONE - t * t))
                    .collect(),
            );
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::ONE / (T::ONE + (-x).exp()))
            .collect();
        let out = Arc::new(data);
        let parent = self.clone();
        let saved = Arc::clone(&out);
        Tensor::result_shared(out, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &s)| g * s * (T::ONE - s))
                    .collect(),
            );
        })
    }

    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p())
            .collect();
        let parent = self.clone();
        let saved = self.data_arc();
        Tensor::result(data, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &x)| g * (T::ONE / (T::ONE + (-x).exp())))
                    .collect(),
            );
        })
    }

    pub fn square(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x * x).collect();
        let parent = self.clone();
        let saved = self.data_arc();
        let two = T::from_f64(2.0);
        Tensor::result(data, self.shape().clone(), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &x)| g * two * x)
                    .collect(),
            );
        })
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// Batched matrix product on the trailing two axes; leading axes
    /// broadcast right-aligned.
    pub fn matmul(&self, rhs: &Tensor<T>) -> TensorResult<T> {
        matmul_impl(self, rhs, false)
    }

    /// `self @ rhs^T` on the trailing two axes, without materializing the
    /// transpose.
    pub fn matmul_bt(&self, rhs: &Tensor<T>) -> TensorResult<T> {
        matmul_impl(self, rhs, true)
    }

    // ── Softmax / normalization / dropout ───────────────────────────

    /// Numerically stable softmax along `axis`. Errors on NaN input.
    pub fn softmax(&self, axis: usize) -> TensorResult<T> {
        let rank = self.ndim();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let dims = self.dims();
        let len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = x[base];
                for j in 1..len {
                    let v = x[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                if max.is_nan() {
                    return Err(TensorError::NanInput { op: "softmax" });
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::ONE / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let out = Arc::new(out);
        let parent = self.clone();
        let saved = Arc::clone(&out);
        Ok(Tensor::result_shared(
            out,
            self.shape().clone(),
            vec![self.clone()],
            move |g: &[T]| {
                let y = saved.as_slice();
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                parent.accumulate_grad_owned(dx);
            },
        ))
    }

    /// Layer normalization along `axis` with learnable gain and bias of
    /// shape `[dims[axis]]`. Epsilon 1e-5 sits inside the square root, so a
    /// zero-variance slice maps to plain bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> TensorResult<T> {
        let rank = self.ndim();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "layer_norm",
                axis,
                rank,
            });
        }
        let dims = self.dims();
        let len = dims[axis];
        if gain.dims() != [len] || bias.dims() != [len] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_string(),
                rhs: format!("gain {}, bias {}", gain.shape(), bias.shape()),
            });
        }
        let eps = T::from_f64(1e-5);
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let x = self.data();
        let gn = gain.data();
        let bs = bias.data();
        let inv_len = T::ONE / T::from_f64(len as f64);
        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = vec![T::ZERO; x.len()];
        let mut inv_stds = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = T::ZERO;
                for j in 0..len {
                    mean += x[base + j * inner];
                }
                mean *= inv_len;
                let mut var = T::ZERO;
                for j in 0..len {
                    let d = x[base + j * inner] - mean;
                    var += d * d;
                }
                var *= inv_len;
                let inv_std = T::ONE / (var + eps).sqrt();
                inv_stds[o * inner + i] = inv_std;
                for j in 0..len {
                    let idx = base + j * inner;
                    let h = (x[idx] - mean) * inv_std;
                    xhat[idx] = h;
                    out[idx] = h * gn[j] + bs[j];
                }
            }
        }
        let parent = self.clone();
        let gain_t = gain.clone();
        let bias_t = bias.clone();
        let xhat = Arc::new(xhat);
        let inv_stds = Arc::new(inv_stds);
        let gain_data = gain.data_arc();
        Ok(Tensor::result(
            out,
            self.shape().clone(),
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g: &[T]| {
                let xh = xhat.as_slice();
                let mut dgain = vec![T::ZERO; len];
                let mut dbias = vec![T::ZERO; len];
                let mut dx = vec![T::ZERO; g.len()];
                let mut dxhat = vec![T::ZERO; len];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let inv_std = inv_stds[o * inner + i];
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for j in 0..len {
                            let idx = base + j * inner;
                            let d = g[idx] * gain_data[j];
                            dxhat[j] = d;
                            sum_dxhat += d;
                            sum_dxhat_xhat += d * xh[idx];
                            dgain[j] += g[idx] * xh[idx];
                            dbias[j] += g[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = inv_std
                                * (dxhat[j] - inv_len * sum_dxhat - xh[idx] * inv_len * sum_dxhat_xhat);
                        }
                    }
                }
                parent.accumulate_grad_owned(dx);
                gain_t.accumulate_grad_owned(dgain);
                bias_t.accumulate_grad_owned(dbias);
            },
        ))
    }

    /// Inverted dropout: zero each element with probability `rate` during
    /// training and scale survivors by `1/(1-rate)`; identity at inference.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut RngStream) -> TensorResult<T> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropoutRate { rate });
        }
        if !training || rate == 0.0 {
            let parent = self.clone();
            return Ok(Tensor::result(
                self.data().to_vec(),
                self.shape().clone(),
                vec![self.clone()],
                move |g: &[T]| parent.accumulate_grad(g),
            ));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.bernoulli(rate) { T::ZERO } else { scale })
            .collect();
        let data: Vec<T> = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let mask = Arc::new(mask);
        let parent = self.clone();
        Ok(Tensor::result(
            data,
            self.shape().clone(),
            vec![self.clone()],
            move |g: &[T]| {
                parent.accumulate_grad_owned(
                    g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect(),
                );
            },
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        let parent = self.clone();
        Tensor::result(vec![s], Shape::new(&[]), vec![self.clone()], move |g: &[T]| {
            parent.accumulate_grad_owned(vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::ONE / T::from_f64(n as f64);
        let s: T = self.data().iter().copied().sum();
        let parent = self.clone();
        Tensor::result(
            vec![s * inv],
            Shape::new(&[]),
            vec![self.clone()],
            move |g: &[T]| {
                parent.accumulate_grad_owned(vec![g[0] * inv; n]);
            },
        )
    }

    pub fn sum_axis(&self, axis: usize) -> TensorResult<T> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> TensorResult<T> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> TensorResult<T> {
        let rank = self.ndim();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: if mean { "mean_axis" } else { "sum_axis" },
                axis,
                rank,
            });
        }
        let dims = self.dims();
        let len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let scale = if mean {
            T::ONE / T::from_f64(len as f64)
        } else {
            T::ONE
        };
        let x = self.data();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += x[base + i];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        let parent = self.clone();
        let total = self.numel();
        Ok(Tensor::result(
            out,
            Shape::from_vec(out_dims),
            vec![self.clone()],
            move |g: &[T]| {
                let mut dx = vec![T::ZERO; total];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            dx[base + i] = g[obase + i] * scale;
                        }
                    }
                }
                parent.accumulate_grad_owned(dx);
            },
        ))
    }

    /// Maximum along `axis`; gradient routes to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> TensorResult<T> {
        let rank = self.ndim();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "max_axis",
                axis,
                rank,
            });
        }
        let dims = self.dims();
        let len = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let x = self.data();
        let mut out = vec![T::ZERO; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = x[base];
                let mut best_j = 0usize;
                for j in 1..len {
                    let v = x[base + j * inner];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_j;
            }
        }
        let parent = self.clone();
        let total = self.numel();
        let argmax = Arc::new(argmax);
        Ok(Tensor::result(
            out,
            Shape::from_vec(out_dims),
            vec![self.clone()],
            move |g: &[T]| {
                let mut dx = vec![T::ZERO; total];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        dx[o * len * inner + j * inner + i] = g[o * inner + i];
                    }
                }
                parent.accumulate_grad_owned(dx);
            },
        ))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    /// Zero-copy reshape (same element order).
    pub fn reshape(&self, dims: &[usize]) -> TensorResult<T> {
        let shape = Shape::new(dims);
        if shape.numel() != self.numel() {
            return Err(TensorError::ReshapeNumel {
                from: self.shape().to_string(),
                to: shape.to_string(),
            });
        }
        let parent = self.clone();
        Ok(Tensor::result_shared(
            self.data_arc(),
            shape,
            vec![self.clone()],
            move |g: &[T]| parent.accumulate_grad(g),
        ))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> TensorResult<T> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Unsupported {
                op: "permute",
                msg: format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            });
        }
        let in_dims = self.dims();
        let in_strides = self.shape().strides();
        let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
        let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let out_shape = Shape::from_vec(out_dims);
        let data = permute_copy(self.data(), out_shape.dims(), &step);
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let parent = self.clone();
        let out_dims_saved = out_shape.dims().to_vec();
        Ok(Tensor::result(
            data,
            out_shape,
            vec![self.clone()],
            move |g: &[T]| {
                // Scatter grad back through the inverse permutation.
                let g_shape = Shape::from_vec(out_dims_saved.clone());
                let g_strides = g_shape.strides();
                let step_back: Vec<usize> = inverse.iter().map(|&a| g_strides[a]).collect();
                let back_dims: Vec<usize> = inverse.iter().map(|&a| out_dims_saved[a]).collect();
                parent.accumulate_grad_owned(permute_copy(g, &back_dims, &step_back));
            },
        ))
    }

    pub(crate) fn result_shared(
        data: Arc<Vec<T>>,
        shape: Shape,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Tensor<T> {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let op = if requires_grad {
            Some(super::OpRecord {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            node: std::rc::Rc::new(super::Node {
                data,
                shape,
                requires_grad,
                grad: std::cell::RefCell::new(None),
                op,
            }),
        }
    }
}

/// Gather `src` into a new row-major buffer of `out_dims`, where moving
/// along output axis `ax` advances the source offset by `step[ax]`.
fn permute_copy<T: Scalar>(src: &[T], out_dims: &[usize], step: &[usize]) -> Vec<T> {
    let numel: usize = out_dims.iter().product();
    let rank = out_dims.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            off += step[ax];
            if coords[ax] < out_dims[ax] {
                break;
            }
            off -= step[ax] * out_dims[ax];
            coords[ax] = 0;
        }
    }
    out
}

/// Concatenate tensors along `axis`; all other dims must match.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> TensorResult<T> {
    assert!(!parts.is_empty());
    let rank = parts[0].ndim();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut out_dims = parts[0].dims().to_vec();
    let mut axis_total = 0usize;
    for p in parts {
        let d = p.dims();
        if d.len() != rank
            || d[..axis] != out_dims[..axis]
            || d[axis + 1..] != out_dims[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_string(),
                rhs: p.shape().to_string(),
            });
        }
        axis_total += d[axis];
    }
    out_dims[axis] = axis_total;
    let outer: usize = out_dims[..axis].iter().product();
    let inner: usize = out_dims[axis + 1..].iter().product();
    let numel: usize = out_dims.iter().product();
    let mut data = vec![T::ZERO; numel];
    let mut offset = 0usize;
    let segs: Vec<usize> = parts.iter().map(|p| p.dims()[axis]).collect();
    for (p, &seg) in parts.iter().zip(&segs) {
        let src = p.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * seg * inner;
            data[dst_base..dst_base + seg * inner]
                .copy_from_slice(&src[src_base..src_base + seg * inner]);
        }
        offset += seg;
    }
    let parents: Vec<Tensor<T>> = parts.to_vec();
    let captured = parents.clone();
    Ok(Tensor::result(
        data,
        Shape::from_vec(out_dims),
        parents,
        move |g: &[T]| {
            let mut offset = 0usize;
            for (p, &seg) in captured.iter().zip(&segs) {
                if p.requires_grad_flag() {
                    let mut dp = vec![T::ZERO; p.numel()];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * seg * inner;
                        dp[dst_base..dst_base + seg * inner]
                            .copy_from_slice(&g[src_base..src_base + seg * inner]);
                    }
                    p.accumulate_grad_owned(dp);
                }
                offset += seg;
            }
        },
    ))
}

// ── Matmul implementation ───────────────────────────────────────────

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    lead: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn plan_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<MatmulPlan, TensorError> {
    let err = || TensorError::ShapeMismatch {
        op: if trans_b { "matmul_bt" } else { "matmul" },
        lhs: a.shape().to_string(),
        rhs: b.shape().to_string(),
    };
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(TensorError::RankTooLow {
            op: "matmul",
            min_rank: 2,
            shape: if a.ndim() < 2 { a.shape() } else { b.shape() }.to_string(),
        });
    }
    let ad = a.dims();
    let bd = b.dims();
    let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (bk, n) = if trans_b {
        (bd[bd.len() - 1], bd[bd.len() - 2])
    } else {
        (bd[bd.len() - 2], bd[bd.len() - 1])
    };
    if bk != k {
        return Err(err());
    }
    let lead_a = Shape::new(&ad[..ad.len() - 2]);
    let lead_b = Shape::new(&bd[..bd.len() - 2]);
    let lead = broadcast_shapes(if trans_b { "matmul_bt" } else { "matmul" }, &lead_a, &lead_b)?;
    let n_slices = lead.numel();
    let sa = broadcast_strides(&lead_a, &lead);
    let sb = broadcast_strides(&lead_b, &lead);
    let (amat, bmat) = (m * k, bd[bd.len() - 1] * bd[bd.len() - 2]);
    let mut a_offsets = Vec::with_capacity(n_slices);
    let mut b_offsets = Vec::with_capacity(n_slices);
    let dims = lead.dims();
    let mut coords = vec![0usize; dims.len()];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for _ in 0..n_slices {
        a_offsets.push(a_off * amat);
        b_offsets.push(b_off * bmat);
        for ax in (0..dims.len()).rev() {
            coords[ax] += 1;
            a_off += sa[ax];
            b_off += sb[ax];
            if coords[ax] < dims[ax] {
                break;
            }
            a_off -= sa[ax] * dims[ax];
            b_off -= sb[ax] * dims[ax];
            coords[ax] = 0;
        }
    }
    Ok(MatmulPlan {
        m,
        k,
        n,
        lead: lead.dims().to_vec(),
        a_offsets,
        b_offsets,
    })
}

fn matmul_impl<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> TensorResult<T> {
    let plan = plan_matmul(a, b, trans_b)?;
    let MatmulPlan {
        m,
        k,
        n,
        ref lead,
        ref a_offsets,
        ref b_offsets,
    } = plan;
    let n_slices = a_offsets.len();
    let mut out_dims = lead.clone();
    out_dims.push(m);
    out_dims.push(n);
    let out_shape = Shape::from_vec(out_dims);
    let mut out = vec![T::ZERO; out_shape.numel()];
    let ad = a.data();
    let bd = b.data();
    // Row-major strides of the effective (k, n) right operand.
    let (rsb, csb): (isize, isize) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };

    let slice_flops = 2 * m * k * n;
    if n_slices > 1 && slice_flops >= 1024 && slice_flops * n_slices >= GEMM_PAR_FLOPS {
        use rayon::prelude::*;
        let a_ptr = SendConstPtr(ad.as_ptr());
        let b_ptr = SendConstPtr(bd.as_ptr());
        out.par_chunks_mut(m * n).enumerate().for_each(|(s, c)| {
            let (a_ptr, b_ptr) = (a_ptr, b_ptr);
            gemm_strided(
                m,
                k,
                n,
                unsafe { a_ptr.0.add(a_offsets[s]) },
                k as isize,
                1,
                unsafe { b_ptr.0.add(b_offsets[s]) },
                rsb,
                csb,
                T::ZERO,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        });
    } else if m * n <= 4 && k <= 64 {
        // Tiny products: plain loops beat kernel dispatch.
        for s in 0..n_slices {
            let asl = &ad[a_offsets[s]..a_offsets[s] + m * k];
            let bbase = b_offsets[s];
            let obase = s * m * n;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::ZERO;
                    for p in 0..k {
                        let bidx = (bbase as isize + p as isize * rsb + j as isize * csb) as usize;
                        acc += asl[i * k + p] * bd[bidx];
                    }
                    out[obase + i * n + j] = acc;
                }
            }
        }
    } else {
        for s in 0..n_slices {
            gemm_strided(
                m,
                k,
                n,
                unsafe { ad.as_ptr().add(a_offsets[s]) },
                k as isize,
                1,
                unsafe { bd.as_ptr().add(b_offsets[s]) },
                rsb,
                csb,
                T::ZERO,
                unsafe { out.as_mut_ptr().add(s * m * n) },
                n as isize,
                1,
            );
        }
    }

    let a_t = a.clone();
    let b_t = b.clone();
    let a_data = a.data_arc();
    let b_data = b.data_arc();
    let a_offsets = Arc::new(plan.a_offsets);
    let b_offsets = Arc::new(plan.b_offsets);
    Ok(Tensor::result(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        move |g: &[T]| {
            let n_slices = a_offsets.len();
            if a_t.requires_grad_flag() {
                // dA[m,k] += G[m,n] @ Bv^T[n,k]
                let mut da = vec![T::ZERO; a_t.numel()];
                let (rs, cs): (isize, isize) = if trans_b {
                    (k as isize, 1) // Bv^T is the stored matrix itself
                } else {
                    (1, n as isize)
                };
                for s in 0..n_slices {
                    gemm_strided(
                        m,
                        n,
                        k,
                        unsafe { g.as_ptr().add(s * m * n) },
                        n as isize,
                        1,
                        unsafe { b_data.as_ptr().add(b_offsets[s]) },
                        rs,
                        cs,
                        T::ONE,
                        unsafe { da.as_mut_ptr().add(a_offsets[s]) },
                        k as isize,
                        1,
                    );
                }
                a_t.accumulate_grad_owned(da);
            }
            if b_t.requires_grad_flag() {
                let mut db = vec![T::ZERO; b_t.numel()];
                if trans_b {
                    // stored B is (n, k): dB[n,k] += G^T[n,m] @ A[m,k]
                    for s in 0..n_slices {
                        gemm_strided(
                            n,
                            m,
                            k,
                            unsafe { g.as_ptr().add(s * m * n) },
                            1,
                            n as isize,
                            unsafe { a_data.as_ptr().add(a_offsets[s]) },
                            k as isize,
                            1,
                            T::ONE,
                            unsafe { db.as_mut_ptr().add(b_offsets[s]) },
                            k as isize,
                            1,
                        );
                    }
                } else {
                    // dB[k,n] += A^T[k,m] @ G[m,n]
                    for s in 0..n_slices {
                        gemm_strided(
                            k,
                            m,
                            n,
                            unsafe { a_data.as_ptr().add(a_offsets[s]) },
                            1,
                            k as isize,
                            unsafe { g.as_ptr().add(s * m * n) },
                            n as isize,
                            1,
                            T::ONE,
                            unsafe { db.as_mut_ptr().add(b_offsets[s]) },
                            n as isize,
                            1,
                        );
                    }
                }
                b_t.accumulate_grad_owned(db);
            }
        },
    ))
}
