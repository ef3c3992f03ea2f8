//! Forward ops and their vector-Jacobian products, recorded on a [`Graph`].

use crate::error::TensorError;
use crate::graph::{Graph, ValueId};
use crate::param::ParamRef;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

// ── raw matmul kernels ──────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ  (B stored row-major as [n,k])
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: F = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let c_row = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

fn split_batch_dims(shape: &[usize]) -> (usize, &[usize]) {
    let (batch_dims, mat) = shape.split_at(shape.len() - 2);
    (batch_dims.iter().product::<usize>().max(1), mat)
}

// ── elementwise plumbing ────────────────────────────────────────────

impl<F: Scalar> Graph<F> {
    fn unary(
        &mut self,
        op: &'static str,
        x: ValueId,
        f: impl Fn(F) -> F,
        // df(x, y) -> local derivative at that element
        df: impl Fn(F, F) -> F + 'static,
    ) -> Result<ValueId> {
        let value = self.value(x).map(f);
        self.push_op(op, value, vec![x], true, move || {
            Box::new(move |out, parents, g, _| {
                let x = &parents[0];
                let data: Vec<F> = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).expect("unary grad shape"))]
            })
        })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        // d(a, b, g) -> (da, db) per element
        d: impl Fn(F, F, F) -> (F, F) + 'static,
    ) -> Result<ValueId> {
        let value = self.value(a).zip_map(self.value(b), op, f)?;
        self.push_op(op, value, vec![a, b], true, move || {
            Box::new(move |_, parents, g, needs| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let mut da = needs[0].then(|| vec![F::ZERO; pa.numel()]);
                let mut db = needs[1].then(|| vec![F::ZERO; pb.numel()]);
                for i in 0..g.numel() {
                    let (ga, gb) = d(pa.data()[i], pb.data()[i], g.data()[i]);
                    if let Some(da) = da.as_mut() {
                        da[i] = ga;
                    }
                    if let Some(db) = db.as_mut() {
                        db[i] = gb;
                    }
                }
                vec![
                    da.map(|v| Tensor::new(pa.shape().to_vec(), v).expect("binary grad")),
                    db.map(|v| Tensor::new(pb.shape().to_vec(), v).expect("binary grad")),
                ]
            })
        })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("div", a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(
            "min",
            a,
            b,
            |x, y| x.minimum(y),
            |x, y, g| if x <= y { (g, F::ZERO) } else { (F::ZERO, g) },
        )
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(
            "max",
            a,
            b,
            |x, y| x.maximum(y),
            |x, y, g| if x >= y { (g, F::ZERO) } else { (F::ZERO, g) },
        )
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId> {
        self.scale(x, -F::ONE)
    }

    pub fn scale(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        self.unary("scale", x, |v| v * c, move |_, _| c)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(
            "relu",
            x,
            |v| v.maximum(F::ZERO),
            |xv, _| if xv > F::ZERO { F::ONE } else { F::ZERO },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        self.unary(
            "gelu",
            x,
            move |v| {
                let u = c * (v + k * v * v * v);
                half * v * (F::ONE + u.tanh())
            },
            move |v, _| {
                let u = c * (v + k * v * v * v);
                let t = u.tanh();
                let sech2 = F::ONE - t * t;
                half * (F::ONE + t) + half * v * sech2 * c * (F::ONE + three * k * v * v)
            },
        )
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(
            "sigmoid",
            x,
            |v| F::ONE / (F::ONE + (-v).exp()),
            |_, y| y * (F::ONE - y),
        )
    }

    pub fn ln(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("ln", x, |v| v.ln(), |v, _| F::ONE / v)
    }

    pub fn abs(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(
            "abs",
            x,
            |v| v.abs(),
            |v, _| {
                if v > F::ZERO {
                    F::ONE
                } else if v < F::ZERO {
                    -F::ONE
                } else {
                    F::ZERO
                }
            },
        )
    }

    /// Clamp to [lo, hi]; the gradient passes through inside the interval.
    pub fn clamp(&mut self, x: ValueId, lo: F, hi: F) -> Result<ValueId> {
        self.unary(
            "clamp",
            x,
            move |v| v.maximum(lo).minimum(hi),
            move |v, _| if v >= lo && v <= hi { F::ONE } else { F::ZERO },
        )
    }

    /// x[.., C] + b[C], broadcast over leading dims.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let c = *xs.last().expect("non-empty shape");
        if bs != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let xv = self.value(x).clone();
        let bv = self.value(b).clone();
        let data: Vec<F> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xs, data)?;
        self.push_op("add_bias", value, vec![x, b], true, move || {
            Box::new(move |_, parents, g, needs| {
                let dx = needs[0].then(|| g.clone());
                let db = needs[1].then(|| {
                    let c = parents[1].numel();
                    let mut acc = vec![F::ZERO; c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[i % c] += gv;
                    }
                    Tensor::new(vec![c], acc).expect("bias grad")
                });
                vec![dx, db]
            })
        })
    }
}

// ── linear algebra ──────────────────────────────────────────────────

impl<F: Scalar> Graph<F> {
    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    ///
    /// Batch dims must match exactly, or either operand may be rank-2 and is
    /// then broadcast across the other's batch.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let value = matmul_forward(&av, &bv)?;
        self.push_op("matmul", value, vec![a, b], true, move || {
            Box::new(move |_, parents, g, needs| {
                let (a, b) = (&parents[0], &parents[1]);
                let da = needs[0].then(|| matmul_grad_lhs(a, b, g));
                let db = needs[1].then(|| matmul_grad_rhs(a, b, g));
                vec![da, db]
            })
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: ValueId) -> Result<ValueId> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::usage("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Arbitrary axis permutation.
    pub fn permute(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if axes.len() != shape.len() || {
            let mut seen = vec![false; shape.len()];
            axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        } {
            return Err(TensorError::usage(format!(
                "invalid permutation {:?} for shape {:?}",
                axes, shape
            )));
        }
        let value = permute_tensor(self.value(x), axes);
        let axes_owned = axes.to_vec();
        self.push_op("permute", value, vec![x], false, move || {
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &a) in axes_owned.iter().enumerate() {
                inverse[a] = i;
            }
            Box::new(move |_, _, g, _| vec![Some(permute_tensor(g, &inverse))])
        })
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let value = self.value(x).reshaped(shape)?;
        let orig = self.shape(x).to_vec();
        self.push_op("reshape", value, vec![x], false, move || {
            let orig = orig.clone();
            Box::new(move |_, _, g, _| vec![Some(g.reshaped(orig.clone()).expect("reshape grad"))])
        })
    }
}

fn matmul_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        });
    }
    let (abatch, am) = split_batch_dims(ashape);
    let (bbatch, bm) = split_batch_dims(bshape);
    let (m, k) = (am[0], am[1]);
    let (k2, n) = (bm[0], bm[1]);
    let batches_compatible = ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2]
        || ashape.len() == 2
        || bshape.len() == 2;
    if k != k2 || !batches_compatible {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        });
    }
    let batch = abatch.max(bbatch);
    let mut out = vec![F::ZERO; batch * m * n];
    for i in 0..batch {
        let a_off = if abatch == 1 { 0 } else { i * m * k };
        let b_off = if bbatch == 1 { 0 } else { i * k * n };
        mm_nn(
            &a.data()[a_off..a_off + m * k],
            &b.data()[b_off..b_off + k * n],
            m,
            k,
            n,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = if ashape.len() >= bshape.len() {
        ashape[..ashape.len() - 2].to_vec()
    } else {
        bshape[..bshape.len() - 2].to_vec()
    };
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

/// dA = dC · Bᵀ, summing over broadcast batches when A is rank-2.
fn matmul_grad_lhs<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let (abatch, am) = split_batch_dims(a.shape());
    let (bbatch, bm) = split_batch_dims(b.shape());
    let (gbatch, _) = split_batch_dims(g.shape());
    let (m, k, n) = (am[0], am[1], bm[1]);
    let mut out = vec![F::ZERO; a.numel()];
    for i in 0..gbatch {
        let a_off = if abatch == 1 { 0 } else { i * m * k };
        let b_off = if bbatch == 1 { 0 } else { i * k * n };
        mm_nt(
            &g.data()[i * m * n..(i + 1) * m * n],
            &b.data()[b_off..b_off + k * n],
            m,
            n,
            k,
            &mut out[a_off..a_off + m * k],
        );
    }
    Tensor::new(a.shape().to_vec(), out).expect("matmul lhs grad")
}

/// dB = Aᵀ · dC, summing over broadcast batches when B is rank-2.
fn matmul_grad_rhs<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let (abatch, am) = split_batch_dims(a.shape());
    let (bbatch, bm) = split_batch_dims(b.shape());
    let (gbatch, _) = split_batch_dims(g.shape());
    let (m, k, n) = (am[0], am[1], bm[1]);
    let mut out = vec![F::ZERO; b.numel()];
    for i in 0..gbatch {
        let a_off = if abatch == 1 { 0 } else { i * m * k };
        let b_off = if bbatch == 1 { 0 } else { i * k * n };
        mm_tn(
            &a.data()[a_off..a_off + m * k],
            &g.data()[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
            &mut out[b_off..b_off + k * n],
        );
    }
    Tensor::new(b.shape().to_vec(), out).expect("matmul rhs grad")
}

// `mm_nt` computes A[m,k] · B[n,k]ᵀ; for dA we need dC[m,n] · B[k,n]ᵀ-of-[k,n],
// which is the same kernel with (m, n, k) role-swapped; see call site above.

fn permute_tensor<F: Scalar>(t: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_in_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut out = vec![F::ZERO; n];
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..rank {
            src += idx[d] * out_in_strides[d];
        }
        *slot = data[src];
        // odometer increment over out_shape
        if o + 1 < n {
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

// ── concat / slice / gather ─────────────────────────────────────────

impl<F: Scalar> Graph<F> {
    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(TensorError::usage("concat of zero tensors"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: first });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![F::ZERO; out_shape.iter().product()];
        let mut offset = 0usize;
        let sizes: Vec<usize> = inputs.iter().map(|&id| self.shape(id)[axis]).collect();
        for (&id, &sz) in inputs.iter().zip(&sizes) {
            let data = self.value(id).data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let src = o * sz * inner;
                out[dst..dst + sz * inner].copy_from_slice(&data[src..src + sz * inner]);
            }
            offset += sz;
        }
        let value = Tensor::new(out_shape, out)?;
        let parents = inputs.to_vec();
        self.push_op("concat", value, parents, false, move || {
            let sizes = sizes.clone();
            Box::new(move |_, parents, g, needs| {
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0usize;
                for (pi, &sz) in sizes.iter().enumerate() {
                    if needs[pi] {
                        grads.push(Some(slice_tensor(g, axis, offset, sz)));
                    } else {
                        grads.push(None);
                    }
                    offset += sz;
                }
                grads
            })
        })
    }

    pub fn slice(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::usage(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                shape
            )));
        }
        let value = slice_tensor(self.value(x), axis, start, len);
        self.push_op("slice", value, vec![x], false, move || {
            let full = shape.clone();
            Box::new(move |_, _, g, _| {
                let mut out = Tensor::zeros(&full);
                paste_slice(&mut out, g, axis, start);
                vec![Some(out)]
            })
        })
    }

    /// Split along `axis` into chunks of the given sizes (must sum to the axis length).
    pub fn split(&mut self, x: ValueId, axis: usize, sizes: &[usize]) -> Result<Vec<ValueId>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::usage(format!(
                "split sizes {:?} do not sum to axis length {}",
                sizes, shape[axis]
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &sz in sizes {
            out.push(self.slice(x, axis, start, sz)?);
            start += sz;
        }
        Ok(out)
    }

    /// Pick elements by flat index: out[i] = x.data[indices[i]].
    pub fn gather(&mut self, x: ValueId, indices: Vec<usize>) -> Result<ValueId> {
        let xv = self.value(x);
        let n = xv.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::usage(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let data: Vec<F> = indices.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let shape = xv.shape().to_vec();
        self.push_op("gather", value, vec![x], false, move || {
            let indices = indices.clone();
            let shape = shape.clone();
            Box::new(move |_, _, g, _| {
                let mut acc = Tensor::zeros(&shape);
                let slots = acc.data_mut();
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    slots[i] += gv;
                }
                vec![Some(acc)]
            })
        })
    }
}

fn slice_tensor<F: Scalar>(t: &Tensor<F>, axis: usize, start: usize, len: usize) -> Tensor<F> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![F::ZERO; outer * len * inner];
    for o in 0..outer {
        let src = (o * axis_len + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&t.data()[src..src + len * inner]);
    }
    Tensor::new(out_shape, out).expect("slice shape")
}

fn paste_slice<F: Scalar>(dst: &mut Tensor<F>, src: &Tensor<F>, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let len = src.shape()[axis];
    let dst_data = dst.data_mut();
    for o in 0..outer {
        let d = (o * axis_len + start) * inner;
        let s = o * len * inner;
        dst_data[d..d + len * inner].copy_from_slice(&src.data()[s..s + len * inner]);
    }
}

// ── reductions ──────────────────────────────────────────────────────

impl<F: Scalar> Graph<F> {
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let total: F = self.value(x).data().iter().copied().sum();
        let shape = self.shape(x).to_vec();
        self.push_op("sum", Tensor::scalar(total), vec![x], true, move || {
            let shape = shape.clone();
            Box::new(move |_, _, g, _| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, F::ONE / F::from_f64(n as f64))
    }
}

// ── softmax / normalization ─────────────────────────────────────────

/// Which statistics normalize a batch_norm input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStats {
    /// Normalize with this input's own statistics; optionally fold them into
    /// the running estimates (training does, per-sample inference does not).
    Batch { update_running: bool },
    /// Normalize with the stored running estimates.
    Running,
}

impl<F: Scalar> Graph<F> {
    /// Numerically-stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("non-empty shape");
        let rows = xv.numel() / last;
        let mut out = vec![F::ZERO; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * last..(r + 1) * last];
            let max = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
            let mut sum = F::ZERO;
            for (o, &v) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[r * last..(r + 1) * last] {
                *o = *o / sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_op("softmax", value, vec![x], true, move || {
            Box::new(move |out, _, g, _| {
                let last = *out.shape().last().expect("non-empty");
                let rows = out.numel() / last;
                let mut dx = vec![F::ZERO; out.numel()];
                for r in 0..rows {
                    let y = &out.data()[r * last..(r + 1) * last];
                    let gr = &g.data()[r * last..(r + 1) * last];
                    let dot: F = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in dx[r * last..(r + 1) * last].iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), dx).expect("softmax grad"))]
            })
        })
    }

    /// Per-row (last axis) normalization with affine: zero-variance rows map
    /// to the affine offset.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: &ParamRef<F>,
        beta: &ParamRef<F>,
        eps: f64,
    ) -> Result<ValueId> {
        let c = *self.shape(x).last().expect("non-empty");
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: gamma.shape(),
            });
        }
        let g_id = self.param(gamma);
        let b_id = self.param(beta);
        let xv = self.value(x).clone();
        let eps = F::from_f64(eps);
        let rows = xv.numel() / c;
        let gv = self.value(g_id).clone();
        let bv = self.value(b_id).clone();
        let mut out = vec![F::ZERO; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let (mu, sigma) = row_stats(row, eps);
            for (i, (o, &v)) in out[r * c..(r + 1) * c].iter_mut().zip(row).enumerate() {
                let xhat = (v - mu) / sigma;
                *o = xhat * gv.data()[i] + bv.data()[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_op("layer_norm", value, vec![x, g_id, b_id], true, move || {
            Box::new(move |_, parents, g, needs| {
                let (x, gamma) = (&parents[0], &parents[1]);
                let c = *x.shape().last().expect("non-empty");
                let rows = x.numel() / c;
                let cn = F::from_f64(c as f64);
                let mut dx = needs[0].then(|| vec![F::ZERO; x.numel()]);
                let mut dgamma = vec![F::ZERO; c];
                let mut dbeta = vec![F::ZERO; c];
                for r in 0..rows {
                    let row = &x.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let (mu, sigma) = row_stats(row, eps);
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mu) / sigma).collect();
                    let mut mean_dxhat = F::ZERO;
                    let mut mean_dxhat_xhat = F::ZERO;
                    for i in 0..c {
                        let dxh = grow[i] * gamma.data()[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i];
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                    mean_dxhat = mean_dxhat / cn;
                    mean_dxhat_xhat = mean_dxhat_xhat / cn;
                    if let Some(dx) = dx.as_mut() {
                        for i in 0..c {
                            let dxh = grow[i] * gamma.data()[i];
                            dx[r * c + i] = (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat) / sigma;
                        }
                    }
                }
                vec![
                    dx.map(|v| Tensor::new(x.shape().to_vec(), v).expect("ln grad")),
                    needs[1].then(|| Tensor::new(vec![c], dgamma).expect("ln dgamma")),
                    needs[2].then(|| Tensor::new(vec![c], dbeta).expect("ln dbeta")),
                ]
            })
        })
    }

    /// Batch normalization over every axis except `channel_axis`.
    ///
    /// `BnStats::Batch` normalizes with the statistics of this input (and
    /// optionally folds them into the running estimates with momentum);
    /// `BnStats::Running` normalizes with the stored running statistics.
    /// Training is `Batch { update_running: true }`, classic inference is
    /// `Running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        channel_axis: usize,
        gamma: &ParamRef<F>,
        beta: &ParamRef<F>,
        running_mean: &ParamRef<F>,
        running_var: &ParamRef<F>,
        momentum: f64,
        eps: f64,
        stats: BnStats,
    ) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        if channel_axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis: channel_axis,
                shape,
            });
        }
        let c = shape[channel_axis];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let outer: usize = shape[..channel_axis].iter().product();
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let reduce_n = outer * inner;
        let eps_f = F::from_f64(eps);

        let xv = self.value(x).clone();
        let batch_stats = matches!(stats, BnStats::Batch { .. });
        let (mean, var) = if batch_stats {
            let mut mean = vec![F::ZERO; c];
            let mut var = vec![F::ZERO; c];
            for ch in 0..c {
                let mut m = F::ZERO;
                for_each_channel(&shape, channel_axis, ch, |i| m += xv.data()[i]);
                m = m / F::from_f64(reduce_n as f64);
                let mut v = F::ZERO;
                for_each_channel(&shape, channel_axis, ch, |i| {
                    let d = xv.data()[i] - m;
                    v += d * d;
                });
                mean[ch] = m;
                var[ch] = v / F::from_f64(reduce_n as f64);
            }
            if matches!(stats, BnStats::Batch { update_running: true }) {
                // momentum update of the running estimates
                let m_f = F::from_f64(momentum);
                let mut rm = running_mean.borrow_mut();
                let rm_data = rm.value.data_mut();
                for ch in 0..c {
                    rm_data[ch] = rm_data[ch] * (F::ONE - m_f) + mean[ch] * m_f;
                }
                let mut rv = running_var.borrow_mut();
                let rv_data = rv.value.data_mut();
                for ch in 0..c {
                    rv_data[ch] = rv_data[ch] * (F::ONE - m_f) + var[ch] * m_f;
                }
            }
            (mean, var)
        } else {
            (
                running_mean.value().data().to_vec(),
                running_var.value().data().to_vec(),
            )
        };

        let g_id = self.param(gamma);
        let b_id = self.param(beta);
        let gv = self.value(g_id).clone();
        let bv = self.value(b_id).clone();
        let mut out = vec![F::ZERO; xv.numel()];
        for ch in 0..c {
            let sigma = (var[ch] + eps_f).sqrt();
            for_each_channel(&shape, channel_axis, ch, |i| {
                out[i] = (xv.data()[i] - mean[ch]) / sigma * gv.data()[ch] + bv.data()[ch];
            });
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let shape_c = self.shape(x).to_vec();
        self.push_op("batch_norm", value, vec![x, g_id, b_id], true, move || {
            let shape = shape_c.clone();
            let mean = mean.clone();
            let var = var.clone();
            Box::new(move |_, parents, g, needs| {
                let (x, gamma) = (&parents[0], &parents[1]);
                let c = shape[channel_axis];
                let rn = F::from_f64((x.numel() / c) as f64);
                let mut dx = needs[0].then(|| vec![F::ZERO; x.numel()]);
                let mut dgamma = vec![F::ZERO; c];
                let mut dbeta = vec![F::ZERO; c];
                for ch in 0..c {
                    let sigma = (var[ch] + eps_f).sqrt();
                    let mut sum_g = F::ZERO;
                    let mut sum_g_xhat = F::ZERO;
                    for_each_channel(&shape, channel_axis, ch, |i| {
                        let xhat = (x.data()[i] - mean[ch]) / sigma;
                        sum_g += g.data()[i];
                        sum_g_xhat += g.data()[i] * xhat;
                    });
                    dgamma[ch] = sum_g_xhat;
                    dbeta[ch] = sum_g;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gamma.data()[ch] / sigma;
                        if batch_stats {
                            // statistics depend on x: full normalization VJP
                            for_each_channel(&shape, channel_axis, ch, |i| {
                                let xhat = (x.data()[i] - mean[ch]) / sigma;
                                dx[i] = scale * (g.data()[i] - sum_g / rn - xhat * sum_g_xhat / rn);
                            });
                        } else {
                            for_each_channel(&shape, channel_axis, ch, |i| {
                                dx[i] = scale * g.data()[i];
                            });
                        }
                    }
                }
                vec![
                    dx.map(|v| Tensor::new(x.shape().to_vec(), v).expect("bn dx")),
                    needs[1].then(|| Tensor::new(vec![c], dgamma).expect("bn dgamma")),
                    needs[2].then(|| Tensor::new(vec![c], dbeta).expect("bn dbeta")),
                ]
            })
        })
    }

    /// Pointwise (1x1) convolution over a channel-first map:
    /// `x[C_in, H, W] * w[C_out, C_in] + b[C_out] -> [C_out, H, W]`.
    pub fn conv1x1(&mut self, x: ValueId, w: &ParamRef<F>, b: &ParamRef<F>) -> Result<ValueId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::usage(format!("conv1x1 expects [C,H,W], got {:?}", xs)));
        }
        let (c_in, h, wid) = (xs[0], xs[1], xs[2]);
        let ws = w.shape();
        if ws.len() != 2 || ws[1] != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1x1",
                lhs: xs,
                rhs: ws,
            });
        }
        let c_out = ws[0];
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1x1",
                lhs: vec![c_out],
                rhs: b.shape(),
            });
        }
        let w_id = self.param(w);
        let b_id = self.param(b);
        let xv = self.value(x).clone();
        let wv = self.value(w_id).clone();
        let bv = self.value(b_id).clone();
        let p = h * wid;
        let mut out = vec![F::ZERO; c_out * p];
        for co in 0..c_out {
            let row = &mut out[co * p..(co + 1) * p];
            row.fill(bv.data()[co]);
            for ci in 0..c_in {
                let wvv = wv.data()[co * c_in + ci];
                if wvv == F::ZERO {
                    continue;
                }
                let x_row = &xv.data()[ci * p..(ci + 1) * p];
                for (o, &v) in row.iter_mut().zip(x_row) {
                    *o += wvv * v;
                }
            }
        }
        let value = Tensor::new(vec![c_out, h, wid], out)?;
        self.push_op("conv1x1", value, vec![x, w_id, b_id], true, move || {
            Box::new(move |_, parents, g, needs| {
                let (x, w) = (&parents[0], &parents[1]);
                let (c_in, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let c_out = w.shape()[0];
                let p = h * wid;
                let dx = needs[0].then(|| {
                    let mut dx = vec![F::ZERO; c_in * p];
                    for co in 0..c_out {
                        let g_row = &g.data()[co * p..(co + 1) * p];
                        for ci in 0..c_in {
                            let wv = w.data()[co * c_in + ci];
                            if wv == F::ZERO {
                                continue;
                            }
                            let d_row = &mut dx[ci * p..(ci + 1) * p];
                            for (d, &gv) in d_row.iter_mut().zip(g_row) {
                                *d += wv * gv;
                            }
                        }
                    }
                    Tensor::new(vec![c_in, h, wid], dx).expect("conv dx")
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![F::ZERO; c_out * c_in];
                    for co in 0..c_out {
                        let g_row = &g.data()[co * p..(co + 1) * p];
                        for ci in 0..c_in {
                            let x_row = &x.data()[ci * p..(ci + 1) * p];
                            dw[co * c_in + ci] =
                                g_row.iter().zip(x_row).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    Tensor::new(vec![c_out, c_in], dw).expect("conv dw")
                });
                let db = needs[2].then(|| {
                    let db: Vec<F> = (0..c_out)
                        .map(|co| g.data()[co * p..(co + 1) * p].iter().copied().sum())
                        .collect();
                    Tensor::new(vec![c_out], db).expect("conv db")
                });
                vec![dx, dw, db]
            })
        })
    }
}

fn row_stats<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mu: F = row.iter().copied().sum::<F>() / n;
    let var: F = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
    (mu, (var + eps).sqrt())
}

fn for_each_channel(shape: &[usize], channel_axis: usize, ch: usize, mut f: impl FnMut(usize)) {
    let outer: usize = shape[..channel_axis].iter().product();
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let c = shape[channel_axis];
    for o in 0..outer {
        let base = (o * c + ch) * inner;
        for i in 0..inner {
            f(base + i);
        }
    }
}
