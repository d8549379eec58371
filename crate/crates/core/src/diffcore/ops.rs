//! Forward and backward kernels.
//!
//! Kernel table (shapes are row-major, `B` = batch rows):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `MatMul` | `[m,k]`, `[k,n]` | `[m,n]` |
//! | `BatchMatMul{trans_b}` | `[g,m,k]`, `[g,k,n]` (or `[g,n,k]` when `trans_b`) | `[g,m,n]` |
//! | `Add`/`Sub`/`Mul`/`Div` | broadcast-compatible (trailing alignment) | broadcast shape |
//! | `Minimum`/`Maximum` | equal shapes | same |
//! | unary (`Exp`, `Ln`, `Tanh`, `Sigmoid`, `Softplus`, `Square`, `Abs`, `Neg`, `Sqrt`, `Scale`, `Shift`, `Clamp`) | any | same |
//! | `Softmax{axis}` | any, `axis < rank` | same |
//! | `Sum`/`Mean{axis: Some(a)}` | any | axis kept with extent 1 |
//! | `Sum`/`Mean{axis: None}` | any | scalar `[]` |
//! | `Concat{axis}` | equal except along `axis` | summed extent |
//! | `Slice{axis,start,end}` | any | extent `end - start` |
//! | `Transpose` | `[m,n]` | `[n,m]` |
//! | `Reshape(s)` | any with equal element count | `s` |
//! | `GatherRows(idx)` | `[r, ...]` | `[idx.len(), ...]` |
//! | `GruCell` | `x [B,I]`, `h [B,H]`, `W [I,3H]`, `U [H,3H]`, `b [3H]` | `[B,H]` |
//!
//! `Ln` clamps its argument at 1e-300 and `Softmax` subtracts the maximum along the reduced axis.

use super::tensor::{numel, Tensor};
use super::DiffError;
use crate::scalar::Scalar;

/// Operation recorded on a [`Graph`](super::Graph).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T> {
    MatMul,
    /// Independent matrix products over the leading axis; `trans_b` uses `b[i]^T`.
    BatchMatMul { trans_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Abs,
    Neg,
    Sqrt,
    /// Multiply by a constant.
    Scale(T),
    /// Add a constant.
    Shift(T),
    Clamp { lo: T, hi: T },
    Softmax { axis: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    Reshape(Vec<usize>),
    GatherRows(Vec<usize>),
    GruCell,
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul { .. } => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Minimum => "minimum",
            OpKind::Maximum => "maximum",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Neg => "neg",
            OpKind::Sqrt => "sqrt",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::GruCell => "gru_cell",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::BatchMatMul { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Minimum
            | OpKind::Maximum => Some(2),
            OpKind::GruCell => Some(5),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Auxiliary values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved<T> {
    None,
    /// Input-index maps for broadcast binary ops (`None` when shapes match).
    Broadcast(Option<(Vec<usize>, Vec<usize>)>),
    /// Gate activations `z`, `r`, `n` and the hidden candidate projection `h U_n`.
    Gru { z: Vec<T>, r: Vec<T>, n: Vec<T>, ghn: Vec<T> },
}

fn shape_err<T>(kind: &OpKind<T>, detail: String) -> DiffError {
    DiffError::Shape { op: kind.name(), detail }
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a^T b` with `a [k,m]`, `b [k,n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a b^T` with `a [m,k]`, `b [n,k]`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn unary_forward<T: Scalar>(kind: &OpKind<T>, x: T) -> T {
    match *kind {
        OpKind::Exp => x.exp(),
        OpKind::Ln => x.max(T::ln_floor()).ln(),
        OpKind::Tanh => x.tanh(),
        OpKind::Sigmoid => sigmoid(x),
        OpKind::Softplus => softplus(x),
        OpKind::Square => x * x,
        OpKind::Abs => x.abs(),
        OpKind::Neg => -x,
        OpKind::Sqrt => x.sqrt(),
        OpKind::Scale(c) => x * c,
        OpKind::Shift(c) => x + c,
        OpKind::Clamp { lo, hi } => x.max(lo).min(hi),
        _ => unreachable!("not a unary op"),
    }
}

/// Local derivative of a unary op given input `x` and output `y`.
fn unary_derivative<T: Scalar>(kind: &OpKind<T>, x: T, y: T) -> T {
    let one = T::one();
    match *kind {
        OpKind::Exp => y,
        OpKind::Ln => {
            if x >= T::ln_floor() {
                one / x
            } else {
                T::zero()
            }
        }
        OpKind::Tanh => one - y * y,
        OpKind::Sigmoid => y * (one - y),
        OpKind::Softplus => sigmoid(x),
        OpKind::Square => (one + one) * x,
        OpKind::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
        OpKind::Neg => -one,
        OpKind::Sqrt => T::lit(0.5) / y,
        OpKind::Scale(c) => c,
        OpKind::Shift(_) => one,
        OpKind::Clamp { lo, hi } => {
            if x >= lo && x <= hi {
                one
            } else {
                T::zero()
            }
        }
        _ => unreachable!("not a unary op"),
    }
}

fn is_unary<T>(kind: &OpKind<T>) -> bool {
    matches!(
        kind,
        OpKind::Exp
            | OpKind::Ln
            | OpKind::Tanh
            | OpKind::Sigmoid
            | OpKind::Softplus
            | OpKind::Square
            | OpKind::Abs
            | OpKind::Neg
            | OpKind::Sqrt
            | OpKind::Scale(_)
            | OpKind::Shift(_)
            | OpKind::Clamp { .. }
    )
}

fn check_axis<T>(kind: &OpKind<T>, shape: &[usize], axis: usize) -> Result<(), DiffError> {
    if axis >= shape.len() {
        return Err(shape_err(kind, format!("axis {} out of range for shape {:?}", axis, shape)));
    }
    Ok(())
}

/// Runs the forward kernel of `kind`.
pub(crate) fn forward<T: Scalar>(kind: &OpKind<T>, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>), DiffError> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(shape_err(kind, format!("expected {} inputs, got {}", n, inputs.len())));
        }
    } else if inputs.is_empty() {
        return Err(shape_err(kind, "needs at least one input".into()));
    }
    if is_unary(kind) {
        let x = inputs[0];
        let data = x.data().iter().map(|&v| unary_forward(kind, v)).collect();
        return Ok((Tensor::from_parts(x.shape().to_vec(), data), Saved::None));
    }
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(kind, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Ok((Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)), Saved::None))
        }
        OpKind::BatchMatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0];
            let (g, m, k) = if ok { (a.shape()[0], a.shape()[1], a.shape()[2]) } else { (0, 0, 0) };
            let (kb, n) = if !ok {
                (0, 0)
            } else if *trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if !ok || kb != k {
                return Err(shape_err(kind, format!("{:?} x {:?} (trans_b {})", a.shape(), b.shape(), trans_b)));
            }
            let mut out = Vec::with_capacity(g * m * n);
            for i in 0..g {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                out.extend(if *trans_b { matmul_nt(ai, bi, m, k, n) } else { matmul_raw(ai, bi, m, k, n) });
            }
            Ok((Tensor::from_parts(vec![g, m, n], out), Saved::None))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let f = |x: T, y: T| match kind {
                OpKind::Add => x + y,
                OpKind::Sub => x - y,
                OpKind::Mul => x * y,
                _ => x / y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                return Ok((Tensor::from_parts(a.shape().to_vec(), data), Saved::Broadcast(None)));
            }
            let out = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| shape_err(kind, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
            let ma = broadcast_map(&out, a.shape());
            let mb = broadcast_map(&out, b.shape());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
            Ok((Tensor::from_parts(out, data), Saved::Broadcast(Some((ma, mb)))))
        }
        OpKind::Minimum | OpKind::Maximum => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(kind, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let take_min = matches!(kind, OpKind::Minimum);
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if take_min { x.min(y) } else { x.max(y) })
                .collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), Saved::None))
        }
        OpKind::Softmax { axis } => {
            let x = inputs[0];
            check_axis(kind, x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let src = x.data();
            let mut out = vec![T::zero(); src.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let mut mx = T::neg_infinity();
                    for i in 0..len {
                        mx = mx.max(src[at(i)]);
                    }
                    let mut total = T::zero();
                    for i in 0..len {
                        let e = (src[at(i)] - mx).exp();
                        out[at(i)] = e;
                        total = total + e;
                    }
                    for i in 0..len {
                        out[at(i)] = out[at(i)] / total;
                    }
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::None))
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let mut total = x.data().iter().copied().sum::<T>();
                    if mean {
                        total = total / T::from_usize(x.numel().max(1)).unwrap();
                    }
                    Ok((Tensor::scalar(total), Saved::None))
                }
                Some(axis) => {
                    check_axis(kind, x.shape(), *axis)?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                out[o * inner + j] = out[o * inner + j] + x.data()[(o * len + i) * inner + j];
                            }
                        }
                    }
                    if mean {
                        let d = T::from_usize(len.max(1)).unwrap();
                        out.iter_mut().for_each(|v| *v = *v / d);
                    }
                    let mut shape = x.shape().to_vec();
                    shape[*axis] = 1;
                    Ok((Tensor::from_parts(shape, out), Saved::None))
                }
            }
        }
        OpKind::Concat { axis } => {
            let first = inputs[0];
            check_axis(kind, first.shape(), *axis)?;
            let mut total = 0;
            for t in inputs {
                let same_rest = t.rank() == first.rank()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !same_rest {
                    return Err(shape_err(kind, format!("{:?} vs {:?} along axis {}", first.shape(), t.shape(), axis)));
                }
                total += t.shape()[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            check_axis(kind, x.shape(), *axis)?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(shape_err(kind, format!("range {}..{} invalid for {:?}", start, end, x.shape())));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = end - start;
            let mut out = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = width;
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::Transpose => {
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(shape_err(kind, format!("needs a matrix, got {:?}", x.shape())));
            }
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Ok((Tensor::from_parts(vec![n, m], out), Saved::None))
        }
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            if numel(shape) != x.numel() {
                return Err(shape_err(kind, format!("{:?} -> {:?}", x.shape(), shape)));
            }
            Ok((Tensor::from_parts(shape.clone(), x.to_vec()), Saved::None))
        }
        OpKind::GatherRows(idx) => {
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(shape_err(kind, "needs rank >= 1".into()));
            }
            let rows = x.shape()[0];
            let width = x.numel() / rows.max(1);
            let mut out = Vec::with_capacity(idx.len() * width);
            for &r in idx {
                if r >= rows {
                    return Err(shape_err(kind, format!("row {} out of {}", r, rows)));
                }
                out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::GruCell => gru_forward(inputs),
        _ => unreachable!(),
    }
}

fn gru_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>), DiffError> {
    let kind = OpKind::<T>::GruCell;
    let (x, h, w, u, b) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
    if x.rank() != 2 || h.rank() != 2 || x.shape()[0] != h.shape()[0] {
        return Err(shape_err(&kind, format!("x {:?}, h {:?}", x.shape(), h.shape())));
    }
    let (bsz, isz, hsz) = (x.shape()[0], x.shape()[1], h.shape()[1]);
    if w.shape() != [isz, 3 * hsz] || u.shape() != [hsz, 3 * hsz] || b.shape() != [3 * hsz] {
        return Err(shape_err(
            &kind,
            format!("W {:?}, U {:?}, b {:?} for input {} hidden {}", w.shape(), u.shape(), b.shape(), isz, hsz),
        ));
    }
    let gx = matmul_raw(x.data(), w.data(), bsz, isz, 3 * hsz);
    let gh = matmul_raw(h.data(), u.data(), bsz, hsz, 3 * hsz);
    let n_el = bsz * hsz;
    let (mut z, mut r, mut n, mut ghn, mut out) =
        (vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el]);
    for row in 0..bsz {
        for j in 0..hsz {
            let g = row * 3 * hsz;
            let e = row * hsz + j;
            let zv = sigmoid(gx[g + j] + b.data()[j] + gh[g + j]);
            let rv = sigmoid(gx[g + hsz + j] + b.data()[hsz + j] + gh[g + hsz + j]);
            let hn = gh[g + 2 * hsz + j];
            let nv = (gx[g + 2 * hsz + j] + b.data()[2 * hsz + j] + rv * hn).tanh();
            z[e] = zv;
            r[e] = rv;
            n[e] = nv;
            ghn[e] = hn;
            out[e] = (T::one() - zv) * nv + zv * h.data()[e];
        }
    }
    Ok((Tensor::from_parts(vec![bsz, hsz], out), Saved::Gru { z, r, n, ghn }))
}

fn gru_backward<T: Scalar>(inputs: &[&Tensor<T>], saved: &Saved<T>, gout: &[T]) -> Vec<Vec<T>> {
    let Saved::Gru { z, r, n, ghn } = saved else { unreachable!() };
    let (x, h, w, u) = (inputs[0], inputs[1], inputs[2], inputs[3]);
    let (bsz, isz, hsz) = (x.shape()[0], x.shape()[1], h.shape()[1]);
    let one = T::one();
    let mut dgx = vec![T::zero(); bsz * 3 * hsz];
    let mut dgh = vec![T::zero(); bsz * 3 * hsz];
    let mut dh = vec![T::zero(); bsz * hsz];
    for row in 0..bsz {
        for j in 0..hsz {
            let e = row * hsz + j;
            let g = row * 3 * hsz;
            let go = gout[e];
            let dz = go * (h.data()[e] - n[e]);
            let dn = go * (one - z[e]);
            dh[e] = go * z[e];
            let dan = dn * (one - n[e] * n[e]);
            let dr = dan * ghn[e];
            let daz = dz * z[e] * (one - z[e]);
            let dar = dr * r[e] * (one - r[e]);
            dgx[g + j] = daz;
            dgx[g + hsz + j] = dar;
            dgx[g + 2 * hsz + j] = dan;
            dgh[g + j] = daz;
            dgh[g + hsz + j] = dar;
            dgh[g + 2 * hsz + j] = dan * r[e];
        }
    }
    let dx = matmul_nt(&dgx, w.data(), bsz, 3 * hsz, isz);
    let dh_gate = matmul_nt(&dgh, u.data(), bsz, 3 * hsz, hsz);
    for (a, b) in dh.iter_mut().zip(dh_gate) {
        *a = *a + b;
    }
    let dw = matmul_tn(x.data(), &dgx, bsz, isz, 3 * hsz);
    let du = matmul_tn(h.data(), &dgh, bsz, hsz, 3 * hsz);
    let mut db = vec![T::zero(); 3 * hsz];
    for row in 0..bsz {
        for (k, acc) in db.iter_mut().enumerate() {
            *acc = *acc + dgx[row * 3 * hsz + k];
        }
    }
    vec![dx, dh, dw, du, db]
}

/// Gradients with respect to every input, given the output gradient `gout`.
pub(crate) fn backward<T: Scalar>(
    kind: &OpKind<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    gout: &[T],
) -> Vec<Vec<T>> {
    if is_unary(kind) {
        let x = inputs[0];
        let g = x
            .data()
            .iter()
            .zip(output.data())
            .zip(gout)
            .map(|((&xv, &yv), &gv)| gv * unary_derivative(kind, xv, yv))
            .collect();
        return vec![g];
    }
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![matmul_nt(gout, b.data(), m, n, k), matmul_tn(a.data(), gout, m, k, n)]
        }
        OpKind::BatchMatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = output.shape()[2];
            let (mut ga, mut gb) = (Vec::with_capacity(a.numel()), Vec::with_capacity(b.numel()));
            for i in 0..g {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gi = &gout[i * m * n..(i + 1) * m * n];
                if *trans_b {
                    ga.extend(matmul_raw(gi, bi, m, n, k));
                    gb.extend(matmul_tn(gi, ai, m, n, k));
                } else {
                    ga.extend(matmul_nt(gi, bi, m, n, k));
                    gb.extend(matmul_tn(ai, gi, m, k, n));
                }
            }
            vec![ga, gb]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let Saved::Broadcast(maps) = saved else { unreachable!() };
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            let one = T::one();
            for (o, &g) in gout.iter().enumerate() {
                let (i, j) = match maps {
                    None => (o, o),
                    Some((ma, mb)) => (ma[o], mb[o]),
                };
                let (x, y) = (a.data()[i], b.data()[j]);
                let (da, db) = match kind {
                    OpKind::Add => (one, one),
                    OpKind::Sub => (one, -one),
                    OpKind::Mul => (y, x),
                    _ => (one / y, -x / (y * y)),
                };
                ga[i] = ga[i] + g * da;
                gb[j] = gb[j] + g * db;
            }
            vec![ga, gb]
        }
        OpKind::Minimum | OpKind::Maximum => {
            let (a, b) = (inputs[0], inputs[1]);
            let take_min = matches!(kind, OpKind::Minimum);
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            for (i, &g) in gout.iter().enumerate() {
                let (x, y) = (a.data()[i], b.data()[i]);
                let first = if take_min { x <= y } else { x >= y };
                if first {
                    ga[i] = g;
                } else {
                    gb[i] = g;
                }
            }
            vec![ga, gb]
        }
        OpKind::Softmax { axis } => {
            let y = output.data();
            let (outer, len, inner) = split_axis(output.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let dot: T = (0..len).map(|i| gout[at(i)] * y[at(i)]).sum();
                    for i in 0..len {
                        gx[at(i)] = y[at(i)] * (gout[at(i)] - dot);
                    }
                }
            }
            vec![gx]
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let x = inputs[0];
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let mut g = gout[0];
                    if mean {
                        g = g / T::from_usize(x.numel().max(1)).unwrap();
                    }
                    vec![vec![g; x.numel()]]
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let scale = if mean { T::one() / T::from_usize(len.max(1)).unwrap() } else { T::one() };
                    let mut gx = vec![T::zero(); x.numel()];
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                gx[(o * len + i) * inner + j] = gout[o * inner + j] * scale;
                            }
                        }
                    }
                    vec![gx]
                }
            }
        }
        OpKind::Concat { axis } => {
            let (outer, total, inner) = split_axis(output.shape(), *axis);
            let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut offset = 0;
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let len = t.shape()[*axis];
                    let base = (o * total + offset) * inner;
                    g.extend_from_slice(&gout[base..base + len * inner]);
                    offset += len;
                }
            }
            grads
        }
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = end - start;
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                gx[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&gout[o * width * inner..(o + 1) * width * inner]);
            }
            vec![gx]
        }
        OpKind::Transpose => {
            let x = inputs[0];
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = gout[j * m + i];
                }
            }
            vec![gx]
        }
        OpKind::Reshape(_) => vec![gout.to_vec()],
        OpKind::GatherRows(idx) => {
            let x = inputs[0];
            let width = x.numel() / x.shape()[0].max(1);
            let mut gx = vec![T::zero(); x.numel()];
            for (k, &r) in idx.iter().enumerate() {
                for c in 0..width {
                    gx[r * width + c] = gx[r * width + c] + gout[k * width + c];
                }
            }
            vec![gx]
        }
        OpKind::GruCell => gru_backward(inputs, saved, gout),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_row_vector() {
        let m = broadcast_map(&[2, 3], &[3]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 3], &[2, 1]);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0f64), 800.0);
        assert!(softplus(-800.0f64) >= 0.0);
    }

    #[test]
    fn batch_matmul_groups_are_independent() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, -1.0]).unwrap();
        let (y, _) = forward(&OpKind::BatchMatMul { trans_b: false }, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[3.0, 2.0]);
        let bt = Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 2.0, -1.0]).unwrap();
        let (yt, _) = forward(&OpKind::BatchMatMul { trans_b: true }, &[&a, &bt]).unwrap();
        assert_eq!(yt.data(), y.data());
    }
}
