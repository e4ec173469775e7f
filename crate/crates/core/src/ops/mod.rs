//! Differentiable primitives recorded on a [`Tape`](crate::autograd::Tape).
//!
//! Every function here takes and returns [`Var`]s. Shape errors are reported
//! as [`Error::Dimension`](crate::error::Error::Dimension).

mod conv;
mod linalg;
mod norm;
mod sample;
mod softmax;

pub use conv::{conv1d, conv2d, conv2d_forward};
pub(crate) use conv::gemm;
pub use linalg::{batched_matmul, matmul, to_tokens, transpose};
pub use norm::{batch_norm, BatchStats, BnMode, BN_EPS};
pub use sample::{bilinear_grid_sample, grid_sample_forward, identity_grid, max_pool2, upsample_bilinear};
pub use softmax::{cross_entropy, softmax, softmax_forward};

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Softplus => softplus_scalar(x),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Softplus => sigmoid_scalar(x),
        }
    }
}

pub fn activation<'t>(x: Var<'t>, kind: Activation) -> Var<'t> {
    let y = x.value().map(|v| kind.apply(v));
    x.tape().push(
        y,
        &[x],
        Box::new(move |g, inputs, out| {
            let dx = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * kind.derivative(x, y))
                    .collect(),
            );
            vec![Some(dx)]
        }),
    )
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    activation(x, Activation::Sigmoid)
}

pub fn tanh(x: Var<'_>) -> Var<'_> {
    activation(x, Activation::Tanh)
}

pub fn leaky_relu(x: Var<'_>, slope: f64) -> Var<'_> {
    activation(x, Activation::LeakyRelu(slope))
}

pub fn softplus(x: Var<'_>) -> Var<'_> {
    activation(x, Activation::Softplus)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err!("broadcast rank {:?} vs {:?}", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

/// Maps every output position of a broadcast to the flat offset of `shape`.
fn broadcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_to(g: &Tensor, shape: &[usize], offsets: Option<&[usize]>) -> Tensor {
    match offsets {
        None => g.clone(),
        Some(offsets) => {
            let mut out = Tensor::zeros(shape);
            let data = out.data_mut();
            for (&o, &v) in offsets.iter().zip(g.data()) {
                data[o] += v;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, op: Binary) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let a_off = (av.shape() != out_shape.as_slice()).then(|| broadcast_offsets(av.shape(), &out_shape));
    let b_off = (bv.shape() != out_shape.as_slice()).then(|| broadcast_offsets(bv.shape(), &out_shape));
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (av.data(), bv.data());
    let f = |i: usize| {
        let x = ad[a_off.as_ref().map_or(i, |o| o[i])];
        let y = bd[b_off.as_ref().map_or(i, |o| o[i])];
        match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        }
    };
    let value = Tensor::from_parts(out_shape, (0..n).map(f).collect());
    Ok(a.tape().push(
        value,
        &[a, b],
        Box::new(move |g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            match op {
                Binary::Add => vec![
                    Some(reduce_to(g, a.shape(), a_off.as_deref())),
                    Some(reduce_to(g, b.shape(), b_off.as_deref())),
                ],
                Binary::Sub => vec![
                    Some(reduce_to(g, a.shape(), a_off.as_deref())),
                    Some(reduce_to(&g.map(|v| -v), b.shape(), b_off.as_deref())),
                ],
                Binary::Mul => {
                    let at = |i: usize| a.data()[a_off.as_ref().map_or(i, |o| o[i])];
                    let bt = |i: usize| b.data()[b_off.as_ref().map_or(i, |o| o[i])];
                    let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * bt(i));
                    let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * at(i));
                    vec![
                        Some(reduce_to(&ga, a.shape(), a_off.as_deref())),
                        Some(reduce_to(&gb, b.shape(), b_off.as_deref())),
                    ]
                }
            }
        }),
    ))
}

/// Elementwise sum; operands of equal rank broadcast over unit extents.
pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, Binary::Add)
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, Binary::Sub)
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    binary(a, b, Binary::Mul)
}

pub fn scale(x: Var<'_>, c: f64) -> Var<'_> {
    let y = x.value().map(|v| v * c);
    x.tape().push(y, &[x], Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]))
}

pub fn add_scalar(x: Var<'_>, c: f64) -> Var<'_> {
    let y = x.value().map(|v| v + c);
    x.tape().push(y, &[x], Box::new(|g, _, _| vec![Some(g.clone())]))
}

/// Sum of all entries, as a `[1]` tensor.
pub fn sum(x: Var<'_>) -> Var<'_> {
    let y = Tensor::scalar(x.value().sum());
    x.tape().push(
        y,
        &[x],
        Box::new(|g, inputs, _| vec![Some(Tensor::full(inputs[0].shape(), g.item()))]),
    )
}

pub fn mean(x: Var<'_>) -> Var<'_> {
    let n = x.value().numel() as f64;
    scale(sum(x), 1.0 / n)
}

/// Sum of squared entries (squared Frobenius norm), as a `[1]` tensor.
pub fn sum_squares(x: Var<'_>) -> Var<'_> {
    let y = Tensor::scalar(x.value().data().iter().map(|v| v * v).sum());
    x.tape().push(
        y,
        &[x],
        Box::new(|g, inputs, _| {
            let c = 2.0 * g.item();
            vec![Some(inputs[0].map(|v| c * v))]
        }),
    )
}

/// Clamps to `[lo, hi]`; the gradient passes only where the input is strictly inside.
pub fn clip(x: Var<'_>, lo: f64, hi: f64) -> Var<'_> {
    let y = x.value().map(|v| v.clamp(lo, hi));
    x.tape().push(
        y,
        &[x],
        Box::new(move |g, inputs, _| {
            let dx = g
                .zip_map(inputs[0], |g, v| if v > lo && v < hi { g } else { 0.0 })
                .expect("clip grad shape");
            vec![Some(dx)]
        }),
    )
}

pub fn reshape<'t>(x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let y = x.value().reshape(shape)?;
    Ok(x.tape().push(
        y,
        &[x],
        Box::new(|g, inputs, _| vec![Some(g.reshape(inputs[0].shape()).expect("reshape grad"))]),
    ))
}

/// Splits a shape into (outer, axis extent, inner) products.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean over one axis; the axis is removed from the output shape.
pub fn mean_axis<'t>(x: Var<'t>, axis: usize) -> Result<Var<'t>> {
    let xv = x.value();
    if axis >= xv.rank() || xv.rank() < 2 {
        return Err(dim_err!("mean_axis {} of {:?}", axis, xv.shape()));
    }
    let (outer, len, inner) = axis_split(xv.shape(), axis);
    let mut out_shape = xv.shape().to_vec();
    out_shape.remove(axis);
    let mut out = vec![0.0; outer * inner];
    let d = xv.data();
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let inv = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(x.tape().push(
        Tensor::from_parts(out_shape, out),
        &[x],
        Box::new(move |g, inputs, _| {
            let mut dx = vec![0.0; outer * len * inner];
            let gd = g.data();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        dx[base + i] = gd[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
        }),
    ))
}

/// Spatial axis pooled away by [`gap_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average down the columns (over H); leaves one value per column.
    Vertical,
    /// Average along the rows (over W); leaves one value per row.
    Horizontal,
}

/// Axis-wise global average pooling of a `[C,H,W]` or `[B,C,H,W]` map.
///
/// `Vertical` yields `[.., C, W]`, `Horizontal` yields `[.., C, H]`. A
/// further [`mean_axis`] over the last axis gives the length-C descriptor.
pub fn gap_axis(x: Var<'_>, axis: PoolAxis) -> Result<Var<'_>> {
    let rank = x.value().rank();
    if rank != 3 && rank != 4 {
        return Err(dim_err!("gap_axis expects [C,H,W] or [B,C,H,W], got {:?}", x.shape()));
    }
    match axis {
        PoolAxis::Vertical => mean_axis(x, rank - 2),
        PoolAxis::Horizontal => mean_axis(x, rank - 1),
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(dim_err!("concat axis {} of {:?}", axis, base));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
            return Err(dim_err!("concat {:?} with {:?} along {}", base, s, axis));
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    Ok(first.tape().push(
        Tensor::from_parts(out_shape, out),
        xs,
        Box::new(move |g, inputs, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gr, &len) in grads.iter_mut().zip(&lens) {
                    gr.extend_from_slice(&gd[pos..pos + len * inner]);
                    pos += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(inputs)
                .map(|(d, x)| Some(Tensor::from_parts(x.shape().to_vec(), d)))
                .collect()
        }),
    ))
}

/// Contiguous range `[start, start+len)` along `axis`.
pub fn slice<'t>(x: Var<'t>, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
    let xv = x.value();
    if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
        return Err(dim_err!("slice {}..{} on axis {} of {:?}", start, start + len, axis, xv.shape()));
    }
    let (outer, full, inner) = axis_split(xv.shape(), axis);
    let mut out_shape = xv.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let b = (o * full + start) * inner;
        out.extend_from_slice(&xv.data()[b..b + len * inner]);
    }
    Ok(x.tape().push(
        Tensor::from_parts(out_shape, out),
        &[x],
        Box::new(move |g, inputs, _| {
            let mut dx = Tensor::zeros(inputs[0].shape());
            let dd = dx.data_mut();
            for o in 0..outer {
                let b = (o * full + start) * inner;
                dd[b..b + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }),
    ))
}

/// Gathers entries of the leading axis (repeats allowed).
pub fn index_select<'t>(x: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    let xv = x.value();
    let n0 = xv.shape()[0];
    if indices.is_empty() || indices.iter().any(|&i| i >= n0) {
        return Err(dim_err!("index_select {:?} from leading extent {}", indices, n0));
    }
    let inner = xv.numel() / n0;
    let mut out_shape = xv.shape().to_vec();
    out_shape[0] = indices.len();
    let mut out = Vec::with_capacity(indices.len() * inner);
    for &i in indices {
        out.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
    }
    let indices = indices.to_vec();
    Ok(x.tape().push(
        Tensor::from_parts(out_shape, out),
        &[x],
        Box::new(move |g, inputs, _| {
            let mut dx = Tensor::zeros(inputs[0].shape());
            let dd = dx.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    dd[i * inner + j] += g.data()[k * inner + j];
                }
            }
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn activation_reference_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::LeakyRelu(0.1).apply(-1.0) + 0.1).abs() < 1e-15);
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gap_axis_examples() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4], 1.5));
        let v = gap_axis(c, PoolAxis::Vertical).unwrap();
        assert_eq!(v.shape(), vec![2, 4]);
        assert!(v.value().data().iter().all(|&x| x == 1.5));

        let x = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap());
        assert_eq!(gap_axis(x, PoolAxis::Vertical).unwrap().value().data(), &[2.0]);

        let row = tape.constant(Tensor::new(vec![1, 1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        assert_eq!(gap_axis(row, PoolAxis::Vertical).unwrap().value().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(gap_axis(row, PoolAxis::Horizontal).unwrap().value().data(), &[5.0]);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap());
        let y = mul(x, w).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0, 4.0, -3.0, -4.0, -5.0]);
        let grads = tape.backward(sum(y)).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn incompatible_broadcast_is_a_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(add(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let back = slice(c, 1, 2, 1).unwrap();
        assert_eq!(*back.value(), *b.value());
    }

    #[test]
    fn clip_blocks_gradient_outside() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-2.0, 0.5, 2.0]));
        let grads = tape.backward(sum(clip(x, -1.0, 1.0))).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
