//! Differentiable kernels over tape variables.
//!
//! Elementwise binary operations follow numpy broadcasting; their gradients
//! are summed back over broadcast dimensions. Axis reductions drop the axis
//! unless `keepdim` is set.

use super::tape::Var;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Strides of `shape` aligned to an output of rank `rank`, zero along
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for (k, &d) in shape.iter().enumerate().rev() {
        let slot = rank - shape.len() + k;
        strides[slot] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        for k in (0..rank).rev() {
            idx[k] += 1;
            oa += sa[k];
            ob += sb[k];
            if idx[k] < out_shape[k] {
                break;
            }
            oa -= sa[k] * idx[k];
            ob -= sb[k] * idx[k];
            idx[k] = 0;
        }
    }
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let mut data = vec![0.0; shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    Tensor::new(shape, data)
}

/// Gradient contribution to one operand of a broadcast binary op:
/// `sum over broadcast dims of g(out_grad, a, b)`.
fn binary_grad(
    grad: &Tensor,
    a: &Tensor,
    b: &Tensor,
    target: &[usize],
    g: impl Fn(f64, f64, f64) -> f64,
) -> Tensor {
    let mut out = Tensor::zeros(target);
    let (gd, ad, bd) = (grad.data(), a.data(), b.data());
    if a.shape() == b.shape() {
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = g(gd[i], ad[i], bd[i]);
        }
        return out;
    }
    let rank = grad.ndim();
    let st = broadcast_strides(target, rank);
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let shape = grad.shape().to_vec();
    let od = out.data_mut();
    let mut idx = vec![0usize; rank];
    for &go in gd {
        let (mut it, mut ia, mut ib) = (0, 0, 0);
        for k in 0..rank {
            it += idx[k] * st[k];
            ia += idx[k] * sa[k];
            ib += idx[k] * sb[k];
        }
        od[it] += g(go, ad[ia], bd[ib]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        value: Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + 'static,
    ) -> Var<'t> {
        self.tape.record(
            op,
            &[self],
            value,
            Box::new(move |g, inputs, out| vec![Some(backward(g, inputs[0], out))]),
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_forward("add", &a, &b, |x, y| x + y)?;
        Ok(self.tape.record(
            "add",
            &[self, rhs],
            out,
            Box::new(|g, inp, _| {
                vec![
                    Some(binary_grad(g, inp[0], inp[1], inp[0].shape(), |g, _, _| g)),
                    Some(binary_grad(g, inp[0], inp[1], inp[1].shape(), |g, _, _| g)),
                ]
            }),
        ))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_forward("sub", &a, &b, |x, y| x - y)?;
        Ok(self.tape.record(
            "sub",
            &[self, rhs],
            out,
            Box::new(|g, inp, _| {
                vec![
                    Some(binary_grad(g, inp[0], inp[1], inp[0].shape(), |g, _, _| g)),
                    Some(binary_grad(g, inp[0], inp[1], inp[1].shape(), |g, _, _| -g)),
                ]
            }),
        ))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_forward("mul", &a, &b, |x, y| x * y)?;
        Ok(self.tape.record(
            "mul",
            &[self, rhs],
            out,
            Box::new(|g, inp, _| {
                vec![
                    Some(binary_grad(g, inp[0], inp[1], inp[0].shape(), |g, _, b| g * b)),
                    Some(binary_grad(g, inp[0], inp[1], inp[1].shape(), |g, a, _| g * a)),
                ]
            }),
        ))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = binary_forward("div", &a, &b, |x, y| x / y)?;
        Ok(self.tape.record(
            "div",
            &[self, rhs],
            out,
            Box::new(|g, inp, _| {
                vec![
                    Some(binary_grad(g, inp[0], inp[1], inp[0].shape(), |g, _, b| g / b)),
                    Some(binary_grad(g, inp[0], inp[1], inp[1].shape(), |g, a, b| {
                        -g * a / (b * b)
                    })),
                ]
            }),
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.unary("scale", out, move |g, _, _| g.map(|x| x * factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary("add_scalar", out, |g, _, _| g.clone())
    }

    /// `max(x, c)` elementwise; the gradient passes where `x > c`.
    pub fn max_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x.max(c));
        self.unary("max_scalar", out, move |g, x, _| {
            let mut d = g.clone();
            for (d, &x) in d.data_mut().iter_mut().zip(x.data()) {
                if x <= c {
                    *d = 0.0;
                }
            }
            d
        })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::exp);
        Ok(self.unary("exp", out, |g, _, y| {
            let mut d = g.clone();
            for (d, &y) in d.data_mut().iter_mut().zip(y.data()) {
                *d *= y;
            }
            d
        }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary("sigmoid", out, |g, _, y| {
            let mut d = g.clone();
            for (d, &y) in d.data_mut().iter_mut().zip(y.data()) {
                *d *= y * (1.0 - y);
            }
            d
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary("reshape", out, |g, x, _| {
            g.reshape(x.shape()).expect("reshape grad")
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary("transpose", out, |g, _, _| {
            g.transpose().expect("transpose grad")
        }))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.tape.record(
            "matmul",
            &[self, rhs],
            out,
            Box::new(|g, inp, _| {
                let (a, b) = (inp[0], inp[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut db, 0.0);
                vec![
                    Some(Tensor::new(vec![m, k], da).unwrap()),
                    Some(Tensor::new(vec![k, n], db).unwrap()),
                ]
            }),
        ))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        Ok(self.unary("sum", out, |g, x, _| Tensor::full(x.shape(), g.item())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.numel() as f64;
        let out = Tensor::scalar(v.sum() / n);
        Ok(self.unary("mean", out, move |g, x, _| {
            Tensor::full(x.shape(), g.item() / n)
        }))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        let (outer, len, inner) = axis_extents("sum_axis", v.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let shape = reduced_shape(v.shape(), axis, keepdim);
        Ok(self.unary("sum_axis", Tensor::new(shape, out)?, move |g, x, _| {
            let mut d = Tensor::zeros(x.shape());
            let dd = d.data_mut();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        dd[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            d
        }))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    /// Maximum along `axis`; ties send the gradient to the first maximiser.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        let (outer, len, inner) = axis_extents("max_axis", v.shape(), axis)?;
        if len == 0 {
            return Err(Error::invalid("max_axis", "reduction over an empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let x = v.data()[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    if x > out[slot] {
                        out[slot] = x;
                        arg[slot] = l;
                    }
                }
            }
        }
        let shape = reduced_shape(v.shape(), axis, keepdim);
        Ok(self.unary("max_axis", Tensor::new(shape, out)?, move |g, x, _| {
            let mut d = Tensor::zeros(x.shape());
            let dd = d.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    dd[(o * len + arg[slot]) * inner + i] = g.data()[slot];
                }
            }
            d
        }))
    }

    /// Euclidean norm along `axis`. The gradient at a zero vector is taken
    /// to be zero.
    pub fn norm_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        let (outer, len, inner) = axis_extents("norm_axis", v.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let x = v.data()[(o * len + l) * inner + i];
                    out[o * inner + i] += x * x;
                }
            }
        }
        for x in &mut out {
            *x = x.sqrt();
        }
        let shape = reduced_shape(v.shape(), axis, keepdim);
        Ok(self.unary("norm_axis", Tensor::new(shape, out)?, move |g, x, y| {
            let mut d = Tensor::zeros(x.shape());
            let dd = d.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    let n = y.data()[slot];
                    if n == 0.0 {
                        continue;
                    }
                    for l in 0..len {
                        let k = (o * len + l) * inner + i;
                        dd[k] = g.data()[slot] * x.data()[k] / n;
                    }
                }
            }
            d
        }))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (outer, len, inner) = axis_extents("slice", v.shape(), axis)?;
        if start > end || end > len {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} out of bounds for axis of length {len}"),
            ));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = width;
        Ok(self.unary("slice", Tensor::new(shape, out)?, move |g, x, _| {
            let mut d = Tensor::zeros(x.shape());
            let dd = d.data_mut();
            for o in 0..outer {
                dd[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
            }
            d
        }))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (len, inner) = match v.shape().split_first() {
            Some((&len, rest)) => (len, rest.iter().product::<usize>()),
            None => return Err(Error::invalid("gather_rows", "cannot index a scalar")),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {len} rows"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(self.unary("gather_rows", Tensor::new(shape, out)?, move |g, x, _| {
            let mut d = Tensor::zeros(x.shape());
            let dd = d.data_mut();
            for (r, &i) in indices.iter().enumerate() {
                for k in 0..inner {
                    dd[i * inner + k] += g.data()[r * inner + k];
                }
            }
            d
        }))
    }
}

/// Concatenates along an existing axis; all other extents must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = vars
        .first()
        .ok_or_else(|| Error::invalid("concat", "no operands"))?;
    let tape = first.tape;
    let values: Vec<_> = vars.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    axis_extents("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    Ok(tape.record(
        "concat",
        vars,
        Tensor::new(shape, out)?,
        Box::new(move |g, inp, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gr, &len) in grads.iter_mut().zip(&lens) {
                    gr.extend_from_slice(&g.data()[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(inp)
                .map(|(d, x)| Some(Tensor::new(x.shape().to_vec(), d).unwrap()))
                .collect()
        }),
    ))
}

/// Stacks equal-shaped operands along a new leading axis.
pub fn stack<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let first = vars
        .first()
        .ok_or_else(|| Error::invalid("stack", "no operands"))?;
    let base = first.shape();
    let mut expanded = Vec::with_capacity(vars.len());
    for v in vars {
        if v.shape() != base {
            return Err(Error::shape("stack", &base, &v.shape()));
        }
        let mut s = vec![1];
        s.extend_from_slice(&base);
        expanded.push(v.reshape(&s)?);
    }
    concat(&expanded, 0)
}
