use super::shape::{broadcast_map, broadcast_shape, reduce_broadcast, split_axis, strides};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Element-wise op selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Softplus,
    Abs,
    Clamp { lo: f64, hi: f64 },
}

/// Dispatches one of the element-wise ops. Binary kinds need `b`.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseOp::*;
    let need_b = || b.ok_or_else(|| Error::shape("elementwise", format!("{op:?} needs two operands")));
    Ok(match op {
        Add => a.add(need_b()?)?,
        Sub => a.sub(need_b()?)?,
        Mul => a.mul(need_b()?)?,
        Div => a.div(need_b()?)?,
        Exp => a.exp(),
        Log => a.log(),
        Sigmoid => a.sigmoid(),
        Gelu => a.gelu(),
        Softplus => a.softplus(),
        Abs => a.abs(),
        Clamp { lo, hi } => a.clamp(lo, hi),
    })
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Binary, op: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())))?;
        if cfg!(debug_assertions) && matches!(kind, Binary::Div) && other.data().contains(&0.0) {
            return Err(Error::Numerics { op, detail: "division by zero".into() });
        }
        let amap = broadcast_map(&out_shape, self.shape());
        let bmap = broadcast_map(&out_shape, other.shape());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (self.data(), other.data());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = match (&amap, &bmap) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = amap.as_ref().map_or(i, |m| m[i]);
                    let ib = bmap.as_ref().map_or(i, |m| m[i]);
                    f(ad[ia], bd[ib])
                })
                .collect(),
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(op, data, out_shape, &[self, other], move |g, _| {
            let at = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
            let (ad, bd) = (a.data(), b.data());
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                Binary::Add => (g.to_vec(), g.to_vec()),
                Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                Binary::Mul => (
                    g.iter().enumerate().map(|(i, v)| v * bd[bt(i)]).collect(),
                    g.iter().enumerate().map(|(i, v)| v * ad[at(i)]).collect(),
                ),
                Binary::Div => (
                    g.iter().enumerate().map(|(i, v)| v / bd[bt(i)]).collect(),
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let y = bd[bt(i)];
                            -v * ad[at(i)] / (y * y)
                        })
                        .collect(),
                ),
            };
            vec![
                a.tracks_grad().then(|| reduce_broadcast(ga, &amap, ad.len())),
                b.tracks_grad().then(|| reduce_broadcast(gb, &bmap, bd.len())),
            ]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Div, "div")
    }

    /// Unary map whose derivative is expressed through input `x` and output `y`.
    fn unary(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(op, data, self.shape().to_vec(), &[self], move |g, y| {
            let xd = x.data();
            vec![Some(g.iter().zip(xd).zip(y).map(|((g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn sin(&self) -> Tensor {
        self.unary("sin", f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.unary("cos", f64::cos, |x, _| -x.sin())
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    /// `s - x`
    pub fn rsub_scalar(&self, s: f64) -> Tensor {
        self.unary("rsub_scalar", move |x| s - x, |_, _| -1.0)
    }

    /// Modulus of the complex numbers `self + i*im`; the gradient at the
    /// origin is taken as zero.
    pub fn complex_abs(&self, im: &Tensor) -> Result<Tensor> {
        if self.shape() != im.shape() {
            return Err(Error::shape("complex_abs", format!("{:?} vs {:?}", self.shape(), im.shape())));
        }
        let data = self.data().iter().zip(im.data()).map(|(r, i)| r.hypot(*i)).collect();
        let (re, imc) = (self.clone(), im.clone());
        Ok(Tensor::from_op("complex_abs", data, self.shape().to_vec(), &[self, im], move |g, y| {
            let (rd, id) = (re.data(), imc.data());
            let safe = |num: f64, m: f64| if m > 0.0 { num / m } else { 0.0 };
            let gr = g.iter().zip(rd).zip(y).map(|((g, r), m)| g * safe(*r, *m)).collect();
            let gi = g.iter().zip(id).zip(y).map(|((g, i), m)| g * safe(*i, *m)).collect();
            vec![Some(gr), Some(gi)]
        }))
    }

    /// Argument of `re + i*self` in (-pi, pi]; zero at the origin, where the
    /// gradient is also zero.
    pub fn atan2(&self, re: &Tensor) -> Result<Tensor> {
        if self.shape() != re.shape() {
            return Err(Error::shape("atan2", format!("{:?} vs {:?}", self.shape(), re.shape())));
        }
        let data = self
            .data()
            .iter()
            .zip(re.data())
            .map(|(&i, &r)| if i == 0.0 && r == 0.0 { 0.0 } else { i.atan2(r) })
            .collect();
        let (imc, rec) = (self.clone(), re.clone());
        Ok(Tensor::from_op("atan2", data, self.shape().to_vec(), &[self, re], move |g, _| {
            let (id, rd) = (imc.data(), rec.data());
            let mut gi = Vec::with_capacity(g.len());
            let mut gr = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let m2 = rd[k] * rd[k] + id[k] * id[k];
                if m2 > 0.0 {
                    gi.push(g[k] * rd[k] / m2);
                    gr.push(-g[k] * id[k] / m2);
                } else {
                    gi.push(0.0);
                    gr.push(0.0);
                }
            }
            vec![Some(gi), Some(gr)]
        }))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![s], vec![], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op("sum_axis", out, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} of {:?}", self.shape())))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let gather = permutation_gather(&out_shape, &src_strides);
        let d = self.data();
        let data = gather.iter().map(|&i| d[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op("permute", data, out_shape, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gv, &i) in g.iter().zip(&gather) {
                gx[i] = *gv;
            }
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::shape("transpose", format!("axes {a},{b} of {:?}", self.shape())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("t", format!("rank {r}")));
        }
        self.transpose(r - 2, r - 1)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op("narrow", data, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    pub fn cat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::shape("cat", "no tensors"))?;
        if axis >= first.rank() {
            return Err(Error::shape("cat", format!("axis {axis} of {:?}", first.shape())));
        }
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("cat", format!("{:?} vs {:?}", t.shape(), first.shape())));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_c = lens.clone();
        Ok(Tensor::from_op("cat", data, shape, tensors, move |g, _| {
            let mut grads: Vec<Vec<f64>> = lens_c.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens_c) {
                    gi.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    pub fn stack(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let expanded = tensors
            .iter()
            .map(|t| {
                let mut s = t.shape().to_vec();
                if axis > s.len() {
                    return Err(Error::shape("stack", format!("axis {axis} of {s:?}")));
                }
                s.insert(axis, 1);
                t.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&expanded.iter().collect::<Vec<_>>(), axis)
    }

    /// Gathers entries along `axis`; the gradient scatters back additively.
    pub fn index_select(&self, axis: usize, index: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("index_select", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if let Some(bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::shape("index_select", format!("index {bad} >= {len}")));
        }
        let d = self.data();
        let m = index.len();
        let mut data = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for &i in index {
                data.extend_from_slice(&d[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = m;
        let index = index.to_vec();
        Ok(Tensor::from_op("index_select", data, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for (k, &i) in index.iter().enumerate() {
                    let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                    let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Subtract-max stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        Ok(Tensor::from_op("softmax", out, self.shape().to_vec(), &[self], move |g, y| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dims must
    /// agree, or one side may have none (it is then shared by every batch).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::shape("matmul", format!("{:?} x {:?}", self.shape(), other.shape()));
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let bsa = &self.shape()[..ra - 2];
        let bsb = &other.shape()[..rb - 2];
        let batch_shape = if bsa == bsb || bsb.is_empty() {
            bsa.to_vec()
        } else if bsa.is_empty() {
            bsb.to_vec()
        } else {
            return Err(err());
        };
        let batch: usize = batch_shape.iter().product();
        let a_batched = !bsa.is_empty();
        let b_batched = !bsb.is_empty();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a = &self.data()[if a_batched { bi * m * k } else { 0 }..][..m * k];
            let b = &other.data()[if b_batched { bi * k * n } else { 0 }..][..k * n];
            gemm(m, k, n, a, false, b, false, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", out, shape, &[self, other], move |g, _| {
            let ga = ac.tracks_grad().then(|| {
                let mut ga = vec![0.0; ac.numel()];
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let b = &bc.data()[if b_batched { bi * k * n } else { 0 }..][..k * n];
                    let dst = &mut ga[if a_batched { bi * m * k } else { 0 }..][..m * k];
                    // dA = dC * B^T
                    gemm(m, n, k, gc, false, b, true, dst);
                }
                ga
            });
            let gb = bc.tracks_grad().then(|| {
                let mut gb = vec![0.0; bc.numel()];
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let a = &ac.data()[if a_batched { bi * m * k } else { 0 }..][..m * k];
                    let dst = &mut gb[if b_batched { bi * k * n } else { 0 }..][..k * n];
                    // dB = A^T * dC
                    gemm(k, m, n, a, true, gc, false, dst);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Normalizes along `axis` and applies a per-position affine map.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("layer_norm", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if gamma.numel() != len || beta.numel() != len {
            return Err(Error::shape("layer_norm", format!("affine of {} for axis length {len}", gamma.numel())));
        }
        let d = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| d[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (d[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    let xh = (d[at(l)] - mean) * is;
                    xhat[at(l)] = xh;
                    out[at(l)] = xh * gd[l] + bd[l];
                }
            }
        }
        let gc = gamma.clone();
        let track_affine = gamma.tracks_grad() || beta.tracks_grad();
        Ok(Tensor::from_op("layer_norm", out, self.shape().to_vec(), &[self, gamma, beta], move |g, _| {
            let gd = gc.data();
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; len];
            let mut gbeta = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for l in 0..len {
                        let gh = g[at(l)] * gd[l];
                        sum_gh += gh;
                        sum_gh_xh += gh * xhat[at(l)];
                        if track_affine {
                            ggamma[l] += g[at(l)] * xhat[at(l)];
                            gbeta[l] += g[at(l)];
                        }
                    }
                    let is = inv_std[o * inner + i];
                    let nl = len as f64;
                    for l in 0..len {
                        let gh = g[at(l)] * gd[l];
                        gx[at(l)] = is * (gh - sum_gh / nl - xhat[at(l)] * sum_gh_xh / nl);
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }))
    }

    /// Bilinear resize of `[B, C, H, W]` (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        if self.rank() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", format!("{:?} -> {out_h}x{out_w}", self.shape())));
        }
        let s = self.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let rows = interp_weights(h, out_h);
        let cols = interp_weights(w, out_w);
        let d = self.data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let shape = vec![s[0], s[1], out_h, out_w];
        Ok(Tensor::from_op("resize_bilinear", out, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let v = src[oy * out_w + ox];
                        dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                        dst[y1 * w + x0] += v * wy * (1.0 - wx);
                        dst[y1 * w + x1] += v * wy * wx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn interp_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .map(|(i0, i1, w)| if i0 == i1 { (i0, i1, 0.0) } else { (i0, i1, w) })
        .collect()
}

/// Source offsets for every output position of a strided view.
fn permutation_gather(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// `c += op(a) * op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
