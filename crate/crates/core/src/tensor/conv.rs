//! 2D cross-correlation with stride, zero padding and channel groups.

use super::ops::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0, groups: 1 }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }
}

impl Tensor {
    /// `x: [B, C_in, H, W]` (or `[C_in, H, W]`), `weight: [C_out, C_in/groups, kh, kw]`,
    /// optional `bias: [C_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let unbatched = self.rank() == 3;
        let xs: Vec<usize> = if unbatched {
            std::iter::once(1).chain(self.shape().iter().copied()).collect()
        } else {
            self.shape().to_vec()
        };
        let ws = weight.shape();
        let err = |d: String| Error::shape("conv2d", d);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(err(format!("input {:?} weight {ws:?}", self.shape())));
        }
        let Conv2dSpec { stride, pad, groups } = spec;
        if stride == 0
            || groups == 0
            || !xs[1].is_multiple_of(groups)
            || !ws[0].is_multiple_of(groups)
            || ws[1] * groups != xs[1]
        {
            return Err(err(format!("input {xs:?} weight {ws:?} groups {groups}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(err(format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = bias {
            if b.numel() != ws[0] {
                return Err(err(format!("bias of {} for {} outputs", b.numel(), ws[0])));
            }
        }
        let g = Geom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            ow: (xs[3] + 2 * pad - ws[3]) / stride + 1,
            stride,
            pad,
            groups,
        };
        let mut out = forward(&g, self.data(), weight.data());
        if let Some(b) = bias {
            let plane = g.oh * g.ow;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = b.data()[i % g.cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if unbatched { vec![g.cout, g.oh, g.ow] } else { vec![g.batch, g.cout, g.oh, g.ow] };
        let (xc, wc) = (self.clone(), weight.clone());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("conv2d", out, shape, &parents, move |go, _| {
            let gx = xc.tracks_grad().then(|| input_grad(&g, go, wc.data()));
            let gw = wc.tracks_grad().then(|| weight_grad(&g, go, xc.data()));
            let mut grads = vec![gx, gw];
            if has_bias {
                let plane = g.oh * g.ow;
                let mut gb = vec![0.0; g.cout];
                for (i, chunk) in go.chunks(plane).enumerate() {
                    gb[i % g.cout] += chunk.iter().sum::<f64>();
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }
}

fn forward(g: &Geom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for b in 0..g.batch {
            gemm(
                g.cout,
                g.cin,
                plane,
                w,
                false,
                &x[b * g.cin * plane..(b + 1) * g.cin * plane],
                false,
                &mut out[b * g.cout * plane..(b + 1) * g.cout * plane],
            );
        }
        return out;
    }
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
        return out;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kdim = cin_g * g.kh * g.kw;
    let plane_out = g.oh * g.ow;
    let mut cols = vec![0.0; kdim * plane_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            im2col(g, x, b, grp * cin_g, &mut cols);
            let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            let o0 = (b * g.cout + grp * cout_g) * plane_out;
            gemm(cout_g, kdim, plane_out, wg, false, &cols, false, &mut out[o0..o0 + cout_g * plane_out]);
        }
    }
    out
}

/// Row `(ci, ky, kx)` of the column matrix holds the input tap for every
/// output position.
fn im2col(g: &Geom, x: &[f64], b: usize, c0: usize, cols: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let src = &x[((b * g.cin) + c0 + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            src[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(g: &Geom, cols: &[f64], b: usize, c0: usize, gx: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let dst = &mut gx[((b * g.cin) + c0 + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if input + pad > k { (input + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(output), hi_excl.min(output))
}

fn depthwise_forward(g: &Geom, x: &[f64], w: &[f64], out: &mut [f64]) {
    for b in 0..g.batch {
        for c in 0..g.cin {
            let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(b * g.cout + c) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                let (ylo, yhi) = tap_range(ky, g.pad, g.stride, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = w[(c * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi) = tap_range(kx, g.pad, g.stride, g.w, g.ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = xlo + kx - g.pad;
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(&row[ix0..ix0 + (xhi - xlo)]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn input_grad(g: &Geom, go: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.batch * g.cin * g.h * g.w];
    let plane_out = g.oh * g.ow;
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for b in 0..g.batch {
            gemm(
                g.cin,
                g.cout,
                plane,
                w,
                true,
                &go[b * g.cout * plane..(b + 1) * g.cout * plane],
                false,
                &mut gx[b * g.cin * plane..(b + 1) * g.cin * plane],
            );
        }
        return gx;
    }
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let dst = &mut gx[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let src = &go[(b * g.cout + c) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let (ylo, yhi) = tap_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = w[(c * g.kh + ky) * g.kw + kx];
                        let (xlo, xhi) = tap_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in xlo..xhi {
                                dst[iy * g.w + ox * g.stride + kx - g.pad] += wv * src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kdim = cin_g * g.kh * g.kw;
    let mut cols = vec![0.0; kdim * plane_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            cols.iter_mut().for_each(|v| *v = 0.0);
            let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            let o0 = (b * g.cout + grp * cout_g) * plane_out;
            gemm(kdim, cout_g, plane_out, wg, true, &go[o0..o0 + cout_g * plane_out], false, &mut cols);
            col2im(g, &cols, b, grp * cin_g, &mut gx);
        }
    }
    gx
}

fn weight_grad(g: &Geom, go: &[f64], x: &[f64]) -> Vec<f64> {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kdim = cin_g * g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * kdim];
    let plane_out = g.oh * g.ow;
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for b in 0..g.batch {
            gemm(
                g.cout,
                plane,
                g.cin,
                &go[b * g.cout * plane..(b + 1) * g.cout * plane],
                false,
                &x[b * g.cin * plane..(b + 1) * g.cin * plane],
                true,
                &mut gw,
            );
        }
        return gw;
    }
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let gsrc = &go[(b * g.cout + c) * plane_out..][..plane_out];
                for ky in 0..g.kh {
                    let (ylo, yhi) = tap_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (xlo, xhi) = tap_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in xlo..xhi {
                                acc += gsrc[oy * g.ow + ox] * src[iy * g.w + ox * g.stride + kx - g.pad];
                            }
                        }
                        gw[(c * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
        return gw;
    }
    let mut cols = vec![0.0; kdim * plane_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            im2col(g, x, b, grp * cin_g, &mut cols);
            let o0 = (b * g.cout + grp * cout_g) * plane_out;
            let dst = &mut gw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            gemm(cout_g, plane_out, kdim, &go[o0..o0 + cout_g * plane_out], false, &cols, true, dst);
        }
    }
    gw
}
