//! Centered 2D DFT over the last two axes, amplitude/phase split and
//! recombination.
//!
//! Forward transform is unnormalized, the inverse carries `1/(H*W)`. After
//! centering, DC sits at `(H/2, W/2)` (integer division), so the lowest
//! frequencies are in the middle of the map and the highest at the corners.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D DFT of one `h x w` plane.
pub(crate) fn fft2_plane(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row, col) = if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        };
        row.process(buf);
        let mut column = vec![Complex::default(); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
    });
}

/// Position in the centered layout of unshifted bin `k` along an axis of
/// length `n`.
fn centered(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

fn plane_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 || x.numel() == 0 {
        return Err(Error::shape(op, format!("{:?}", x.shape())));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.numel() / (h * w), h, w))
}

/// Bins that are their own conjugate partner, whose DFT of a real signal is
/// exactly real.
fn self_conjugate(k: usize, n: usize) -> bool {
    k == 0 || 2 * k == n
}

/// Centered forward DFT of real planes. Returns `(re, im)` with the input
/// shape. Imaginary parts of self-conjugate bins are exactly `+0.0`.
fn forward_raw(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut re = vec![0.0; x.len()];
    let mut im = vec![0.0; x.len()];
    let mut buf = vec![Complex::default(); hw];
    for p in 0..planes {
        for (b, &v) in buf.iter_mut().zip(&x[p * hw..(p + 1) * hw]) {
            *b = Complex::new(v, 0.0);
        }
        fft2_plane(&mut buf, h, w, false);
        for u in 0..h {
            for v in 0..w {
                let z = buf[u * w + v];
                let dst = p * hw + centered(u, h) * w + centered(v, w);
                re[dst] = z.re;
                im[dst] = if self_conjugate(u, h) && self_conjugate(v, w) || z.im == 0.0 { 0.0 } else { z.im };
            }
        }
    }
    (re, im)
}

/// Real part of the inverse DFT of centered spectra.
fn inverse_raw(re: &[f64], im: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; re.len()];
    let mut buf = vec![Complex::default(); hw];
    let scale = 1.0 / hw as f64;
    for p in 0..planes {
        for u in 0..h {
            for v in 0..w {
                let src = p * hw + centered(u, h) * w + centered(v, w);
                buf[u * w + v] = Complex::new(re[src], im[src]);
            }
        }
        fft2_plane(&mut buf, h, w, true);
        for (o, z) in out[p * hw..(p + 1) * hw].iter_mut().zip(&buf) {
            *o = z.re * scale;
        }
    }
    out
}

/// Complex forward DFT of centered spectra, used by the inverse's
/// gradient. Returns centered `(re, im)`.
fn forward_complex_centered(gre: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut re = vec![0.0; gre.len()];
    let mut im = vec![0.0; gre.len()];
    let mut buf = vec![Complex::default(); hw];
    for p in 0..planes {
        for (b, &v) in buf.iter_mut().zip(&gre[p * hw..(p + 1) * hw]) {
            *b = Complex::new(v, 0.0);
        }
        fft2_plane(&mut buf, h, w, false);
        for u in 0..h {
            for v in 0..w {
                let z = buf[u * w + v];
                let dst = p * hw + centered(u, h) * w + centered(v, w);
                re[dst] = z.re;
                im[dst] = z.im;
            }
        }
    }
    (re, im)
}

/// Differentiable centered DFT over the last two axes: `(re, im)`.
pub fn fft2c(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (planes, h, w) = plane_dims(x, "fft2c")?;
    let (re, im) = forward_raw(x.data(), planes, h, w);
    let n = x.numel();
    let mut data = re;
    data.extend(im);
    let mut shape = vec![2];
    shape.extend_from_slice(x.shape());
    let both = Tensor::from_op("fft2c", data, shape, &[x], move |g, _| {
        // dx = HW * Re(ifft(g_re + i g_im)); zeroed self-conjugate
        // imaginary parts have no dependence on x.
        let (gre, gim) = g.split_at(n);
        let hw = (h * w) as f64;
        let dx = inverse_raw(gre, gim, planes, h, w).into_iter().map(|v| v * hw).collect();
        vec![Some(dx)]
    });
    let re = both.narrow(0, 0, 1)?.reshape(x.shape())?;
    let im = both.narrow(0, 1, 1)?.reshape(x.shape())?;
    Ok((re, im))
}

/// Differentiable real part of the centered inverse DFT.
pub fn ifft2c_real(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    if re.shape() != im.shape() {
        return Err(Error::shape("ifft2c_real", format!("{:?} vs {:?}", re.shape(), im.shape())));
    }
    let (planes, h, w) = plane_dims(re, "ifft2c_real")?;
    let out = inverse_raw(re.data(), im.data(), planes, h, w);
    Ok(Tensor::from_op("ifft2c_real", out, re.shape().to_vec(), &[re, im], move |g, _| {
        let hw = (h * w) as f64;
        let (mut gre, mut gim) = forward_complex_centered(g, planes, h, w);
        gre.iter_mut().for_each(|v| *v /= hw);
        gim.iter_mut().for_each(|v| *v /= hw);
        vec![Some(gre), Some(gim)]
    }))
}

/// Per-channel centered spectrum in polar form.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub amplitude: Tensor,
    /// Radians in `(-pi, pi]`; a zero bin has phase 0.
    pub phase: Tensor,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.amplitude.shape()[self.amplitude.rank() - 2]
    }

    pub fn width(&self) -> usize {
        self.amplitude.shape()[self.amplitude.rank() - 1]
    }

    /// Back to `(re, im)`.
    pub fn to_complex(&self) -> Result<(Tensor, Tensor)> {
        Ok((self.amplitude.mul(&self.phase.cos())?, self.amplitude.mul(&self.phase.sin())?))
    }
}

/// Centered DFT of `[.., H, W]` real input in amplitude/phase form.
pub fn fft2_centered(x: &Tensor) -> Result<Spectrum> {
    let (re, im) = fft2c(x)?;
    Ok(Spectrum { amplitude: re.complex_abs(&im)?, phase: im.atan2(&re)? })
}

pub fn ifft2_from_amp_phase(amp: &Tensor, phase: &Tensor) -> Result<Tensor> {
    if amp.shape() != phase.shape() {
        return Err(Error::shape("ifft2_from_amp_phase", format!("{:?} vs {:?}", amp.shape(), phase.shape())));
    }
    ifft2c_real(&amp.mul(&phase.cos())?, &amp.mul(&phase.sin())?)
}

/// Chebyshev distance of a centered bin from DC.
pub fn bin_radius(row: usize, col: usize, h: usize, w: usize) -> usize {
    let dr = (row as isize - (h / 2) as isize).unsigned_abs();
    let dc = (col as isize - (w / 2) as isize).unsigned_abs();
    dr.max(dc)
}

/// Sum of squared amplitude over bins with radius in `[r0, r1)`.
pub fn band_energy(spec: &Spectrum, r0: f64, r1: f64) -> Result<f64> {
    if !(r0 >= 0.0 && r0 < r1) {
        return Err(Error::BadRange { r0, r1 });
    }
    let (h, w) = (spec.height(), spec.width());
    let amp = spec.amplitude.data();
    let mut total = 0.0;
    for (i, a) in amp.iter().enumerate() {
        let cell = i % (h * w);
        let r = bin_radius(cell / w, cell % w, h, w) as f64;
        if r >= r0 && r < r1 {
            total += a * a;
        }
    }
    Ok(total)
}

/// Flat index of the bin holding frequency `-k` for every centered bin.
pub fn conjugate_partner(h: usize, w: usize) -> Vec<usize> {
    let flip = |p: usize, n: usize| (2 * (n / 2) + n - p) % n;
    (0..h * w).map(|i| flip(i / w, h) * w + flip(i % w, w)).collect()
}

/// Projects a centered spectrum onto its Hermitian part, so the inverse
/// transform is real. Works on `[.., H, W]`.
pub fn hermitian_part(re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = plane_dims(re, "hermitian_part")?;
    let shape = re.shape().to_vec();
    let mut flat = shape[..shape.len() - 2].to_vec();
    flat.push(h * w);
    let axis = flat.len() - 1;
    let partner = conjugate_partner(h, w);
    let flip = |t: &Tensor| -> Result<Tensor> { t.reshape(&flat)?.index_select(axis, &partner)?.reshape(&shape) };
    let re_s = re.add(&flip(re)?)?.scale(0.5);
    let im_s = im.sub(&flip(im)?)?.scale(0.5);
    Ok((re_s, im_s))
}

/// Reconstruction keeping the amplitude and dropping the phase.
pub fn amplitude_only(x: &Tensor) -> Result<Tensor> {
    let s = fft2_centered(x)?;
    ifft2_from_amp_phase(&s.amplitude, &Tensor::zeros(s.phase.shape()))
}

/// Reconstruction keeping the phase with unit amplitude.
pub fn phase_only(x: &Tensor) -> Result<Tensor> {
    let s = fft2_centered(x)?;
    ifft2_from_amp_phase(&Tensor::ones(s.amplitude.shape()), &s.phase)
}

/// Pearson correlation of two equally sized maps (0 if either is flat).
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Central-difference gradient magnitude of one `h x w` plane.
pub fn gradient_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| img[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
            let gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Two filled discs on a dark background.
pub fn two_blob_image(h: usize, w: usize) -> Tensor {
    let blobs = [
        (0.30 * h as f64, 0.32 * w as f64, 0.14 * h.min(w) as f64, 1.0),
        (0.66 * h as f64, 0.62 * w as f64, 0.20 * h.min(w) as f64, 0.7),
    ];
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            blobs
                .iter()
                .filter(|(br, bc, rad, _)| (r - br).powi(2) + (c - bc).powi(2) <= rad * rad)
                .map(|b| b.3)
                .sum::<f64>()
        })
        .collect();
    Tensor::new(data, &[h, w]).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-1.0, 1.0).unwrap();
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| d.sample(&mut rng)).collect(), shape).unwrap()
    }

    /// Direct O(n^2) DFT of one plane, centered.
    fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let th = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        sr += x[r * w + c] * th.cos();
                        si += x[r * w + c] * th.sin();
                    }
                }
                let dst = centered(u, h) * w + centered(v, w);
                re[dst] = sr;
                im[dst] = si;
            }
        }
        (re, im)
    }

    #[test]
    fn constant_and_impulse() {
        let s = fft2_centered(&Tensor::full(&[1, 4, 4], 0.5)).unwrap();
        for (i, a) in s.amplitude.data().iter().enumerate() {
            let want = if i == 2 * 4 + 2 { 8.0 } else { 0.0 };
            assert!((a - want).abs() < 1e-12);
        }
        assert_eq!(s.phase.data()[10], 0.0);
        let mut d = vec![0.0; 16];
        d[0] = 1.0;
        let s = fft2_centered(&Tensor::new(d, &[4, 4]).unwrap()).unwrap();
        assert!(s.amplitude.data().iter().all(|a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_direct_dft_for_odd_sizes() {
        for (h, w) in [(3, 5), (4, 6), (1, 7)] {
            let x = rand_tensor(h as u64 * 10 + w as u64, &[h, w]);
            let (re, im) = fft2c(&x).unwrap();
            let (nr, ni) = naive_dft(x.data(), h, w);
            for i in 0..h * w {
                assert!((re.data()[i] - nr[i]).abs() < 1e-10);
                assert!((im.data()[i] - ni[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn roundtrip_parseval_symmetry() {
        let x = rand_tensor(1, &[2, 8, 8]);
        let s = fft2_centered(&x).unwrap();
        let back = ifft2_from_amp_phase(&s.amplitude, &s.phase).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let e_x: f64 = x.data().iter().map(|v| v * v).sum();
        let e_s: f64 = s.amplitude.data().iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!(((e_x - e_s) / e_x).abs() < 1e-9);
        let (re, im) = s.to_complex().unwrap();
        let partner = conjugate_partner(8, 8);
        for p in 0..2 {
            for (i, &j) in partner.iter().enumerate() {
                assert!((re.data()[p * 64 + i] - re.data()[p * 64 + j]).abs() < 1e-9);
                assert!((im.data()[p * 64 + i] + im.data()[p * 64 + j]).abs() < 1e-9);
            }
        }
        assert!(s.phase.data().iter().all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI));
    }

    #[test]
    fn zero_amplitude_gives_zero_image() {
        let z = ifft2_from_amp_phase(&Tensor::zeros(&[4, 4]), &rand_tensor(2, &[4, 4])).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn linearity() {
        let (x, y) = (rand_tensor(3, &[4, 6]), rand_tensor(4, &[4, 6]));
        let combo = x.scale(2.0).add(&y.scale(-0.5)).unwrap();
        let (cr, ci) = fft2c(&combo).unwrap();
        let (xr, xi) = fft2c(&x).unwrap();
        let (yr, yi) = fft2c(&y).unwrap();
        for i in 0..24 {
            assert!((cr.data()[i] - (2.0 * xr.data()[i] - 0.5 * yr.data()[i])).abs() < 1e-12);
            assert!((ci.data()[i] - (2.0 * xi.data()[i] - 0.5 * yi.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn band_energy_cases() {
        let s = fft2_centered(&Tensor::full(&[8, 8], 1.0)).unwrap();
        assert!(band_energy(&s, 1.0, 10.0).unwrap() < 1e-20);
        let x = rand_tensor(5, &[8, 8]);
        let s = fft2_centered(&x).unwrap();
        let total: f64 = s.amplitude.data().iter().map(|a| a * a).sum();
        assert!((band_energy(&s, 0.0, 5.0).unwrap() - total).abs() < 1e-9 * total);
        let checker: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = fft2_centered(&Tensor::new(checker, &[8, 8]).unwrap()).unwrap();
        let top = band_energy(&s, 4.0, 5.0).unwrap();
        assert!((top - 64.0 * 64.0).abs() < 1e-6);
        assert!(band_energy(&s, 0.0, 4.0).unwrap() < 1e-12);
        assert!(matches!(band_energy(&s, 2.0, 2.0), Err(Error::BadRange { .. })));
    }

    #[test]
    fn gradients() {
        let x = rand_tensor(6, &[2, 4, 6]);
        let wr = rand_tensor(7, &[2, 4, 6]);
        let wi = rand_tensor(8, &[2, 4, 6]);
        let f = |x: &Tensor| {
            let (re, im) = fft2c(x)?;
            re.mul(&wr)?.add(&im.mul(&wi)?).map(|t| t.sum_all())
        };
        assert!(gradcheck(f, &x, 1e-5).unwrap() < 1e-8);
        let g = |re: &Tensor| ifft2c_real(re, &wi)?.mul(&wr).map(|t| t.sum_all());
        assert!(gradcheck(g, &x, 1e-5).unwrap() < 1e-8);
        let g = |im: &Tensor| ifft2c_real(&wi, im)?.mul(&wr).map(|t| t.sum_all());
        assert!(gradcheck(g, &x, 1e-5).unwrap() < 1e-8);
        let polar = |x: &Tensor| {
            let s = fft2_centered(x)?;
            ifft2_from_amp_phase(&s.amplitude.scale(1.1), &s.phase)?.mul(&wr).map(|t| t.sum_all())
        };
        assert!(gradcheck(polar, &x, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn hermitian_part_makes_output_real() {
        let re = rand_tensor(9, &[5, 6]);
        let im = rand_tensor(10, &[5, 6]);
        let (rs, is) = hermitian_part(&re, &im).unwrap();
        let partner = conjugate_partner(5, 6);
        for (i, &j) in partner.iter().enumerate() {
            assert!((rs.data()[i] - rs.data()[j]).abs() < 1e-15);
            assert!((is.data()[i] + is.data()[j]).abs() < 1e-15);
        }
        // real signal spectra are already Hermitian
        let x = rand_tensor(11, &[5, 6]);
        let (xr, xi) = fft2c(&x).unwrap();
        let (hr, hi) = hermitian_part(&xr, &xi).unwrap();
        for i in 0..30 {
            assert!((hr.data()[i] - xr.data()[i]).abs() < 1e-12);
            assert!((hi.data()[i] - xi.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_carries_layout() {
        let img = two_blob_image(64, 64);
        let g0 = gradient_magnitude(img.data(), 64, 64);
        let ph = phase_only(&img).unwrap();
        let am = amplitude_only(&img).unwrap();
        let g_ph = gradient_magnitude(ph.data(), 64, 64);
        let g_am = gradient_magnitude(am.data(), 64, 64);
        assert!(correlation(&g0, &g_ph) > 0.5, "{}", correlation(&g0, &g_ph));
        assert!(correlation(&g0, &g_am) < 0.3, "{}", correlation(&g0, &g_am));
        assert!(correlation(img.data(), am.data()) < 0.3);
    }
}
