//! Diagonal selective state space kernel.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h + D x` with a diagonal,
//! strictly negative `A`, discretized per token by zero-order hold:
//!
//! ```text
//! A_bar = exp(dt * A)
//! B_bar = (dt * A)^-1 (exp(dt * A) - 1) * dt * B = dt * phi(dt * A) * B
//! ```
//!
//! where `phi(z) = expm1(z) / z`. The scan runs the recurrence in
//! `O(L * C * N)` and differentiates it with a hand-written reverse sweep.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::{const_param, Linear, Module, Params};
use crate::tensor::{is_grad_enabled, Tensor};

pub const DEFAULT_STATE: usize = 8;
const DT_MIN: f64 = 0.01;
const DT_MAX: f64 = 0.1;

/// `(A_bar, phi)` from a single `expm1`.
fn decay_phi(z: f64) -> (f64, f64) {
    let em = z.exp_m1();
    let phi = if z.abs() < 1e-8 { 1.0 + 0.5 * z } else { em / z };
    (1.0 + em, phi)
}

fn phi_prime(z: f64, abar: f64) -> f64 {
    if z.abs() < 1e-3 {
        let z2 = z * z;
        0.5 + z / 3.0 + z2 / 8.0 + z2 * z / 30.0 + z2 * z2 / 144.0
    } else {
        (z * abar - (abar - 1.0)) / (z * z)
    }
}

/// Scalar zero-order hold: returns `(A_bar, B_bar)`.
pub fn zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::NonPositiveDelta(delta));
    }
    let (abar, phi) = decay_phi(delta * a);
    Ok((abar, delta * phi * b))
}

/// Per-token discretization laid out as `[L, C, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteParams {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `a: [C, N]`, `b: [L, N]`, `delta: [L, C]`.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<DiscreteParams> {
    let (c, n, l) = match (a.shape(), b.shape(), delta.shape()) {
        (&[c, n], &[l, n2], &[l2, c2]) if n == n2 && l == l2 && c == c2 => (c, n, l),
        _ => {
            return Err(Error::shape(
                "discretize_zoh",
                format!("A {:?}, B {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()),
            ))
        }
    };
    let mut a_bar = Vec::with_capacity(l * c * n);
    let mut b_bar = Vec::with_capacity(l * c * n);
    for t in 0..l {
        for ch in 0..c {
            for s in 0..n {
                let (ab, bb) = zoh(a.data()[ch * n + s], b.data()[t * n + s], delta.data()[t * c + ch])?;
                a_bar.push(ab);
                b_bar.push(bb);
            }
        }
    }
    Ok(DiscreteParams { len: l, channels: c, state: n, a_bar, b_bar })
}

/// Recurrence over already-discretized parameters, `u: [L, C]`,
/// `c: [L, N]`, `d: [C]`. Not differentiable; used for probes with forced
/// `A_bar` / `B_bar`.
pub fn scan_discrete(u: &[f64], p: &DiscreteParams, c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let (l, ch, n) = (p.len, p.channels, p.state);
    if l == 0 {
        return Err(Error::EmptySequence);
    }
    if u.len() != l * ch || c.len() != l * n || d.len() != ch {
        return Err(Error::shape("scan_discrete", "operand lengths"));
    }
    let mut h = vec![0.0; ch * n];
    let mut y = vec![0.0; l * ch];
    for t in 0..l {
        for k in 0..ch {
            let x = u[t * ch + k];
            let mut acc = d[k] * x;
            for s in 0..n {
                let i = (t * ch + k) * n + s;
                h[k * n + s] = p.a_bar[i] * h[k * n + s] + p.b_bar[i] * x;
                acc += c[t * n + s] * h[k * n + s];
            }
            y[t * ch + k] = acc;
        }
    }
    Ok(y)
}

/// Continuous-time operands of [`selective_scan`]. With a batch dim of
/// size `B`: `delta: [B, L, C]`, `b`/`c`: `[B, L, N]`; without it the
/// leading dim is dropped. `a: [C, N]` (negative), `d: [C]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub delta: &'a Tensor,
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub c: &'a Tensor,
    pub d: &'a Tensor,
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    len: usize,
    ch: usize,
    n: usize,
}

fn scan_dims(u: &Tensor, p: &ScanInputs) -> Result<Dims> {
    let (batch, len, ch) = match *u.shape() {
        [l, c] => (1, l, c),
        [b, l, c] => (b, l, c),
        _ => return Err(Error::shape("selective_scan", format!("u {:?}", u.shape()))),
    };
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let n = match *p.a.shape() {
        [c, n] if c == ch => n,
        _ => return Err(Error::shape("selective_scan", format!("A {:?} for {ch} channels", p.a.shape()))),
    };
    let lead = &u.shape()[..u.rank() - 1];
    let want_bc: Vec<usize> = lead.iter().copied().chain([n]).collect();
    if p.delta.shape() != u.shape()
        || p.b.shape() != want_bc.as_slice()
        || p.c.shape() != want_bc.as_slice()
        || p.d.shape() != [ch]
    {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, delta {:?}, B {:?}, C {:?}, D {:?}",
                u.shape(),
                p.delta.shape(),
                p.b.shape(),
                p.c.shape(),
                p.d.shape()
            ),
        ));
    }
    if let Some(&bad) = p.delta.data().iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(Error::NonPositiveDelta(bad));
    }
    Ok(Dims { batch, len, ch, n })
}

/// Fused discretize-and-scan with `h_0 = 0`:
/// `h_t = A_bar_t h_{t-1} + B_bar_t u_t`, `y_t = C_t h_t + D u_t`.
pub fn selective_scan(u: &Tensor, p: ScanInputs<'_>) -> Result<Tensor> {
    let dims = scan_dims(u, &p)?;
    let Dims { batch, len, ch, n } = dims;
    let track = is_grad_enabled() && [u, p.delta, p.a, p.b, p.c, p.d].iter().any(|t| t.tracks_grad());
    let (ud, dt, ad, bd, cd, dd) = (u.data(), p.delta.data(), p.a.data(), p.b.data(), p.c.data(), p.d.data());

    let mut y = vec![0.0; batch * len * ch];
    let mut hist = if track { vec![0.0; batch * len * ch * n] } else { Vec::new() };
    let mut h = vec![0.0; ch * n];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let row = bi * len + t;
            let bt = &bd[row * n..(row + 1) * n];
            let ct = &cd[row * n..(row + 1) * n];
            for k in 0..ch {
                let x = ud[row * ch + k];
                let delta = dt[row * ch + k];
                let hk = &mut h[k * n..(k + 1) * n];
                let mut acc = dd[k] * x;
                for s in 0..n {
                    let (abar, phi) = decay_phi(delta * ad[k * n + s]);
                    hk[s] = abar * hk[s] + delta * phi * bt[s] * x;
                    acc += ct[s] * hk[s];
                }
                y[row * ch + k] = acc;
                if track {
                    hist[(row * ch + k) * n..(row * ch + k + 1) * n].copy_from_slice(hk);
                }
            }
        }
    }

    let saved = [u, p.delta, p.a, p.b, p.c, p.d].map(|t| t.clone());
    Ok(Tensor::from_op("selective_scan", y, u.shape().to_vec(), &[u, p.delta, p.a, p.b, p.c, p.d], move |gy, _| {
        scan_backward(dims, &saved, &hist, gy)
    }))
}

fn scan_backward(dims: Dims, saved: &[Tensor; 6], hist: &[f64], gy: &[f64]) -> Vec<Option<Vec<f64>>> {
    let Dims { batch, len, ch, n } = dims;
    let [u, delta, a, b, c, d] = saved;
    let (ud, dt, ad, bd, cd, dd) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut gu = vec![0.0; ud.len()];
    let mut gdelta = vec![0.0; dt.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gd = vec![0.0; dd.len()];
    // carry[k, s] = A_bar_{t+1} * dL/dh_{t+1}
    let mut carry = vec![0.0; ch * n];
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let row = bi * len + t;
            for k in 0..ch {
                let i = row * ch + k;
                let (x, dl, g) = (ud[i], dt[i], gy[i]);
                let h_t = &hist[i * n..(i + 1) * n];
                let h_prev = (t > 0).then(|| &hist[(i - ch) * n..(i - ch + 1) * n]);
                let mut gu_acc = g * dd[k];
                gd[k] += g * x;
                let mut gdl = 0.0;
                for s in 0..n {
                    let av = ad[k * n + s];
                    let bv = bd[row * n + s];
                    let z = dl * av;
                    let (abar, ph) = decay_phi(z);
                    let gh = g * cd[row * n + s] + carry[k * n + s];
                    gc[row * n + s] += g * h_t[s];
                    gu_acc += gh * dl * ph * bv;
                    let g_abar = h_prev.map_or(0.0, |hp| gh * hp[s]);
                    let g_bbar = gh * x;
                    let gz = g_abar * abar + g_bbar * dl * phi_prime(z, abar) * bv;
                    gdl += gz * av + g_bbar * ph * bv;
                    ga[k * n + s] += gz * dl;
                    gb[row * n + s] += g_bbar * dl * ph;
                    carry[k * n + s] = abar * gh;
                }
                gu[i] = gu_acc;
                gdelta[i] = gdl;
            }
        }
    }
    let grads = [gu, gdelta, ga, gb, gc, gd];
    saved.iter().zip(grads).map(|(t, g)| t.tracks_grad().then_some(g)).collect()
}

/// Selective (S6) layer: `delta`, `B` and `C` are projected from each
/// token. Works on `[L, C]` or `[B, L, C]`.
pub struct S6 {
    /// `log(-A)`, shape `[C, N]`.
    pub a_log: Tensor,
    pub d: Tensor,
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl S6 {
    pub fn new(rng: &mut impl Rng, channels: usize, state: usize) -> Self {
        let a_log = (0..channels).flat_map(|_| (1..=state).map(|s| (s as f64).ln())).collect();
        let mut delta_proj = Linear::new(rng, channels, channels, true);
        let log_dt = Uniform::new(DT_MIN.ln(), DT_MAX.ln()).expect("valid range");
        let bias: Vec<f64> = (0..channels).map(|_| inverse_softplus(log_dt.sample(rng).exp())).collect();
        delta_proj.bias = Some(Tensor::param(bias, &[channels]).expect("bias shape"));
        Self {
            a_log: Tensor::param(a_log, &[channels, state]).expect("A shape"),
            d: const_param(&[channels], 1.0),
            delta_proj,
            b_proj: Linear::new(rng, channels, state, false),
            c_proj: Linear::new(rng, channels, state, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.exp().neg()
    }

    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        let delta = self.delta_proj.forward(seq)?.softplus();
        let b = self.b_proj.forward(seq)?;
        let c = self.c_proj.forward(seq)?;
        let a = self.a();
        selective_scan(seq, ScanInputs { delta: &delta, a: &a, b: &b, c: &c, d: &self.d })
    }
}

impl Module for S6 {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.param("a_log", &mut self.a_log);
        p.param("d", &mut self.d);
        p.child("delta_proj", &mut self.delta_proj);
        p.child("b_proj", &mut self.b_proj);
        p.child("c_proj", &mut self.c_proj);
    }
}

pub fn s6_forward(layer: &S6, seq: &Tensor) -> Result<Tensor> {
    layer.forward(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, no_grad};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Uniform::new(lo, hi).unwrap();
        Tensor::new((0..n).map(|_| dist.sample(rng)).collect(), shape).unwrap()
    }

    /// y_t = sum_{k<=t} C_t (prod_{j=k+1..t} A_bar_j) B_bar_k x_k + D x_t
    fn naive(u: &Tensor, p: &ScanInputs) -> Vec<f64> {
        let (l, ch) = (u.shape()[0], u.shape()[1]);
        let n = p.a.shape()[1];
        let abar = |t: usize, k: usize, s: usize| (p.delta.data()[t * ch + k] * p.a.data()[k * n + s]).exp();
        let bbar = |t: usize, k: usize, s: usize| {
            let dl = p.delta.data()[t * ch + k];
            let av = p.a.data()[k * n + s];
            dl * (dl * av).exp_m1() / (dl * av) * p.b.data()[t * n + s]
        };
        let mut y = vec![0.0; l * ch];
        for t in 0..l {
            for k in 0..ch {
                let mut acc = p.d.data()[k] * u.data()[t * ch + k];
                for s in 0..n {
                    for j in 0..=t {
                        let decay: f64 = (j + 1..=t).map(|i| abar(i, k, s)).product();
                        acc += p.c.data()[t * n + s] * decay * bbar(j, k, s) * u.data()[j * ch + k];
                    }
                }
                y[t * ch + k] = acc;
            }
        }
        y
    }

    fn random_inputs(rng: &mut ChaCha8Rng, l: usize, c: usize, n: usize) -> [Tensor; 6] {
        [
            rand_tensor(rng, &[l, c], -1.0, 1.0),
            rand_tensor(rng, &[l, c], 0.01, 0.5),
            rand_tensor(rng, &[c, n], -2.0, -0.1),
            rand_tensor(rng, &[l, n], -1.0, 1.0),
            rand_tensor(rng, &[l, n], -1.0, 1.0),
            rand_tensor(rng, &[c], -1.0, 1.0),
        ]
    }

    fn inputs(t: &[Tensor; 6]) -> ScanInputs<'_> {
        ScanInputs { delta: &t[1], a: &t[2], b: &t[3], c: &t[4], d: &t[5] }
    }

    #[test]
    fn zoh_closed_form() {
        let (ab, bb) = zoh(-1.0, 3.0, 2f64.ln()).unwrap();
        assert!((ab - 0.5).abs() < 1e-15);
        assert!((bb - 1.5).abs() < 1e-15);
        let (ab, bb) = zoh(0.0, 3.0, 0.2).unwrap();
        assert_eq!(ab, 1.0);
        assert!((bb - 0.6).abs() < 1e-15);
        let (ab, bb) = zoh(-1.0, 3.0, 1e-12).unwrap();
        assert!((ab - 1.0).abs() < 1e-11 && bb.abs() < 1e-11);
        assert!(matches!(zoh(-1.0, 1.0, 0.0), Err(Error::NonPositiveDelta(_))));
    }

    #[test]
    fn phi_branches_agree() {
        for z in [-2e-3, -1.0001e-3, -0.99e-3, 0.99e-3, 1.01e-3] {
            let h = 1e-6;
            let numeric = (decay_phi(z + h).1 - decay_phi(z - h).1) / (2.0 * h);
            assert!((phi_prime(z, decay_phi(z).0) - numeric).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_inputs(&mut rng, 1, 2, 3);
        let y = selective_scan(&t[0], inputs(&t)).unwrap();
        let dp = discretize_zoh(&t[2], &t[3], &t[1]).unwrap();
        for k in 0..2 {
            let x = t[0].data()[k];
            let want: f64 = (0..3).map(|s| t[4].data()[s] * dp.b_bar[k * 3 + s] * x).sum::<f64>() + t[5].data()[k] * x;
            assert!((y.data()[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn memoryless_when_decay_forced_to_zero() {
        let (l, n) = (4, 2);
        let p = DiscreteParams { len: l, channels: 1, state: n, a_bar: vec![0.0; l * n], b_bar: vec![0.7; l * n] };
        let u = [1.0, -2.0, 0.5, 3.0];
        let c = vec![0.5; l * n];
        let y = scan_discrete(&u, &p, &c, &[0.25]).unwrap();
        for t in 0..l {
            assert!((y[t] - (2.0 * 0.5 * 0.7 * u[t] + 0.25 * u[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_inputs(&mut rng, 32, 2, 4);
        let y = selective_scan(&t[0], inputs(&t)).unwrap();
        let want = naive(&t[0], &inputs(&t));
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let dp = discretize_zoh(&t[2], &t[3], &t[1]).unwrap();
        let y2 = scan_discrete(t[0].data(), &dp, t[4].data(), t[5].data()).unwrap();
        for (a, b) in y.data().iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_equals_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_inputs(&mut rng, 5, 2, 3);
        let b = random_inputs(&mut rng, 5, 2, 3);
        let stack = |i: usize| Tensor::stack(&[&a[i], &b[i]], 0).unwrap();
        let (u, dl, bb, cc) = (stack(0), stack(1), stack(3), stack(4));
        let y = selective_scan(&u, ScanInputs { delta: &dl, a: &a[2], b: &bb, c: &cc, d: &a[5] }).unwrap();
        let b_own = [b[0].clone(), b[1].clone(), a[2].clone(), b[3].clone(), b[4].clone(), a[5].clone()];
        let ya = selective_scan(&a[0], inputs(&a)).unwrap();
        let yb = selective_scan(&b[0], inputs(&b_own)).unwrap();
        assert_eq!(&y.data()[..10], ya.data());
        assert_eq!(&y.data()[10..], yb.data());
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = random_inputs(&mut rng, 3, 2, 2);
        t[1] = Tensor::new(vec![0.1, 0.1, 0.0, 0.1, 0.1, 0.1], &[3, 2]).unwrap();
        assert!(matches!(selective_scan(&t[0], inputs(&t)), Err(Error::NonPositiveDelta(_))));
        let e = random_inputs(&mut rng, 0, 2, 2);
        assert!(matches!(selective_scan(&e[0], inputs(&e)), Err(Error::EmptySequence)));
        let t = random_inputs(&mut rng, 3, 2, 2);
        let wrong = Tensor::ones(&[3]);
        let mut p = inputs(&t);
        p.d = &wrong;
        assert!(matches!(selective_scan(&t[0], p), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_of_every_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_inputs(&mut rng, 6, 2, 3);
        let w = rand_tensor(&mut rng, &[6, 2], -1.0, 1.0);
        for which in 0..6 {
            let f = |x: &Tensor| {
                let mut ops = t.clone();
                ops[which] = x.clone();
                selective_scan(&ops[0], inputs(&ops))?.mul(&w).map(|y| y.sum_all())
            };
            let err = gradcheck(f, &t[which], 1e-5).unwrap();
            assert!(err < 1e-7, "operand {which}: {err}");
        }
    }

    #[test]
    fn s6_init_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s6 = S6::new(&mut rng, 4, DEFAULT_STATE);
        assert!(s6.a().data().iter().all(|&v| v < 0.0));
        for (got, want) in s6.a().data()[..3].iter().zip([-1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for &b in s6.delta_proj.bias.as_ref().unwrap().data() {
            let dt = crate::tensor::Tensor::scalar(b).softplus().item();
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt));
        }
        let zero = no_grad(|| s6.forward(&Tensor::zeros(&[5, 4]))).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn s6_prefix_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s6 = S6::new(&mut rng, 3, 4);
        let u = rand_tensor(&mut rng, &[16, 3], -1.0, 1.0);
        let full = s6.forward(&u).unwrap();
        let head = s6.forward(&u.narrow(0, 0, 7).unwrap()).unwrap();
        assert_eq!(&full.data()[..21], head.data());
        let c = Tensor::ones(&[6, 3]);
        let one = s6.forward(&c.narrow(0, 0, 1).unwrap()).unwrap();
        assert_eq!(&s6.forward(&c).unwrap().data()[..3], one.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn causal(seed in any::<u64>(), cut in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_inputs(&mut rng, 10, 2, 3);
            let y = selective_scan(&t[0], inputs(&t)).unwrap();
            let mut bumped = t[0].to_vec();
            for v in &mut bumped[cut * 2..] {
                *v += 1.0;
            }
            let mut t2 = t.clone();
            t2[0] = Tensor::new(bumped, &[10, 2]).unwrap();
            let y2 = selective_scan(&t2[0], inputs(&t2)).unwrap();
            prop_assert_eq!(&y.data()[..cut * 2], &y2.data()[..cut * 2]);
        }

        #[test]
        fn linear_in_u_at_frozen_params(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_inputs(&mut rng, 8, 2, 3);
            let y = selective_scan(&t[0], inputs(&t)).unwrap();
            let mut t2 = t.clone();
            t2[0] = t[0].scale(alpha);
            let y2 = selective_scan(&t2[0], inputs(&t2)).unwrap();
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!((alpha * a - b).abs() < 1e-12);
            }
        }
    }
}
