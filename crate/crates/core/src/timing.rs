//! Wall-clock scaling of the selective scan against a quadratic softmax
//! attention baseline.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{selective_scan, ScanInputs};
use crate::tensor::{no_grad, Tensor};

pub const BENCH_CHANNELS: usize = 4;
pub const BENCH_STATE: usize = 8;
pub const BENCH_HEAD_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    S6,
    Attention,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s6" => Ok(Kernel::S6),
            "attention" => Ok(Kernel::Attention),
            _ => Err(Error::Config(format!("unknown kernel `{s}` (s6 or attention)"))),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::S6 => "s6",
            Kernel::Attention => "attention",
        })
    }
}

/// Query rows sharing one pass over a key tile.
const QUERY_ROWS: usize = 8;
/// Keys per tile; a tile of keys and values stays in L1.
const KEY_TILE: usize = 256;

/// Single-head softmax attention with an online softmax over key tiles:
/// `O(L^2 D)` time, `O(1)` extra memory per query. `q`, `k`, `v` are
/// `[L, D]` row-major.
pub fn softmax_attention<const D: usize>(q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
    let len = q.len() / D;
    assert!(k.len() == len * D && v.len() == len * D, "q, k, v must all be [L, {D}]");
    let scale = 1.0 / (D as f64).sqrt();
    let mut out = vec![0.0; len * D];
    let mut scores = [0.0; KEY_TILE];
    for (qb, ob) in q.chunks(QUERY_ROWS * D).zip(out.chunks_mut(QUERY_ROWS * D)) {
        let mut max = [f64::NEG_INFINITY; QUERY_ROWS];
        let mut denom = [0.0; QUERY_ROWS];
        let mut acc = [[0.0; D]; QUERY_ROWS];
        for (kt, vt) in k.chunks(KEY_TILE * D).zip(v.chunks(KEY_TILE * D)) {
            for (r, qi) in qb.chunks_exact(D).enumerate() {
                let mut m = max[r];
                for (s, kj) in scores.iter_mut().zip(kt.chunks_exact(D)) {
                    *s = (0..D).map(|c| qi[c] * kj[c]).sum::<f64>() * scale;
                    m = m.max(*s);
                }
                // rescale what was accumulated under the previous max
                let corr = (max[r] - m).exp();
                max[r] = m;
                let mut d = denom[r] * corr;
                let mut a = acc[r].map(|x| x * corr);
                for (s, vj) in scores.iter().zip(vt.chunks_exact(D)) {
                    let e = (s - m).exp();
                    d += e;
                    for c in 0..D {
                        a[c] += e * vj[c];
                    }
                }
                denom[r] = d;
                acc[r] = a;
            }
        }
        for ((o, a), d) in ob.chunks_exact_mut(D).zip(acc).zip(denom) {
            for c in 0..D {
                o[c] = a[c] / d;
            }
        }
    }
    out
}

/// Random selective-scan inputs at the bench dimensions.
pub struct ScanCase {
    u: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("length matches")
}

impl ScanCase {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, n) = (BENCH_CHANNELS, BENCH_STATE);
        ScanCase {
            u: random(&mut rng, &[len, ch], -1.0, 1.0),
            delta: random(&mut rng, &[len, ch], 0.01, 0.1),
            a: random(&mut rng, &[ch, n], -2.0, -0.5),
            b: random(&mut rng, &[len, n], -1.0, 1.0),
            c: random(&mut rng, &[len, n], -1.0, 1.0),
            d: random(&mut rng, &[ch], -1.0, 1.0),
        }
    }

    /// Forward scan without recording a tape.
    pub fn run(&self) -> Result<Tensor> {
        no_grad(|| {
            selective_scan(&self.u, ScanInputs { delta: &self.delta, a: &self.a, b: &self.b, c: &self.c, d: &self.d })
        })
    }
}

/// Random `q`, `k`, `v` of shape `[len, BENCH_HEAD_DIM]`.
pub fn attention_case(len: usize, seed: u64) -> [Vec<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = || (0..len * BENCH_HEAD_DIM).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    [mk(), mk(), mk()]
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => samples[n / 2],
        _ => 0.5 * (samples[n / 2 - 1] + samples[n / 2]),
    }
}

/// Median seconds per call over `reps` timed calls, after one warm-up.
pub fn time_kernel(kernel: Kernel, len: usize, reps: usize, seed: u64) -> Result<f64> {
    if len == 0 || reps == 0 {
        return Err(Error::Config("length and repetitions must be positive".into()));
    }
    let mut samples = Vec::with_capacity(reps);
    match kernel {
        Kernel::S6 => {
            let s = ScanCase::new(len, seed);
            black_box(s.run()?);
            for _ in 0..reps {
                let t = Instant::now();
                black_box(s.run()?);
                samples.push(t.elapsed().as_secs_f64());
            }
        }
        Kernel::Attention => {
            let [q, k, v] = attention_case(len, seed);
            black_box(softmax_attention::<BENCH_HEAD_DIM>(&q, &k, &v));
            for _ in 0..reps {
                let t = Instant::now();
                black_box(softmax_attention::<BENCH_HEAD_DIM>(black_box(&q), &k, &v));
                samples.push(t.elapsed().as_secs_f64());
            }
        }
    }
    Ok(median(&mut samples))
}

/// Powers of two from `lmin` to `lmax` inclusive.
pub fn doubling_lengths(lmin: usize, lmax: usize) -> Result<Vec<usize>> {
    if lmin == 0 || lmin > lmax {
        return Err(Error::Config(format!("bad length range {lmin}..{lmax}")));
    }
    Ok(std::iter::successors(Some(lmin), |&l| l.checked_mul(2)).take_while(|&l| l <= lmax).collect())
}

/// `(L, median seconds)` for each length.
pub fn bench(kernel: Kernel, lengths: &[usize], reps: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    lengths.iter().map(|&l| Ok((l, time_kernel(kernel, l, reps, seed)?))).collect()
}

/// Ratio of consecutive medians.
pub fn ratios(rows: &[(usize, f64)]) -> Vec<f64> {
    rows.windows(2).map(|w| w[1].1 / w[0].1).collect()
}
