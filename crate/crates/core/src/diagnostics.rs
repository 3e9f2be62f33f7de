//! Finite-difference gradient checks for every block at tiny sizes, with
//! respect to both the block input and a sample of its parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{mfm_forward, Afe, AfeScan, Dse, DualDomainFusion, Flmp, Rfvss, Slmp};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, total_loss};
use crate::model::{ModelConfig, Variant, Vcamba};
use crate::nn::{clear_grads, named_parameters, set_parameter, Module, Params};
use crate::tensor::{gradcheck_coords, no_grad, Tensor};

pub const BLOCKS: [&str; 9] = ["rfvss", "dse", "afe", "slmp", "flmp", "mfm", "sfmf", "loss", "model"];
/// Central-difference step for input gradients.
pub const STEP: f64 = 1e-5;
/// Step for the parameter probe. The tiny two-channel model is curved
/// enough that truncation error at [`STEP`] reaches 1e-2 on some
/// parameters while the estimate still converges to the analytic value.
pub const PARAM_STEP: f64 = 1e-7;
/// Parameter coordinates probed per parameter tensor.
const COORDS_PER_PARAM: usize = 2;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-scale..scale)).collect(), shape).expect("length matches")
}

/// Moves every parameter off its init so zero-initialized projections do
/// not hide paths from the check.
pub fn jitter(m: &mut dyn Module, rng: &mut ChaCha8Rng, scale: f64) {
    let mut f = |_: &str, t: &mut Tensor| {
        let v: Vec<f64> = t.data().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
        *t = Tensor::param(v, t.shape()).expect("same shape");
    };
    m.visit(&mut Params::new(&mut f));
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Worst relative error over sampled coordinates of every parameter.
pub fn param_gradcheck<M: Module>(m: &mut M, f: impl Fn(&M) -> Result<Tensor>, rng: &mut ChaCha8Rng) -> Result<f64> {
    clear_grads(m);
    let loss = f(m)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let params = named_parameters(m);
    let mut worst: f64 = 0.0;
    for (name, t) in &params {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        t.clear_grad();
        let base = t.to_vec();
        for _ in 0..COORDS_PER_PARAM.min(t.numel()) {
            let i = rng.random_range(0..t.numel());
            let mut eval = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[i] += delta;
                set_parameter(m, name, &Tensor::new(d, t.shape())?)?;
                no_grad(|| f(m)).map(|v| v.item())
            };
            let numeric = (eval(PARAM_STEP)? - eval(-PARAM_STEP)?) / (2.0 * PARAM_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
        set_parameter(m, name, &Tensor::new(base, t.shape())?)?;
    }
    Ok(worst)
}

/// Worst relative errors of one block check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Gradient with respect to the block input.
    pub input: f64,
    /// Sampled parameter coordinates, differenced at [`PARAM_STEP`].
    pub params: f64,
}

impl GradReport {
    fn max(self, o: GradReport) -> GradReport {
        GradReport { input: self.input.max(o.input), params: self.params.max(o.params) }
    }
}

/// Input and parameter errors for a block reduced to a scalar by a fixed
/// random weighting of its output.
fn check_block<M: Module>(
    m: &mut M,
    forward: impl Fn(&M, &Tensor) -> Result<Tensor>,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<GradReport> {
    let probe = {
        let y = no_grad(|| forward(m, x))?;
        uniform(rng, y.shape(), 1.0)
    };
    let scalar = |m: &M, x: &Tensor| -> Result<Tensor> { Ok(forward(m, x)?.mul(&probe)?.sum_all()) };
    let all: Vec<usize> = (0..x.numel()).collect();
    let input = gradcheck_coords(|x| scalar(m, x), x, STEP, &all)?;
    let params = param_gradcheck(m, |m| scalar(m, x), rng)?;
    Ok(GradReport { input, params })
}

/// Worst relative gradient error for the named block (see [`BLOCKS`]).
/// Blocks run at `C = 2`, `2 x 4 x 4` frames; `model` runs end to end at
/// `C = 2`, `H = W = 16`, `N = 2`.
pub fn block_gradcheck(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, state) = (2, 3);
    let x = uniform(&mut rng, &[2, dim, 4, 4], 1.0);
    let other = uniform(&mut rng, &[2, dim, 4, 4], 1.0);
    macro_rules! run {
        ($block:expr, $fwd:expr) => {{
            let mut b = $block;
            jitter(&mut b, &mut rng, 0.3);
            check_block(&mut b, $fwd, &x, &mut rng)
        }};
    }
    match name {
        "rfvss" => run!(Rfvss::new(&mut rng, dim, state), |b: &Rfvss, x: &Tensor| b.forward(x)),
        "dse" => run!(Dse::new(&mut rng, dim), |b: &Dse, x: &Tensor| b.forward(x)),
        "afe" => run!(Afe::new(&mut rng, dim, state, AfeScan::Spiral), |b: &Afe, x: &Tensor| b.forward(x)),
        "slmp" => run!(Slmp::new(&mut rng, dim, state), |b: &Slmp, x: &Tensor| b.forward(x)),
        "flmp" => run!(Flmp::new(&mut rng, dim, state), |b: &Flmp, x: &Tensor| b.forward(x)),
        "sfmf" => {
            let a = run!(DualDomainFusion::new(&mut rng, dim, state), |b: &DualDomainFusion, x: &Tensor| b
                .forward(x, &other))?;
            let b = run!(DualDomainFusion::new(&mut rng, dim, state), |b: &DualDomainFusion, x: &Tensor| b
                .forward(&other, x))?;
            Ok(a.max(b))
        }
        "mfm" => {
            let single = x.narrow(0, 0, 1)?.reshape(&[dim, 4, 4])?;
            let fixed = other.narrow(0, 0, 1)?.reshape(&[dim, 4, 4])?;
            let mut b = DualDomainFusion::new(&mut rng, dim, state);
            jitter(&mut b, &mut rng, 0.3);
            let ea = check_block(&mut b, |b, a| mfm_forward(b, a, &fixed), &single, &mut rng)?;
            let eb = check_block(&mut b, |b, v| mfm_forward(b, &fixed, v), &single, &mut rng)?;
            Ok(ea.max(eb))
        }
        "loss" => {
            let p = Tensor::new((0..64).map(|_| rng.random_range(0.05..0.95)).collect(), &[8, 8])?;
            let g = Tensor::new(
                (0..64).map(|i| f64::from(u8::from((2..6).contains(&(i / 8)) && (3..7).contains(&(i % 8))))).collect(),
                &[8, 8],
            )?;
            let all: Vec<usize> = (0..64).collect();
            let input = gradcheck_coords(|p| hybrid_loss(p, &g), &p, STEP, &all)?;
            Ok(GradReport { input, params: 0.0 })
        }
        "model" => model_gradcheck(seed),
        _ => Err(Error::Config(format!("unknown block `{name}`; expected one of {}", BLOCKS.join(", ")))),
    }
}

/// End-to-end check of the summed pyramid loss through the model as
/// initialized, over every input coordinate. Unlike the block checks this
/// does not jitter the weights: with two channels a channel layer norm is a
/// steep sign function wherever a token's two channels nearly coincide, and
/// random perturbations readily land within a step size of such a point.
pub fn model_gradcheck(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let cfg = ModelConfig { frames: 2, height: 16, width: 16, channels: [2, 2, 2, 2], state: 2 };
    let mut model = Vcamba::new(cfg, Variant::Full, seed)?;
    let clip = Tensor::new((0..2 * 3 * 16 * 16).map(|_| rng.random::<f64>()).collect(), &[2, 3, 16, 16])?;
    let gts = Tensor::new(
        (0..2 * 16 * 16)
            .map(|i| f64::from(u8::from((4..10).contains(&((i % 256) / 16)) && (5..12).contains(&(i % 16)))))
            .collect(),
        &[2, 1, 16, 16],
    )?;
    let coords: Vec<usize> = (0..clip.numel()).collect();
    let input = gradcheck_coords(|c| total_loss(&model.forward(c)?.levels, &gts), &clip, STEP, &coords)?;
    let params = param_gradcheck(&mut model, |m| total_loss(&m.forward(&clip)?.levels, &gts), &mut rng)?;
    Ok(GradReport { input, params })
}
