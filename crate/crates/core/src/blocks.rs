//! Network blocks. Frame stacks are `[N, C, H, W]`; selective scans run on
//! token-major `[B, L, C]` sequences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::freq::{fft2_centered, fft2c, hermitian_part, ifft2_from_amp_phase, ifft2c_real};
use crate::nn::{from_tokens, to_tokens, Conv2d, Ffn, LayerNorm, Linear, Module, Params};
use crate::scan::{
    cross_scan_paths, dual_domain_paths, spatiotemporal_paths, spiral_scan_path, ScanPath, SpiralDirection,
};
use crate::ssm::S6;
use crate::tensor::{Conv2dSpec, Tensor};

pub const RF_KERNELS: [usize; 4] = [1, 3, 5, 7];
pub const RF_EXPANSION: usize = 4;

fn dims4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N, C, H, W], got {:?}", x.shape()))),
    }
}

fn need_frames(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::TooFewFrames(n))
    } else {
        Ok(())
    }
}

/// Runs one S6 per path over `tokens: [B, L, C]` and returns each output
/// restored to grid order.
pub fn scan_branches(layers: &[S6], paths: &[ScanPath], tokens: &Tensor) -> Result<Vec<Tensor>> {
    if layers.len() != paths.len() {
        return Err(Error::shape("scan_branches", format!("{} layers, {} paths", layers.len(), paths.len())));
    }
    layers.iter().zip(paths).map(|(s6, path)| path.restore(&s6.forward(&path.serialize(tokens, 1)?)?, 1)).collect()
}

fn sum_all(ts: &[Tensor]) -> Result<Tensor> {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

fn s6_stack(rng: &mut impl Rng, count: usize, channels: usize, state: usize) -> Vec<S6> {
    (0..count).map(|_| S6::new(rng, channels, state)).collect()
}

fn visit_list<M: Module>(p: &mut Params<'_>, name: &str, items: &mut [M]) {
    for (i, m) in items.iter_mut().enumerate() {
        p.child(&format!("{name}{i}"), m);
    }
}

fn out_projection(rng: &mut impl Rng, dim: usize) -> Linear {
    let mut l = Linear::new(rng, dim, dim, true);
    l.bias = Some(crate::nn::const_param(&[dim], 0.0));
    l
}

/// `[N, C, H, W] -> [1, N*H*W, C]`, frame-major.
pub fn spatiotemporal_map(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "spatiotemporal_map")?;
    to_tokens(x)?.reshape(&[1, n * h * w, c])
}

/// Inverse of [`spatiotemporal_map`].
pub fn from_spatiotemporal_map(m: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = *m.shape().last().unwrap_or(&0);
    from_tokens(&m.reshape(&[n, h * w, c])?, h, w)
}

/// Cross-scanned selective state space path with pre-norm and residual.
pub struct VssPath {
    pub norm: LayerNorm,
    pub scans: Vec<S6>,
    pub out_proj: Linear,
}

impl VssPath {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self { norm: LayerNorm::new(dim, 2), scans: s6_stack(rng, 4, dim, state), out_proj: out_projection(rng, dim) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = dims4(x, "vss")?;
        let t = self.norm.forward(&to_tokens(x)?)?;
        let merged = sum_all(&scan_branches(&self.scans, &cross_scan_paths(h, w), &t)?)?;
        x.add(&from_tokens(&self.out_proj.forward(&merged)?, h, w)?)
    }
}

impl Module for VssPath {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("norm", &mut self.norm);
        visit_list(p, "scan", &mut self.scans);
        p.child("out_proj", &mut self.out_proj);
    }
}

/// Pointwise expansion, then parallel depthwise-separable branches at
/// several kernel sizes, summed back to `C` channels.
///
/// Each branch's pointwise map goes straight to `C`: a `4C -> 4C` pointwise
/// conv followed by a shared `4C -> C` linear layer composes to the same
/// family of linear maps.
pub struct RfFfn {
    pub expand: Conv2d,
    pub depthwise: Vec<Conv2d>,
    pub pointwise: Vec<Conv2d>,
}

impl RfFfn {
    pub fn new(rng: &mut impl Rng, dim: usize, expansion: usize, kernels: &[usize]) -> Self {
        let hidden = dim * expansion;
        Self {
            expand: Conv2d::same(rng, dim, hidden, 1, 1),
            depthwise: kernels.iter().map(|&k| Conv2d::same(rng, hidden, hidden, k, hidden)).collect(),
            pointwise: kernels.iter().map(|_| Conv2d::same(rng, hidden, dim, 1, 1)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.expand.forward(x)?.gelu();
        let mut acc: Option<Tensor> = None;
        for (dw, pw) in self.depthwise.iter().zip(&self.pointwise) {
            let b = pw.forward(&dw.forward(&h)?)?;
            acc = Some(match acc {
                Some(a) => a.add(&b)?,
                None => b,
            });
        }
        acc.ok_or_else(|| Error::Config("RF-FFN needs at least one kernel".into()))
    }
}

impl Module for RfFfn {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("expand", &mut self.expand);
        visit_list(p, "dw", &mut self.depthwise);
        visit_list(p, "pw", &mut self.pointwise);
    }
}

pub enum FeedForward {
    Rf(RfFfn),
    Plain(Ffn),
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeedForward::Rf(f) => f.forward(x),
            FeedForward::Plain(f) => f.forward(x),
        }
    }
}

impl Module for FeedForward {
    fn visit(&mut self, p: &mut Params<'_>) {
        match self {
            FeedForward::Rf(f) => f.visit(p),
            FeedForward::Plain(f) => f.visit(p),
        }
    }
}

/// VSS path followed by a pre-norm feed-forward residual.
pub struct Rfvss {
    pub vss: VssPath,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl Rfvss {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self {
            vss: VssPath::new(rng, dim, state),
            norm: LayerNorm::new(dim, 1),
            ffn: FeedForward::Rf(RfFfn::new(rng, dim, RF_EXPANSION, &RF_KERNELS)),
        }
    }

    /// Same block with a plain two-layer feed-forward in place of RF-FFN.
    pub fn plain(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self {
            vss: VssPath::new(rng, dim, state),
            norm: LayerNorm::new(dim, 1),
            ffn: FeedForward::Plain(Ffn::new(rng, dim, dim * RF_EXPANSION)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.vss.forward(x)?;
        y.add(&self.ffn.forward(&self.norm.forward(&y)?)?)
    }
}

impl Module for Rfvss {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("vss", &mut self.vss);
        p.child("norm", &mut self.norm);
        p.child("ffn", &mut self.ffn);
    }
}

pub fn rfvss_forward(block: &Rfvss, x: &Tensor) -> Result<Tensor> {
    block.forward(x)
}

/// Temporal differences followed by intra-frame token attention.
pub struct Dse {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Dse {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            q: Linear::new(rng, dim, dim, false),
            k: Linear::new(rng, dim, dim, false),
            v: Linear::new(rng, dim, dim, false),
        }
    }

    /// `F_{i+1} - F_i`, with the backward difference for the last frame.
    pub fn differences(x: &Tensor) -> Result<Tensor> {
        let (n, ..) = dims4(x, "dse")?;
        need_frames(n)?;
        let next = x.narrow(0, 1, n - 1)?;
        let prev = x.narrow(0, 0, n - 1)?;
        let fwd = next.sub(&prev)?;
        let last = fwd.narrow(0, n - 2, 1)?;
        Tensor::cat(&[&fwd, &last], 0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = dims4(x, "dse")?;
        let t = to_tokens(&Self::differences(x)?)?;
        let (q, k, v) = (self.q.forward(&t)?, self.k.forward(&t)?, self.v.forward(&t)?);
        let scores = q.matmul(&k.transpose(1, 2)?)?.scale(1.0 / ((h * w) as f64).sqrt());
        from_tokens(&scores.softmax(2)?.matmul(&v)?, h, w)
    }
}

impl Module for Dse {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("q", &mut self.q);
        p.child("k", &mut self.k);
        p.child("v", &mut self.v);
    }
}

pub fn dse_forward(block: &Dse, frames: &Tensor) -> Result<Tensor> {
    block.forward(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfeScan {
    Spiral,
    Cross,
}

/// Scans the centered spectrum of each frame and adds a conjugate-symmetric
/// correction before transforming back.
pub struct Afe {
    pub scan: AfeScan,
    pub norm: LayerNorm,
    pub scans: Vec<S6>,
    pub out_proj: Linear,
}

impl Afe {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize, scan: AfeScan) -> Self {
        let count = match scan {
            AfeScan::Spiral => 2,
            AfeScan::Cross => 4,
        };
        Self {
            scan,
            norm: LayerNorm::new(2 * dim, 2),
            scans: s6_stack(rng, count, 2 * dim, state),
            out_proj: Linear::zeros(2 * dim, 2 * dim, true),
        }
    }

    pub fn paths(&self, h: usize, w: usize) -> Vec<ScanPath> {
        match self.scan {
            AfeScan::Spiral => vec![
                spiral_scan_path(h, w, SpiralDirection::LowToHigh),
                spiral_scan_path(h, w, SpiralDirection::HighToLow),
            ],
            AfeScan::Cross => cross_scan_paths(h, w).to_vec(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = dims4(x, "afe")?;
        let root = ((h * w) as f64).sqrt();
        let (re, im) = fft2c(x)?;
        let (re, im) = (re.scale(1.0 / root), im.scale(1.0 / root));
        let tokens = to_tokens(&Tensor::cat(&[&re, &im], 1)?)?;
        let t = self.norm.forward(&tokens)?;
        let branches = scan_branches(&self.scans, &self.paths(h, w), &t)?;
        let mean = sum_all(&branches)?.scale(1.0 / branches.len() as f64);
        let e = from_tokens(&self.out_proj.forward(&mean)?, h, w)?;
        let (e_re, e_im) = hermitian_part(&e.narrow(1, 0, c)?, &e.narrow(1, c, c)?)?;
        ifft2c_real(&re.add(&e_re)?.scale(root), &im.add(&e_im)?.scale(root))
    }
}

impl Module for Afe {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("norm", &mut self.norm);
        visit_list(p, "scan", &mut self.scans);
        p.child("out_proj", &mut self.out_proj);
    }
}

pub fn afe_forward(block: &Afe, x: &Tensor) -> Result<Tensor> {
    block.forward(x)
}

/// Four-direction scan over the spatio-temporal map, then per-frame FFN and
/// 3x3 convolution.
pub struct Slmp {
    pub norm: LayerNorm,
    pub scans: Vec<S6>,
    pub out_proj: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn: Ffn,
    pub conv: Conv2d,
}

impl Slmp {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim, 2),
            scans: s6_stack(rng, 4, dim, state),
            out_proj: out_projection(rng, dim),
            ffn_norm: LayerNorm::new(dim, 1),
            ffn: Ffn::new(rng, dim, 2 * dim),
            conv: Conv2d::same(rng, dim, dim, 3, 1),
        }
    }

    /// Each direction's S6 output over the normalized map, in frame-major
    /// grid order: `4 x [1, N*H*W, C]`.
    pub fn branch_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (n, _, h, w) = dims4(x, "slmp")?;
        need_frames(n)?;
        let m = self.norm.forward(&spatiotemporal_map(x)?)?;
        scan_branches(&self.scans, &spatiotemporal_paths(n, h * w), &m)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = dims4(x, "slmp")?;
        let merged = sum_all(&self.branch_outputs(x)?)?;
        let y = x.add(&from_spatiotemporal_map(&self.out_proj.forward(&merged)?, n, h, w)?)?;
        let y = y.add(&self.ffn.forward(&self.ffn_norm.forward(&y)?)?)?;
        y.add(&self.conv.forward(&y)?)
    }
}

impl Module for Slmp {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("norm", &mut self.norm);
        visit_list(p, "scan", &mut self.scans);
        p.child("out_proj", &mut self.out_proj);
        p.child("ffn_norm", &mut self.ffn_norm);
        p.child("ffn", &mut self.ffn);
        p.child("conv", &mut self.conv);
    }
}

pub fn slmp_forward(block: &Slmp, frames: &Tensor) -> Result<Tensor> {
    block.forward(frames)
}

/// Space-frequency fusion: sequence-to-sequence and point-to-point scans
/// over the concatenated token sets, then a linear map, FFN and a 3x3 conv
/// over the channel-stacked halves. Also serves as the gate generator
/// inside [`Flmp`].
pub struct DualDomainFusion {
    pub norm: LayerNorm,
    pub seq2seq: S6,
    pub point2point: S6,
    pub linear: Conv2d,
    pub ffn_norm: LayerNorm,
    pub ffn: Ffn,
    pub conv: Conv2d,
}

impl DualDomainFusion {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim, 2),
            seq2seq: S6::new(rng, dim, state),
            point2point: S6::new(rng, dim, state),
            linear: Conv2d::same(rng, dim, dim, 1, 1),
            ffn_norm: LayerNorm::new(dim, 1),
            ffn: Ffn::new(rng, dim, 2 * dim),
            conv: Conv2d::same(rng, 2 * dim, dim, 3, 1),
        }
    }

    /// Joint `[N, C, 2H, W]` layout (spatial half on top) after both scans.
    pub fn joint_map(&self, spa: &Tensor, fre: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = dims4(spa, "sfmf")?;
        if spa.shape() != fre.shape() {
            return Err(Error::shape("sfmf", format!("{:?} vs {:?}", spa.shape(), fre.shape())));
        }
        let tokens = Tensor::cat(&[&to_tokens(spa)?, &to_tokens(fre)?], 1)?;
        let t = self.norm.forward(&tokens)?;
        let paths = dual_domain_paths(h * w);
        let ys = scan_branches(std::slice::from_ref(&self.seq2seq), std::slice::from_ref(&paths.seq2seq), &t)?;
        let yp = scan_branches(std::slice::from_ref(&self.point2point), std::slice::from_ref(&paths.point2point), &t)?;
        from_tokens(&ys[0].add(&yp[0])?, 2 * h, w)
    }

    pub fn forward(&self, spa: &Tensor, fre: &Tensor) -> Result<Tensor> {
        let (_, _, h, _) = dims4(spa, "sfmf")?;
        let z = self.linear.forward(&self.joint_map(spa, fre)?)?;
        let z = z.add(&self.ffn.forward(&self.ffn_norm.forward(&z)?)?)?;
        let stacked = Tensor::cat(&[&z.narrow(2, 0, h)?, &z.narrow(2, h, h)?], 1)?;
        self.conv.forward(&stacked)
    }
}

impl Module for DualDomainFusion {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("norm", &mut self.norm);
        p.child("seq2seq", &mut self.seq2seq);
        p.child("point2point", &mut self.point2point);
        p.child("linear", &mut self.linear);
        p.child("ffn_norm", &mut self.ffn_norm);
        p.child("ffn", &mut self.ffn);
        p.child("conv", &mut self.conv);
    }
}

pub fn sfmf_forward(block: &DualDomainFusion, spa: &Tensor, fre: &Tensor) -> Result<Tensor> {
    block.forward(spa, fre)
}

/// Same structure as SFMF, applied per frame to a single pair of maps.
pub fn mfm_forward(block: &DualDomainFusion, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let single = |t: &Tensor| -> Result<Tensor> {
        match *t.shape() {
            [c, h, w] => t.reshape(&[1, c, h, w]),
            _ => Err(Error::shape("mfm", format!("expected [C, H, W], got {:?}", t.shape()))),
        }
    };
    let out = block.forward(&single(a)?, &single(b)?)?;
    out.reshape(a.shape())
}

/// Phase-driven motion scan over the spatio-frequency map with an
/// amplitude gate.
pub struct Flmp {
    pub scans: Vec<S6>,
    pub out_proj: Linear,
    pub mfm: DualDomainFusion,
}

impl Flmp {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self {
            scans: s6_stack(rng, 4, dim, state),
            out_proj: out_projection(rng, dim),
            mfm: DualDomainFusion::new(rng, dim, state),
        }
    }

    /// Phase map `M_f: [1, N*H*W, C]` and each direction's S6 output.
    pub fn branch_outputs(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (n, _, h, w) = dims4(x, "flmp")?;
        need_frames(n)?;
        let spec = fft2_centered(x)?;
        let m = spatiotemporal_map(&spec.phase)?;
        let b = scan_branches(&self.scans, &spatiotemporal_paths(n, h * w), &m)?;
        Ok((m, b))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = dims4(x, "flmp")?;
        need_frames(n)?;
        let spec = fft2_centered(x)?;
        let m = spatiotemporal_map(&spec.phase)?;
        let merged = sum_all(&scan_branches(&self.scans, &spatiotemporal_paths(n, h * w), &m)?)?;
        let pm = spec.phase.add(&from_spatiotemporal_map(&self.out_proj.forward(&merged)?, n, h, w)?)?;
        let amp_n = spec.amplitude.scale(1.0 / ((h * w) as f64).sqrt());
        let gate = self.mfm.forward(&pm, &amp_n)?.sigmoid();
        ifft2_from_amp_phase(&gate.mul(&spec.amplitude)?, &pm)
    }
}

impl Module for Flmp {
    fn visit(&mut self, p: &mut Params<'_>) {
        visit_list(p, "scan", &mut self.scans);
        p.child("out_proj", &mut self.out_proj);
        p.child("mfm", &mut self.mfm);
    }
}

pub fn flmp_forward(block: &Flmp, frames: &Tensor) -> Result<Tensor> {
    block.forward(frames)
}

/// Token cross-attention from spatial queries to frequency keys/values.
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            q: Linear::new(rng, dim, dim, false),
            k: Linear::new(rng, dim, dim, false),
            v: Linear::new(rng, dim, dim, false),
            out: Linear::new(rng, dim, dim, true),
        }
    }

    pub fn forward(&self, spa: &Tensor, fre: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = dims4(spa, "xattn")?;
        let (ts, tf) = (to_tokens(spa)?, to_tokens(fre)?);
        let scores = self.q.forward(&ts)?.matmul(&self.k.forward(&tf)?.transpose(1, 2)?)?;
        let att = scores.scale(1.0 / (c as f64).sqrt()).softmax(2)?;
        from_tokens(&self.out.forward(&att.matmul(&self.v.forward(&tf)?)?)?, h, w)
    }
}

impl Module for CrossAttention {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("q", &mut self.q);
        p.child("k", &mut self.k);
        p.child("v", &mut self.v);
        p.child("out", &mut self.out);
    }
}

/// 3x3x3 spatio-temporal convolution (zero-padded in time) with residual,
/// built from one 2D kernel per temporal offset.
pub struct TemporalConv {
    pub taps: Vec<Conv2d>,
}

impl TemporalConv {
    pub fn new(rng: &mut impl Rng, dim: usize) -> Self {
        let spec = Conv2dSpec { stride: 1, pad: 1, groups: 1 };
        let mut taps: Vec<Conv2d> = (0..3).map(|_| Conv2d::new(rng, dim, dim, 3, spec, false)).collect();
        taps[1].bias = Some(crate::nn::const_param(&[dim], 0.0));
        Self { taps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(x, "conv3d")?;
        need_frames(n)?;
        let zero = Tensor::zeros(&[1, c, h, w]);
        let prev = Tensor::cat(&[&zero, &x.narrow(0, 0, n - 1)?], 0)?;
        let next = Tensor::cat(&[&x.narrow(0, 1, n - 1)?, &zero], 0)?;
        let y = self.taps[0].forward(&prev)?.add(&self.taps[1].forward(x)?)?;
        x.add(&y.add(&self.taps[2].forward(&next)?)?)
    }
}

impl Module for TemporalConv {
    fn visit(&mut self, p: &mut Params<'_>) {
        visit_list(p, "tap", &mut self.taps);
    }
}

/// Decoder stage: VSS path plus a small feed-forward residual.
pub struct VssDecoderBlock {
    pub vss: VssPath,
    pub norm: LayerNorm,
    pub ffn: Ffn,
}

impl VssDecoderBlock {
    pub fn new(rng: &mut impl Rng, dim: usize, state: usize) -> Self {
        Self { vss: VssPath::new(rng, dim, state), norm: LayerNorm::new(dim, 1), ffn: Ffn::new(rng, dim, 2 * dim) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.vss.forward(x)?;
        y.add(&self.ffn.forward(&self.norm.forward(&y)?)?)
    }
}

impl Module for VssDecoderBlock {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("vss", &mut self.vss);
        p.child("norm", &mut self.norm);
        p.child("ffn", &mut self.ffn);
    }
}
