//! The full U-shaped network: a four-stage encoder, dual-branch motion
//! modules on the two deepest stages, and a VSS decoder emitting one
//! probability map per stage per frame.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Afe, AfeScan, CrossAttention, Dse, DualDomainFusion, Flmp, Rfvss, Slmp, TemporalConv, VssDecoderBlock,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Params};
use crate::ssm::DEFAULT_STATE;
use crate::tensor::{Conv2dSpec, Tensor};

pub const STAGES: usize = 4;
/// Encoder stages (0-based) that carry the motion branches.
pub const MOTION_STAGES: [usize; 2] = [2, 3];
/// Heads start at this foreground probability, roughly the object share
/// of a synthetic frame.
pub const HEAD_PRIOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; STAGES],
    pub state: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { frames: 5, height: 64, width: 64, channels: [16, 32, 64, 128], state: DEFAULT_STATE }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let side = 1 << STAGES;
        if !self.height.is_multiple_of(side) || !self.width.is_multiple_of(side) || self.height == 0 || self.width == 0
        {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of {side}",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::TooFewFrames(self.frames));
        }
        if self.channels.contains(&0) || self.state == 0 {
            return Err(Error::Config("channel and state sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Model variants used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Plain feed-forward instead of the receptive-field FFN in every encoder block.
    NoRfvss,
    NoAfe,
    NoDse,
    NoSlmp,
    NoFlmp,
    /// Spatial and frequency features are added instead of fused.
    NoSfmf,
    SpatialOnly,
    AfeCrossScan,
    FusionConv3x3,
    FusionCrossAttention,
    MotionConv3d,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Full,
        Variant::NoRfvss,
        Variant::NoAfe,
        Variant::NoDse,
        Variant::NoSlmp,
        Variant::NoFlmp,
        Variant::NoSfmf,
        Variant::SpatialOnly,
        Variant::AfeCrossScan,
        Variant::FusionConv3x3,
        Variant::FusionCrossAttention,
        Variant::MotionConv3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRfvss => "A1",
            Variant::NoAfe => "A2",
            Variant::NoDse => "A3",
            Variant::NoSlmp => "A4",
            Variant::NoFlmp => "A5",
            Variant::NoSfmf => "A6",
            Variant::SpatialOnly => "A7",
            Variant::AfeCrossScan => "afe_scan=cross",
            Variant::FusionConv3x3 => "fusion=conv3x3",
            Variant::FusionCrossAttention => "fusion=xattn",
            Variant::MotionConv3d => "motion=conv3d",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

enum TemporalBlock {
    Slmp(Slmp),
    Flmp(Flmp),
    Conv3d(TemporalConv),
}

impl TemporalBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            TemporalBlock::Slmp(b) => b.forward(x),
            TemporalBlock::Flmp(b) => b.forward(x),
            TemporalBlock::Conv3d(b) => b.forward(x),
        }
    }

    fn visit(&mut self, p: &mut Params<'_>, name: &str) {
        match self {
            TemporalBlock::Slmp(b) => p.child(name, b),
            TemporalBlock::Flmp(b) => p.child(name, b),
            TemporalBlock::Conv3d(b) => p.child(name, b),
        }
    }
}

enum Fusion {
    Sfmf(Box<DualDomainFusion>),
    Add,
    Conv3x3(Conv2d),
    CrossAttention(CrossAttention),
}

struct FrequencyBranch {
    afe: Option<Afe>,
    motion: Option<TemporalBlock>,
}

/// Spatial branch (DSE then SLMP), frequency branch (AFE then FLMP) and
/// their fusion, added back onto the stage features.
pub struct MotionModule {
    dse: Option<Dse>,
    spatial: Option<TemporalBlock>,
    frequency: Option<FrequencyBranch>,
    fusion: Fusion,
}

impl MotionModule {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, state: usize, variant: Variant) -> Self {
        let conv3d = variant == Variant::MotionConv3d;
        let dse = (variant != Variant::NoDse).then(|| Dse::new(rng, dim));
        let spatial = match variant {
            Variant::NoSlmp => None,
            _ if conv3d => Some(TemporalBlock::Conv3d(TemporalConv::new(rng, dim))),
            _ => Some(TemporalBlock::Slmp(Slmp::new(rng, dim, state))),
        };
        let frequency = (variant != Variant::SpatialOnly).then(|| {
            let scan = if variant == Variant::AfeCrossScan { AfeScan::Cross } else { AfeScan::Spiral };
            FrequencyBranch {
                afe: (variant != Variant::NoAfe).then(|| Afe::new(rng, dim, state, scan)),
                motion: match variant {
                    Variant::NoFlmp => None,
                    _ if conv3d => Some(TemporalBlock::Conv3d(TemporalConv::new(rng, dim))),
                    _ => Some(TemporalBlock::Flmp(Flmp::new(rng, dim, state))),
                },
            }
        });
        let fusion = match variant {
            Variant::NoSfmf | Variant::SpatialOnly => Fusion::Add,
            Variant::FusionConv3x3 => Fusion::Conv3x3(Conv2d::same(rng, 2 * dim, dim, 3, 1)),
            Variant::FusionCrossAttention => Fusion::CrossAttention(CrossAttention::new(rng, dim)),
            _ => Fusion::Sfmf(Box::new(DualDomainFusion::new(rng, dim, state))),
        };
        Self { dse, spatial, frequency, fusion }
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mut spa = f.clone();
        if let Some(d) = &self.dse {
            spa = d.forward(&spa)?;
        }
        if let Some(s) = &self.spatial {
            spa = s.forward(&spa)?;
        }
        let Some(branch) = &self.frequency else {
            return f.add(&spa);
        };
        let mut fre = f.clone();
        if let Some(a) = &branch.afe {
            fre = a.forward(&fre)?;
        }
        if let Some(m) = &branch.motion {
            fre = m.forward(&fre)?;
        }
        let fused = match &self.fusion {
            Fusion::Sfmf(b) => b.forward(&spa, &fre)?,
            Fusion::Add => spa.add(&fre)?,
            Fusion::Conv3x3(c) => c.forward(&Tensor::cat(&[&spa, &fre], 1)?)?,
            Fusion::CrossAttention(x) => x.forward(&spa, &fre)?,
        };
        f.add(&fused)
    }
}

impl Module for MotionModule {
    fn visit(&mut self, p: &mut Params<'_>) {
        if let Some(d) = &mut self.dse {
            p.child("dse", d);
        }
        if let Some(s) = &mut self.spatial {
            s.visit(p, "spatial");
        }
        if let Some(b) = &mut self.frequency {
            if let Some(a) = &mut b.afe {
                p.child("afe", a);
            }
            if let Some(m) = &mut b.motion {
                m.visit(p, "frequency");
            }
        }
        match &mut self.fusion {
            Fusion::Sfmf(b) => p.child("sfmf", b.as_mut()),
            Fusion::Add => {}
            Fusion::Conv3x3(c) => p.child("fuse_conv", c),
            Fusion::CrossAttention(x) => p.child("fuse_xattn", x),
        }
    }
}

/// Probability maps per stage, each `[N, 1, H, W]`; level 0 is the finest.
#[derive(Clone)]
pub struct PredictionPyramid {
    pub levels: Vec<Tensor>,
}

impl PredictionPyramid {
    pub fn finest(&self) -> &Tensor {
        &self.levels[0]
    }
}

pub struct Vcamba {
    pub config: ModelConfig,
    pub variant: Variant,
    embeds: Vec<Conv2d>,
    encoders: Vec<Rfvss>,
    motion: Vec<Option<MotionModule>>,
    laterals: Vec<Conv2d>,
    decoders: Vec<VssDecoderBlock>,
    heads: Vec<Conv2d>,
}

impl Vcamba {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let down = Conv2dSpec { stride: 2, pad: 1, groups: 1 };
        let mut embeds = Vec::new();
        let mut encoders = Vec::new();
        for i in 0..STAGES {
            let cin = if i == 0 { 3 } else { c[i - 1] };
            embeds.push(Conv2d::new(&mut rng, cin, c[i], 3, down, true));
            encoders.push(if variant == Variant::NoRfvss {
                Rfvss::plain(&mut rng, c[i], config.state)
            } else {
                Rfvss::new(&mut rng, c[i], config.state)
            });
        }
        let motion = (0..STAGES)
            .map(|i| MOTION_STAGES.contains(&i).then(|| MotionModule::new(&mut rng, c[i], config.state, variant)))
            .collect();
        let laterals = (0..STAGES - 1).map(|i| Conv2d::same(&mut rng, c[i + 1], c[i], 1, 1)).collect();
        let decoders = (0..STAGES).map(|i| VssDecoderBlock::new(&mut rng, c[i], config.state)).collect();
        let heads = (0..STAGES)
            .map(|i| {
                let mut h = Conv2d::same(&mut rng, c[i], 1, 1, 1);
                h.bias = Some(Tensor::param(vec![(HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln()], &[1]).expect("scalar"));
                h
            })
            .collect();
        Ok(Self { config, variant, embeds, encoders, motion, laterals, decoders, heads })
    }

    /// `clip: [N, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, clip: &Tensor) -> Result<PredictionPyramid> {
        let (h, w) = (self.config.height, self.config.width);
        match *clip.shape() {
            [n, 3, hh, ww] if hh == h && ww == w && n >= 2 => {}
            [n, ..] if n < 2 => return Err(Error::TooFewFrames(n)),
            _ => {
                return Err(Error::shape(
                    "vcamba_forward",
                    format!("expected [N, 3, {h}, {w}], got {:?}", clip.shape()),
                ))
            }
        }
        let mut feats = Vec::with_capacity(STAGES);
        let mut x = clip.clone();
        for i in 0..STAGES {
            x = self.encoders[i].forward(&self.embeds[i].forward(&x)?)?;
            if let Some(m) = &self.motion[i] {
                x = m.forward(&x)?;
            }
            feats.push(x.clone());
        }
        let mut levels = vec![None; STAGES];
        let mut d: Option<Tensor> = None;
        for i in (0..STAGES).rev() {
            let input = match &d {
                None => feats[i].clone(),
                Some(prev) => {
                    let (fh, fw) = (feats[i].shape()[2], feats[i].shape()[3]);
                    self.laterals[i].forward(prev)?.resize_bilinear(fh, fw)?.add(&feats[i])?
                }
            };
            let y = self.decoders[i].forward(&input)?;
            levels[i] = Some(self.heads[i].forward(&y)?.resize_bilinear(h, w)?.sigmoid());
            d = Some(y);
        }
        Ok(PredictionPyramid { levels: levels.into_iter().map(|l| l.expect("every level filled")).collect() })
    }
}

pub fn vcamba_forward(model: &Vcamba, clip: &Tensor) -> Result<PredictionPyramid> {
    model.forward(clip)
}

impl Module for Vcamba {
    fn visit(&mut self, p: &mut Params<'_>) {
        for i in 0..STAGES {
            p.child(&format!("embed{i}"), &mut self.embeds[i]);
            p.child(&format!("encoder{i}"), &mut self.encoders[i]);
            if let Some(m) = &mut self.motion[i] {
                p.child(&format!("motion{i}"), m);
            }
        }
        for (i, l) in self.laterals.iter_mut().enumerate() {
            p.child(&format!("lateral{i}"), l);
        }
        for i in 0..STAGES {
            p.child(&format!("decoder{i}"), &mut self.decoders[i]);
            p.child(&format!("head{i}"), &mut self.heads[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::total_loss;
    use crate::nn::{named_parameters, parameter_count};
    use crate::tensor::{gradcheck_coords, no_grad};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { frames: 2, height: 16, width: 16, channels: [2, 2, 2, 2], state: 2 }
    }

    fn clip(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames * 3 * cfg.height * cfg.width;
        Tensor::new((0..n).map(|_| rng.random::<f64>()).collect(), &[cfg.frames, 3, cfg.height, cfg.width]).unwrap()
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("a7".parse::<Variant>().unwrap(), Variant::SpatialOnly);
        assert!(matches!("A8".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn pyramid_contract_for_every_variant() {
        let cfg = ModelConfig { frames: 3, height: 32, width: 32, channels: [4, 4, 6, 8], state: 4 };
        let x = clip(&cfg, 0);
        let mut counts = Vec::new();
        for v in Variant::ALL {
            let mut m = Vcamba::new(cfg.clone(), v, 1).unwrap();
            let p = no_grad(|| m.forward(&x)).unwrap();
            assert_eq!(p.levels.len(), 4);
            for l in &p.levels {
                assert_eq!(l.shape(), &[3, 1, 32, 32], "{v}");
                assert!(l.data().iter().all(|&v| v > 0.0 && v < 1.0), "{v}");
            }
            counts.push((v, parameter_count(&mut m)));
        }
        let full = counts[0].1;
        let a7 = counts.iter().find(|(v, _)| *v == Variant::SpatialOnly).unwrap().1;
        assert!(a7 < full);
    }

    #[test]
    fn rejects_bad_clips() {
        let m = Vcamba::new(tiny(), Variant::Full, 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 3, 8, 16])).is_err());
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 3, 16, 16])), Err(Error::TooFewFrames(1))));
        let bad = ModelConfig { height: 20, ..tiny() };
        assert!(Vcamba::new(bad, Variant::Full, 0).is_err());
    }

    #[test]
    fn construction_is_seeded() {
        let mut a = Vcamba::new(tiny(), Variant::Full, 7).unwrap();
        let mut b = Vcamba::new(tiny(), Variant::Full, 7).unwrap();
        let pa = named_parameters(&mut a);
        let pb = named_parameters(&mut b);
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = tiny();
        let model = Vcamba::new(cfg.clone(), Variant::Full, 3).unwrap();
        let x = clip(&cfg, 4);
        let gts: Vec<f64> =
            (0..2 * 16 * 16).map(|i| f64::from(u8::from((i % 16) / 4 == 1 && (i / 16) % 16 > 5))).collect();
        let gts = Tensor::new(gts, &[2, 1, 16, 16]).unwrap();
        let f = |c: &Tensor| total_loss(&model.forward(c)?.levels, &gts);
        let coords: Vec<usize> = (0..x.numel()).step_by(7).collect();
        let err = gradcheck_coords(f, &x, 1e-5, &coords).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
