//! Parameterized layers and the named-parameter visitor used by the
//! optimizer and the checkpoint code.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tensor};

/// Walks every trainable tensor under a dotted name.
pub struct Params<'a> {
    prefix: String,
    f: &'a mut dyn FnMut(&str, &mut Tensor),
}

impl<'a> Params<'a> {
    pub fn new(f: &'a mut dyn FnMut(&str, &mut Tensor)) -> Self {
        Self { prefix: String::new(), f }
    }

    pub fn param(&mut self, name: &str, t: &mut Tensor) {
        let full = format!("{}{name}", self.prefix);
        (self.f)(&full, t);
    }

    pub fn child(&mut self, name: &str, m: &mut dyn Module) {
        let saved = self.prefix.len();
        self.prefix.push_str(name);
        self.prefix.push('.');
        m.visit(self);
        self.prefix.truncate(saved);
    }
}

pub trait Module {
    fn visit(&mut self, p: &mut Params<'_>);
}

pub fn named_parameters(m: &mut dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut f = |name: &str, t: &mut Tensor| out.push((name.to_string(), t.clone()));
    m.visit(&mut Params::new(&mut f));
    out
}

pub fn parameter_count(m: &mut dyn Module) -> usize {
    named_parameters(m).iter().map(|(_, t)| t.numel()).sum()
}

pub fn clear_grads(m: &mut dyn Module) {
    let mut f = |_: &str, t: &mut Tensor| t.clear_grad();
    m.visit(&mut Params::new(&mut f));
}

/// Replaces the parameter called `name`; errors if absent or misshaped.
pub fn set_parameter(m: &mut dyn Module, name: &str, value: &Tensor) -> Result<()> {
    let mut found = Ok(false);
    let mut f = |n: &str, t: &mut Tensor| {
        if n == name {
            found = if t.shape() == value.shape() {
                *t = value.detach().requires_grad();
                Ok(true)
            } else {
                Err(Error::shape("set_parameter", format!("{name}: {:?} vs {:?}", t.shape(), value.shape())))
            };
        }
    };
    m.visit(&mut Params::new(&mut f));
    match found? {
        true => Ok(()),
        false => Err(Error::Checkpoint(format!("no parameter named {name}"))),
    }
}

pub fn uniform_param(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::param(data, shape).expect("length matches shape")
}

pub fn const_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::full(shape, value).requires_grad()
}

/// `y = x W + b` over the last axis. `weight: [in, out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform_param(rng, &[fan_in, fan_out], bound),
            bias: bias.then(|| uniform_param(rng, &[fan_out], bound)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self { weight: const_param(&[fan_in, fan_out], 0.0), bias: bias.then(|| const_param(&[fan_out], 0.0)) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            p.param("bias", b);
        }
    }
}

/// 2D convolution layer on `[B, C, H, W]`.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let fan_in = cin / spec.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform_param(rng, &[cout, cin / spec.groups, kernel, kernel], bound),
            bias: bias.then(|| uniform_param(rng, &[cout], bound)),
            spec,
        }
    }

    /// Same-size convolution (odd kernel, stride 1).
    pub fn same(rng: &mut impl Rng, cin: usize, cout: usize, kernel: usize, groups: usize) -> Self {
        let spec = Conv2dSpec { stride: 1, pad: kernel / 2, groups };
        Self::new(rng, cin, cout, kernel, spec, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for Conv2d {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.param("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            p.param("bias", b);
        }
    }
}

/// Layer norm over one axis with a learned affine map.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub axis: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize, axis: usize) -> Self {
        Self { gamma: const_param(&[dim], 1.0), beta: const_param(&[dim], 0.0), axis }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.axis, &self.gamma, &self.beta, Self::EPS)
    }
}

impl Module for LayerNorm {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.param("gamma", &mut self.gamma);
        p.param("beta", &mut self.beta);
    }
}

/// Two 1x1 convolutions with GELU between, on `[B, C, H, W]`.
pub struct Ffn {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Ffn {
    pub fn new(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        Self { fc1: Conv2d::same(rng, dim, hidden, 1, 1), fc2: Conv2d::same(rng, hidden, dim, 1, 1) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl Module for Ffn {
    fn visit(&mut self, p: &mut Params<'_>) {
        p.child("fc1", &mut self.fc1);
        p.child("fc2", &mut self.fc2);
    }
}

/// `[B, C, H, W] -> [B, H*W, C]`
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("to_tokens", format!("{s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B, H*W, C] -> [B, C, H, W]`
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("from_tokens", format!("{s:?} to {h}x{w}")));
    }
    t.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}
