//! Layer descriptions shared by the offline graph forward pass and the
//! streaming runtime.
//!
//! A network is a list of [`Block`]s naming their parameters in a
//! [`ParamStore`]. [`forward`] lowers blocks onto a [`Graph`]; the streaming
//! runtime interprets the same list frame by frame with the same kernels.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// Causal convolution, params `{name}.w: [k, cin, cout]`, `{name}.b`.
    Conv {
        name: String,
        stride: usize,
        dilation: usize,
    },
    /// Causal transposed convolution, params as [`Block::Conv`].
    ConvT { name: String, stride: usize },
    /// `{name}.w: [in, out]`, `{name}.b: [out]`.
    Linear { name: String },
    /// `{name}.g`, `{name}.b`.
    LayerNorm { name: String },
    Elu,
    Relu,
    Tanh,
    /// `(x + shift) · scale`.
    Affine { shift: f64, scale: f64 },
    /// `x + body(x)`; the body must preserve frame count and width.
    Residual(Vec<Block>),
    /// Pre-norm causal transformer layers `{name}.{l}.*` (no final norm).
    Transformer {
        name: String,
        layers: usize,
        heads: usize,
        window: usize,
        rope_base: f64,
    },
    /// Nearest-neighbour upsampling in time.
    Repeat(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn sample<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<F> {
        let n: usize = self.shape.iter().product();
        let data = (0..n)
            .map(|_| {
                F::lit(match self.init {
                    Init::FanIn(fan) => {
                        let a = 1.0 / (fan.max(1) as f64).sqrt();
                        rng.random_range(-a..a)
                    }
                    Init::Normal(std) => {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    }
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Constant(c) => c,
                })
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

/// Collects parameter specs while blocks are being declared.
#[derive(Debug, Default)]
pub struct Builder {
    pub specs: Vec<ParamSpec>,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        self.add(format!("{name}.w"), vec![cin, cout], Init::FanIn(cin));
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
        Block::Linear { name: name.into() }
    }

    pub fn conv(
        &mut self,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Block {
        self.add(format!("{name}.w"), vec![kernel, cin, cout], Init::FanIn(kernel * cin));
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
        Block::Conv {
            name: name.into(),
            stride,
            dilation,
        }
    }

    pub fn conv_t(&mut self, name: &str, kernel: usize, cin: usize, cout: usize, stride: usize) -> Block {
        // each output frame gathers kernel/stride taps
        let fan = (kernel / stride).max(1) * cin;
        self.add(format!("{name}.w"), vec![kernel, cin, cout], Init::FanIn(fan));
        self.add(format!("{name}.b"), vec![cout], Init::Zeros);
        Block::ConvT {
            name: name.into(),
            stride,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Block {
        self.add(format!("{name}.g"), vec![dim], Init::Ones);
        self.add(format!("{name}.b"), vec![dim], Init::Zeros);
        Block::LayerNorm { name: name.into() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn transformer(
        &mut self,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        window: usize,
        rope_base: f64,
    ) -> Block {
        for l in 0..layers {
            let p = format!("{name}.{l}");
            self.layer_norm(&format!("{p}.ln1"), dim);
            for w in ["wq", "wk", "wv", "wo"] {
                self.linear(&format!("{p}.{w}"), dim, dim);
            }
            self.layer_norm(&format!("{p}.ln2"), dim);
            self.linear(&format!("{p}.ff1"), dim, ffn);
            self.linear(&format!("{p}.ff2"), ffn, dim);
        }
        Block::Transformer {
            name: name.into(),
            layers,
            heads,
            window,
            rope_base,
        }
    }
}

/// Binds parameters from a store onto a graph; `trainable` decides which
/// names receive gradients.
pub struct Ctx<'a, F: Real> {
    pub store: &'a ParamStore<F>,
    pub trainable: &'a dyn Fn(&str) -> bool,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { store, trainable }
    }

    pub fn param(&self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?;
        Ok(g.param(name, t, (self.trainable)(name)))
    }

    fn wb(&self, g: &mut Graph<F>, name: &str) -> Result<(Var, Var)> {
        Ok((
            self.param(g, &format!("{name}.w"))?,
            self.param(g, &format!("{name}.b"))?,
        ))
    }

    fn gb(&self, g: &mut Graph<F>, name: &str) -> Result<(Var, Var)> {
        Ok((
            self.param(g, &format!("{name}.g"))?,
            self.param(g, &format!("{name}.b"))?,
        ))
    }

    pub fn linear(&self, g: &mut Graph<F>, name: &str, x: Var) -> Result<Var> {
        let (w, b) = self.wb(g, name)?;
        g.linear(x, w, Some(b))
    }

    pub fn layer_norm(&self, g: &mut Graph<F>, name: &str, x: Var) -> Result<Var> {
        let (gm, b) = self.gb(g, name)?;
        g.layer_norm(x, gm, b)
    }
}

/// Lowers `blocks` onto the graph, starting from `x: [frames, width]`.
pub fn forward<F: Real>(g: &mut Graph<F>, ctx: &Ctx<F>, blocks: &[Block], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = forward_block(g, ctx, b, x)?;
    }
    Ok(x)
}

fn forward_block<F: Real>(g: &mut Graph<F>, ctx: &Ctx<F>, block: &Block, x: Var) -> Result<Var> {
    Ok(match block {
        Block::Conv {
            name,
            stride,
            dilation,
        } => {
            let (w, b) = ctx.wb(g, name)?;
            g.conv(x, w, Some(b), *stride, *dilation)?
        }
        Block::ConvT { name, stride } => {
            let (w, b) = ctx.wb(g, name)?;
            g.conv_transpose(x, w, Some(b), *stride)?
        }
        Block::Linear { name } => ctx.linear(g, name, x)?,
        Block::LayerNorm { name } => ctx.layer_norm(g, name, x)?,
        Block::Elu => g.elu(x),
        Block::Relu => g.relu(x),
        Block::Tanh => g.tanh(x),
        Block::Affine { shift, scale } => {
            let y = g.add_scalar(x, F::lit(*shift));
            g.scale(y, F::lit(*scale))
        }
        Block::Residual(body) => {
            let y = forward(g, ctx, body, x)?;
            g.add(x, y)?
        }
        Block::Transformer {
            name,
            layers,
            heads,
            window,
            rope_base,
        } => {
            let mut h = x;
            for l in 0..*layers {
                let p = format!("{name}.{l}");
                let n1 = ctx.layer_norm(g, &format!("{p}.ln1"), h)?;
                let q = ctx.linear(g, &format!("{p}.wq"), n1)?;
                let k = ctx.linear(g, &format!("{p}.wk"), n1)?;
                let v = ctx.linear(g, &format!("{p}.wv"), n1)?;
                let a = g.attention(q, k, v, *heads, *window, *rope_base)?;
                let o = ctx.linear(g, &format!("{p}.wo"), a)?;
                h = g.add(h, o)?;
                let n2 = ctx.layer_norm(g, &format!("{p}.ln2"), h)?;
                let f = ctx.linear(g, &format!("{p}.ff1"), n2)?;
                let f = g.relu(f);
                let f = ctx.linear(g, &format!("{p}.ff2"), f)?;
                h = g.add(h, f)?;
            }
            h
        }
        Block::Repeat(factor) => {
            if *factor == 1 {
                x
            } else {
                g.repeat_rows(x, *factor)?
            }
        }
    })
}

/// Output frames produced from `t_in` input frames.
pub fn out_frames(blocks: &[Block], mut t: usize) -> usize {
    for b in blocks {
        t = match b {
            Block::Conv { stride, .. } => t.div_ceil(*stride),
            Block::ConvT { stride, .. } => t * stride,
            Block::Repeat(f) => t * f,
            Block::Residual(body) => out_frames(body, t),
            _ => t,
        };
    }
    t
}
