//! VAE reparameterisation and finite scalar quantisation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Block, Builder, Ctx, Init};
use crate::real::Real;

pub const FSQ: &str = "fsq";
pub const LOG_SIGMA_RANGE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sample `z = μ + σ ⊙ φ`.
    Train,
    /// `z = μ`.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerBlocks {
    /// `z` → bounded pre-round values `⌊L/2⌋·tanh(Proj_down z)`.
    pub bound: Vec<Block>,
    /// Level vector → `S`.
    pub up: Vec<Block>,
}

pub fn build(cfg: &CodecConfig, b: &mut Builder) -> QuantizerBlocks {
    QuantizerBlocks {
        bound: vec![
            b.linear(&format!("{FSQ}.down"), cfg.joint_dim, cfg.fsq_d),
            Block::Tanh,
            Block::Affine {
                shift: 0.0,
                scale: cfg.half_levels() as f64,
            },
        ],
        up: vec![up_projection(cfg, b)],
    }
}

/// The all-zero level vector maps to the bias alone; a random bias keeps
/// that embedding away from the zero vector, which cannot be L2-normalised.
fn up_projection(cfg: &CodecConfig, b: &mut Builder) -> Block {
    let name = format!("{FSQ}.up");
    b.add(format!("{name}.w"), vec![cfg.fsq_d, cfg.joint_dim], Init::FanIn(cfg.fsq_d));
    b.add(format!("{name}.b"), vec![cfg.joint_dim], Init::FanIn(cfg.fsq_d));
    Block::Linear { name }
}

#[derive(Debug, Clone, Copy)]
pub struct LatentSample {
    pub z: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// `σ = exp(clamp(raw, −7, 7))`.
pub fn sigma_from_raw<F: Real>(g: &mut Graph<F>, raw: Var) -> Var {
    let c = g.clamp(raw, F::lit(-LOG_SIGMA_RANGE), F::lit(LOG_SIGMA_RANGE));
    g.exp(c)
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reparameterised sample from the diagonal Gaussian `(μ, σ(raw))`.
pub fn vae_sample<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    mu: Var,
    raw_log_sigma: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<LatentSample> {
    let sigma = sigma_from_raw(g, raw_log_sigma);
    let z = match mode {
        Mode::Infer => mu,
        Mode::Train => {
            let phi = g.constant(standard_normal(g.shape(mu), rng));
            let noise = g.mul(sigma, phi)?;
            g.add(mu, noise)?
        }
    };
    Ok(LatentSample { z, mu, sigma })
}

/// Code index of a level vector: `Σ (v_i + ⌊L/2⌋)·L^i`.
pub fn pack_code(levels: &[i64], fsq_levels: usize) -> u64 {
    let half = (fsq_levels / 2) as i64;
    let l = fsq_levels as u64;
    levels
        .iter()
        .rev()
        .fold(0u64, |acc, &v| acc * l + (v + half) as u64)
}

pub fn unpack_code(code: u64, fsq_d: usize, fsq_levels: usize) -> Vec<i64> {
    let half = (fsq_levels / 2) as i64;
    let l = fsq_levels as u64;
    let mut c = code;
    (0..fsq_d)
        .map(|_| {
            let digit = (c % l) as i64;
            c /= l;
            digit - half
        })
        .collect()
}

/// Code per row of a `[frames, d]` matrix of (rounded) level values.
pub fn levels_to_codes<F: Real>(levels: &Tensor<F>, fsq_levels: usize) -> Vec<u64> {
    let half = (fsq_levels / 2) as i64;
    (0..levels.rows())
        .map(|r| {
            let v: Vec<i64> = levels
                .row(r)
                .iter()
                .map(|x| (x.as_f64().round() as i64).clamp(-half, half))
                .collect();
            pack_code(&v, fsq_levels)
        })
        .collect()
}

pub fn codes_to_levels<F: Real>(codes: &[u64], cfg: &CodecConfig) -> Result<Tensor<F>> {
    let size = cfg
        .codebook_size()
        .ok_or_else(|| Error::Config("codebook size overflows".into()))?;
    let mut data = Vec::with_capacity(codes.len() * cfg.fsq_d);
    for (position, &code) in codes.iter().enumerate() {
        if code >= size {
            return Err(Error::CodeOutOfRange {
                position,
                code,
                size,
            });
        }
        data.extend(
            unpack_code(code, cfg.fsq_d, cfg.fsq_levels)
                .into_iter()
                .map(|v| F::lit(v as f64)),
        );
    }
    Tensor::new(vec![codes.len(), cfg.fsq_d], data)
}

#[derive(Debug, Clone, Copy)]
pub struct Quantized {
    pub s: Var,
    /// Rounded level values `[frames, d]`.
    pub levels: Var,
}

/// `S = Proj_up(round(⌊L/2⌋·tanh(Proj_down z)))` with the graph's round mode,
/// plus the code indices.
pub fn fsq_quantize<F: Real>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &QuantizerBlocks,
    cfg: &CodecConfig,
    z: Var,
) -> Result<(Quantized, Vec<u64>)> {
    let bounded = nn::forward(g, ctx, &blocks.bound, z)?;
    let levels = g.round(bounded);
    let codes = {
        let rounded = g.value(bounded).map(|v| v.round());
        levels_to_codes(&rounded, cfg.fsq_levels)
    };
    let s = nn::forward(g, ctx, &blocks.up, levels)?;
    Ok((Quantized { s, levels }, codes))
}

/// Decoder-side embedding of code indices.
pub fn codes_to_embedding<F: Real>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &QuantizerBlocks,
    cfg: &CodecConfig,
    codes: &[u64],
) -> Result<Var> {
    let levels = g.constant(codes_to_levels(codes, cfg)?);
    nn::forward(g, ctx, &blocks.up, levels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub codebook_size: u64,
    pub total: usize,
    pub counts: BTreeMap<u64, usize>,
    pub used_fraction: f64,
    pub max_frequency: f64,
}

impl Utilization {
    pub fn frequency(&self, code: u64) -> f64 {
        self.counts.get(&code).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

pub fn utilization(codes: &[u64], codebook_size: u64) -> Result<Utilization> {
    if codes.is_empty() {
        return Err(Error::invalid("utilization of an empty code stream"));
    }
    let mut counts = BTreeMap::new();
    for (position, &c) in codes.iter().enumerate() {
        if c >= codebook_size {
            return Err(Error::CodeOutOfRange {
                position,
                code: c,
                size: codebook_size,
            });
        }
        *counts.entry(c).or_insert(0usize) += 1;
    }
    let max = *counts.values().max().expect("non-empty");
    Ok(Utilization {
        codebook_size,
        total: codes.len(),
        used_fraction: counts.len() as f64 / codebook_size as f64,
        max_frequency: max as f64 / codes.len() as f64,
        counts,
    })
}
