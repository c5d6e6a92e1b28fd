//! Phoneme encoder and the frame-level token/phoneme contrastive objective.

use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Block, Builder, Ctx, Init};
use crate::real::Real;

pub const PHONEME: &str = "phoneme_encoder";
pub const LOG_TAU: &str = "contrastive.log_tau";

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeBlocks {
    pub embed: String,
    /// Embedded frame ids → `P: [ceil(T / r_sem), joint_dim]`.
    pub body: Vec<Block>,
}

pub fn build(cfg: &CodecConfig, b: &mut Builder) -> PhonemeBlocks {
    let embed = format!("{PHONEME}.embed");
    b.add(&embed, vec![cfg.phoneme_vocab, cfg.model_dim], Init::Normal(1.0));
    let body = vec![
        b.conv(
            &format!("{PHONEME}.down"),
            2 * cfg.r_sem,
            cfg.model_dim,
            cfg.model_dim,
            cfg.r_sem,
            1,
        ),
        Block::Relu,
        b.transformer(
            &format!("{PHONEME}.tf"),
            cfg.phoneme_layers,
            cfg.model_dim,
            cfg.heads,
            cfg.ffn,
            cfg.attn_window,
            cfg.rope_base,
        ),
        b.layer_norm(&format!("{PHONEME}.ln"), cfg.model_dim),
        b.linear(&format!("{PHONEME}.head"), cfg.model_dim, cfg.joint_dim),
    ];
    b.add(LOG_TAU, vec![1], Init::Constant(cfg.tau_init.ln()));
    PhonemeBlocks { embed, body }
}

/// Length-regulated phoneme ids → `P`.
pub fn phoneme_encode<F: Real>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &PhonemeBlocks,
    frame_ids: &[usize],
) -> Result<Var> {
    if frame_ids.is_empty() {
        return Err(Error::invalid("phoneme_encode needs at least one frame"));
    }
    let table = ctx.param(g, &blocks.embed)?;
    let x = g.embedding(table, frame_ids)?;
    nn::forward(g, ctx, &blocks.body, x)
}

/// `C = τ · Ŝ P̂ᵀ` with rows optionally L2-normalised; `log_tau` is a
/// scalar node holding `ln τ`.
pub fn similarity_matrix<F: Real>(
    g: &mut Graph<F>,
    s: Var,
    p: Var,
    log_tau: Var,
    normalize: bool,
) -> Result<Var> {
    if g.shape(s) != g.shape(p) {
        return Err(Error::Shape {
            op: "similarity_matrix",
            left: g.describe(s),
            right: g.describe(p),
        });
    }
    let (s, p) = if normalize {
        (g.l2_normalize_rows(s)?, g.l2_normalize_rows(p)?)
    } else {
        (s, p)
    };
    let dots = g.matmul_nt(s, p)?;
    let tau = g.exp(log_tau);
    g.mul_scalar(dots, tau)
}

/// Symmetric cross-entropy with the diagonal as positives.
pub fn contrastive_loss<F: Real>(g: &mut Graph<F>, c: Var) -> Result<Var> {
    g.symmetric_cross_entropy(c)
}
