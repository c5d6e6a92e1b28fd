//! Semantic projection (feeding the quantiser) and the semantic connector
//! predicting the acoustic embedding from `(S, G)`.

use crate::acoustic::aligned_mse;
use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Block, Builder, Ctx};
use crate::real::Real;

pub const SEMANTIC: &str = "semantic_proj";
pub const CONNECTOR: &str = "connector";

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBlocks {
    /// Encoder hidden → `[ceil(T / r_sem), model_dim]`.
    pub trunk: Vec<Block>,
    pub mu: Vec<Block>,
    pub log_sigma: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorBlocks {
    /// `S` → model width.
    pub input: Vec<Block>,
    /// `G` → one row added to every frame.
    pub cond: Vec<Block>,
    /// Conditioned frames → `Â` at the acoustic frame rate.
    pub body: Vec<Block>,
}

pub fn build(cfg: &CodecConfig, b: &mut Builder) -> (SemanticBlocks, ConnectorBlocks) {
    let ratio = cfg.sem_per_ac();
    let mut trunk = Vec::new();
    if ratio > 1 {
        trunk.push(b.conv(
            &format!("{SEMANTIC}.down"),
            2 * ratio,
            cfg.model_dim,
            cfg.model_dim,
            ratio,
            1,
        ));
    }
    trunk.push(b.transformer(
        &format!("{SEMANTIC}.tf"),
        cfg.layers,
        cfg.model_dim,
        cfg.heads,
        cfg.ffn,
        cfg.attn_window,
        cfg.rope_base,
    ));
    trunk.push(b.layer_norm(&format!("{SEMANTIC}.ln"), cfg.model_dim));
    let semantic = SemanticBlocks {
        trunk,
        mu: vec![b.linear(&format!("{SEMANTIC}.mu"), cfg.model_dim, cfg.joint_dim)],
        log_sigma: vec![b.linear(&format!("{SEMANTIC}.log_sigma"), cfg.model_dim, cfg.joint_dim)],
    };
    let connector = ConnectorBlocks {
        input: vec![b.linear(&format!("{CONNECTOR}.in_s"), cfg.joint_dim, cfg.model_dim)],
        cond: vec![b.linear(&format!("{CONNECTOR}.in_g"), cfg.para_dim, cfg.model_dim)],
        body: vec![
            b.transformer(
                &format!("{CONNECTOR}.tf"),
                cfg.layers,
                cfg.model_dim,
                cfg.heads,
                cfg.ffn,
                cfg.attn_window,
                cfg.rope_base,
            ),
            b.layer_norm(&format!("{CONNECTOR}.ln"), cfg.model_dim),
            Block::Repeat(ratio),
            b.linear(&format!("{CONNECTOR}.head"), cfg.model_dim, cfg.acous_dim),
        ],
    };
    (semantic, connector)
}

/// Returns `(μ, raw log σ)` for the semantic VAE.
pub fn semantic_project<F: Real>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &SemanticBlocks,
    hidden: Var,
) -> Result<(Var, Var)> {
    let h = nn::forward(g, ctx, &blocks.trunk, hidden)?;
    let mu = nn::forward(g, ctx, &blocks.mu, h)?;
    let raw = nn::forward(g, ctx, &blocks.log_sigma, h)?;
    Ok((mu, raw))
}

/// `Â` from semantic embeddings `s: [frames, joint_dim]` and `gvec: [1, D_g]`.
pub fn semantic_connect<F: Real>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &ConnectorBlocks,
    s: Var,
    gvec: Var,
) -> Result<Var> {
    let x = nn::forward(g, ctx, &blocks.input, s)?;
    let gshape = g.shape(gvec).to_vec();
    if gshape.len() != 2 || gshape[0] != 1 {
        return Err(Error::invalid(format!(
            "paralinguistic vector must be a single row, got {}",
            g.describe(gvec)
        )));
    }
    let c = nn::forward(g, ctx, &blocks.cond, gvec)?;
    let x = g.add_row(x, c)?;
    nn::forward(g, ctx, &blocks.body, x)
}

/// `MSE(Â, A)` with `A` treated as a constant target.
pub fn acoustic_loss<F: Real>(g: &mut Graph<F>, a_hat: Var, a: Var) -> Result<Var> {
    let a = if g.requires_grad(a) { g.detach(a) } else { a };
    aligned_mse(g, a_hat, a, "acoustic_loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn acoustic_loss_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.0, 0.0, -2.0]).unwrap());
        let l = acoustic_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let plus2 = g.add_scalar(a, 2.0);
        let l = acoustic_loss(&mut g, plus2, a).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-12);
        // no gradient reaches the target
        let grads = g.backward(l).unwrap();
        let ga = grads.get(a).unwrap();
        let expected = 2.0 * 2.0 / 6.0;
        assert!(ga.data().iter().all(|&v| (v - expected).abs() < 1e-12));

        let x = [0.5, -0.25, 1.5, 0.0, 2.0, -1.0];
        let y = [0.0, 0.75, 1.0, -0.5, 1.0, 0.5];
        let hand = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 6.0;
        let (tx, ty) = (
            g.constant(Tensor::matrix(2, 3, x.to_vec()).unwrap()),
            g.constant(Tensor::matrix(2, 3, y.to_vec()).unwrap()),
        );
        let l = acoustic_loss(&mut g, tx, ty).unwrap();
        assert!((g.value(l).item() - hand).abs() < 1e-15);
        let narrow = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(acoustic_loss(&mut g, tx, narrow).is_err());
    }
}
