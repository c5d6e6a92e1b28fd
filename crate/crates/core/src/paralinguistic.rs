//! Global paralinguistic VAE encoder and the KL-with-margin loss.

use rand::Rng;

use crate::acoustic::normalize_block;
use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Block, Builder, Ctx};
use crate::quantizer::{vae_sample, LatentSample, Mode};
use crate::real::Real;

pub const PARA: &str = "para_encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct ParaBlocks {
    pub frames: usize,
    /// Four convolutions (one full-rate, three stride-2), input normalisation included.
    pub stem: Vec<Block>,
    /// Two-convolution body of the SE-ResNet block.
    pub se_body: Vec<Block>,
    /// Squeeze-excitation gate on the pooled body output.
    pub se_gate: Vec<Block>,
    pub pooled_norm: Vec<Block>,
    pub mu: Vec<Block>,
    pub log_sigma: Vec<Block>,
}

pub fn build(cfg: &CodecConfig, b: &mut Builder) -> ParaBlocks {
    let c = cfg.para_channels;
    let mut stem = vec![
        normalize_block(cfg),
        b.conv(&format!("{PARA}.c1"), 5, cfg.n_mels, c, 1, 1),
        Block::Relu,
    ];
    for i in 2..=4 {
        stem.push(b.conv(&format!("{PARA}.c{i}"), 3, c, c, 2, 1));
        stem.push(Block::Relu);
    }
    let squeeze = (c / 4).max(1);
    ParaBlocks {
        frames: cfg.para_frames,
        stem,
        se_body: vec![
            b.conv(&format!("{PARA}.c5"), 3, c, c, 1, 1),
            Block::Relu,
            b.conv(&format!("{PARA}.c6"), 3, c, c, 1, 1),
        ],
        se_gate: vec![
            b.linear(&format!("{PARA}.se1"), c, squeeze),
            Block::Relu,
            b.linear(&format!("{PARA}.se2"), squeeze, c),
        ],
        pooled_norm: vec![b.layer_norm(&format!("{PARA}.ln"), c)],
        mu: vec![b.linear(&format!("{PARA}.mu"), c, cfg.para_dim)],
        log_sigma: vec![b.linear(&format!("{PARA}.log_sigma"), c, cfg.para_dim)],
    }
}

/// `G` (with `μ̂`, `σ̂`) from a raw log-mel window of exactly `blocks.frames` frames.
pub fn paralinguistic_encode<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    ctx: &Ctx<F>,
    blocks: &ParaBlocks,
    window: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<LatentSample> {
    let frames = g.shape(window)[0];
    if frames != blocks.frames {
        return Err(Error::invalid(format!(
            "paralinguistic window must have {} frames, got {frames}",
            blocks.frames
        )));
    }
    let x = nn::forward(g, ctx, &blocks.stem, window)?;
    let y = nn::forward(g, ctx, &blocks.se_body, x)?;
    let pooled = g.mean_rows(y)?;
    let gate = nn::forward(g, ctx, &blocks.se_gate, pooled)?;
    let gate = g.sigmoid(gate);
    let y = g.mul_row(y, gate)?;
    let x = g.add(x, y)?;
    let x = g.relu(x);
    let pooled = g.mean_rows(x)?;
    let h = nn::forward(g, ctx, &blocks.pooled_norm, pooled)?;
    let mu = nn::forward(g, ctx, &blocks.mu, h)?;
    let raw = nn::forward(g, ctx, &blocks.log_sigma, h)?;
    vae_sample(g, mu, raw, mode, rng)
}

/// `max(0, KL[N(μ, σ²) ‖ N(0, I)] − Δ)`; KL summed over the last axis and
/// averaged over rows.
pub fn kl_margin_loss<F: Real>(g: &mut Graph<F>, mu: Var, sigma: Var, delta: f64) -> Result<Var> {
    g.kl_margin(mu, sigma, F::lit(delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn kl(mu: &[f64], sigma: &[f64], delta: f64) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let m = g.input(Tensor::matrix(1, mu.len(), mu.to_vec()).unwrap());
        let s = g.input(Tensor::matrix(1, sigma.len(), sigma.to_vec()).unwrap());
        let l = kl_margin_loss(&mut g, m, s, delta).unwrap();
        let grads = g.backward(l).unwrap();
        let zeros = Tensor::zeros(&[1, mu.len()]);
        let mut gr = grads.get(m).unwrap_or(&zeros).data().to_vec();
        gr.extend_from_slice(grads.get(s).unwrap_or(&zeros).data());
        (g.value(l).item(), gr)
    }

    #[test]
    fn examples() {
        assert_eq!(kl(&[0.0, 0.0], &[1.0, 1.0], 0.0).0, 0.0);
        assert_eq!(kl(&[0.0], &[1.0], 3.0).0, 0.0);
        assert!((kl(&[1.0], &[1.0], 0.1).0 - 0.4).abs() < 1e-15);
        let (v, grads) = kl(&[0.3], &[0.9], 1.0);
        assert_eq!(v, 0.0);
        assert!(grads.iter().all(|&x| x == 0.0));
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let s = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        assert!(kl_margin_loss(&mut g, m, s, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_abs_mu(mu in -3.0f64..3.0, bump in 0.0f64..2.0, sigma in 0.2f64..3.0) {
            let a = kl(&[mu, 0.5], &[sigma, 1.0], 0.2).0;
            let b = kl(&[mu.signum() * (mu.abs() + bump), 0.5], &[sigma, 1.0], 0.2).0;
            prop_assert!(b >= a);
        }
    }
}
