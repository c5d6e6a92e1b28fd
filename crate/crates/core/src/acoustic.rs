//! Stage-1 acoustic modelling: causal convolutional speech encoder,
//! transformer acoustic projection, mirrored speech decoder, mel loss.

use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{Block, Builder};
use crate::real::Real;

pub const ENCODER: &str = "speech_encoder";
pub const PROJECTION: &str = "acoustic_proj";
pub const DECODER: &str = "speech_decoder";

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticBlocks {
    /// Raw log-mel → hidden `[ceil(T / r_ac), model_dim]` (includes input normalisation).
    pub encoder: Vec<Block>,
    /// Hidden → `A: [frames, acous_dim]`.
    pub projection: Vec<Block>,
    /// `A` → normalised mel `[frames · r_ac, n_mels]`.
    pub decoder: Vec<Block>,
    /// Normalised mel → log-mel.
    pub denormalize: Vec<Block>,
}

pub fn normalize_block(cfg: &CodecConfig) -> Block {
    Block::Affine {
        shift: -cfg.mel_mean,
        scale: 1.0 / cfg.mel_std,
    }
}

pub fn denormalize_block(cfg: &CodecConfig) -> Block {
    Block::Affine {
        shift: cfg.mel_mean / cfg.mel_std,
        scale: cfg.mel_std,
    }
}

fn residual_units(b: &mut Builder, cfg: &CodecConfig, prefix: &str, ch: usize) -> Vec<Block> {
    (0..cfg.residual_layers)
        .map(|r| {
            let dil = cfg.dilation_base.pow(r as u32);
            let hidden = (ch / 2).max(1);
            Block::Residual(vec![
                Block::Elu,
                b.conv(&format!("{prefix}.res{r}.c1"), 3, ch, hidden, 1, dil),
                Block::Elu,
                b.conv(&format!("{prefix}.res{r}.c2"), 1, hidden, ch, 1, 1),
            ])
        })
        .collect()
}

pub fn build(cfg: &CodecConfig, b: &mut Builder) -> AcousticBlocks {
    let stages = cfg.conv_stages();
    let c = cfg.conv_channels;

    let mut encoder = vec![
        normalize_block(cfg),
        b.conv(&format!("{ENCODER}.conv_in"), cfg.kernel, cfg.n_mels, c, 1, 1),
    ];
    let mut ch = c;
    for s in 0..stages {
        let p = format!("{ENCODER}.s{s}");
        encoder.extend(residual_units(b, cfg, &p, ch));
        encoder.push(Block::Elu);
        encoder.push(b.conv(&format!("{p}.down"), 4, ch, ch * 2, 2, 1));
        ch *= 2;
    }
    encoder.push(Block::Elu);
    encoder.push(b.conv(&format!("{ENCODER}.conv_out"), cfg.kernel, ch, cfg.model_dim, 1, 1));

    let projection = vec![
        b.transformer(
            &format!("{PROJECTION}.tf"),
            cfg.layers,
            cfg.model_dim,
            cfg.heads,
            cfg.ffn,
            cfg.attn_window,
            cfg.rope_base,
        ),
        b.layer_norm(&format!("{PROJECTION}.ln"), cfg.model_dim),
        b.linear(&format!("{PROJECTION}.head"), cfg.model_dim, cfg.acous_dim),
    ];

    let mut decoder = vec![b.conv(
        &format!("{DECODER}.conv_in"),
        cfg.kernel,
        cfg.acous_dim,
        ch,
        1,
        1,
    )];
    for s in 0..stages {
        let p = format!("{DECODER}.s{s}");
        decoder.push(Block::Elu);
        decoder.push(b.conv_t(&format!("{p}.up"), 4, ch, ch / 2, 2));
        ch /= 2;
        decoder.extend(residual_units(b, cfg, &p, ch));
    }
    decoder.push(Block::Elu);
    decoder.push(b.conv(&format!("{DECODER}.conv_out"), cfg.kernel, ch, cfg.n_mels, 1, 1));

    AcousticBlocks {
        encoder,
        projection,
        decoder,
        denormalize: vec![denormalize_block(cfg)],
    }
}

/// Mean squared error after trimming both operands to the shorter frame count.
pub fn mel_loss<F: Real>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    aligned_mse(g, pred, target, "mel_loss")
}

pub(crate) fn aligned_mse<F: Real>(g: &mut Graph<F>, a: Var, b: Var, what: &str) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::invalid(format!(
            "{what}: cannot align {} with {}",
            g.describe(a),
            g.describe(b)
        )));
    }
    let n = sa[0].min(sb[0]);
    let a = if sa[0] > n { g.slice_rows(a, 0, n)? } else { a };
    let b = if sb[0] > n { g.slice_rows(b, 0, n)? } else { b };
    g.mse(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn mel_loss_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 3.0, 0.0, 1.5]).unwrap());
        let l = mel_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let y = g.constant(Tensor::matrix(2, 3, vec![1.1, 0.6, 3.0, 4.0, 1.0, 2.5]).unwrap());
        let l = mel_loss(&mut g, y, x).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);

        let a = [0.3, -1.2, 0.7, 2.2, 0.05, -0.9];
        let b = [1.0, 0.4, -0.3, 1.9, 0.5, 0.0];
        let expected = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 6.0;
        let (ta, tb) = (
            g.constant(Tensor::matrix(2, 3, a.to_vec()).unwrap()),
            g.constant(Tensor::matrix(2, 3, b.to_vec()).unwrap()),
        );
        let l = mel_loss(&mut g, ta, tb).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn mel_loss_trims_and_rejects_width_mismatch() {
        let mut g = Graph::<f64>::new();
        let long = g.constant(Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 9.0, 9.0]).unwrap());
        let short = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let l = mel_loss(&mut g, long, short).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let wide = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(mel_loss(&mut g, wide, short).is_err());
    }
}
