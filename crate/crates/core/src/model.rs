//! The full three-path codec: architecture, parameters and offline inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{self, AcousticBlocks};
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::config::CodecConfig;
use crate::contrastive::{self, PhonemeBlocks};
use crate::error::{Error, Result};
use crate::nn::{self, Builder, Ctx, ParamSpec};
use crate::paralinguistic::{self, ParaBlocks};
use crate::quantizer::{self, Mode, QuantizerBlocks};
use crate::real::Real;
use crate::semantic::{self, ConnectorBlocks, SemanticBlocks};

/// Parameter-name prefixes trained in stage 1 and frozen afterwards.
pub const STAGE1_PREFIXES: [&str; 3] = ["speech_encoder.", "acoustic_proj.", "speech_decoder."];
/// Parameter-name prefixes trained in stage 2.
pub const STAGE2_PREFIXES: [&str; 6] = [
    "phoneme_encoder.",
    "para_encoder.",
    "semantic_proj.",
    "fsq.",
    "connector.",
    "contrastive.",
];

pub fn is_stage1(name: &str) -> bool {
    STAGE1_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub acoustic: AcousticBlocks,
    pub semantic: SemanticBlocks,
    pub quantizer: QuantizerBlocks,
    pub connector: ConnectorBlocks,
    pub phoneme: PhonemeBlocks,
    pub para: ParaBlocks,
    pub specs: Vec<ParamSpec>,
}

impl Architecture {
    pub fn new(cfg: &CodecConfig) -> Self {
        let mut b = Builder::new();
        let acoustic = acoustic::build(cfg, &mut b);
        let (semantic, connector) = semantic::build(cfg, &mut b);
        let quantizer = quantizer::build(cfg, &mut b);
        let phoneme = contrastive::build(cfg, &mut b);
        let para = paralinguistic::build(cfg, &mut b);
        Self {
            acoustic,
            semantic,
            quantizer,
            connector,
            phoneme,
            para,
            specs: b.specs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codec<F: Real> {
    pub cfg: CodecConfig,
    pub arch: Architecture,
    pub params: ParamStore<F>,
}

impl<F: Real> Codec<F> {
    /// Fresh parameters drawn from `seed` in declaration order.
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in &arch.specs {
            params.insert(s.name.clone(), s.sample(&mut rng));
        }
        Ok(Self { cfg, arch, params })
    }

    /// Wraps existing parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: CodecConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(&cfg);
        for s in &arch.specs {
            match params.get(&s.name) {
                None => {
                    return Err(Error::invalid(format!("parameter '{}' missing", s.name)));
                }
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::invalid(format!(
                        "parameter '{}' has shape {:?}, config expects {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )));
                }
                _ => {}
            }
        }
        if params.len() != arch.specs.len() {
            let known: std::collections::BTreeSet<&str> =
                arch.specs.iter().map(|s| s.name.as_str()).collect();
            let extra = params.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::invalid(format!("unexpected parameter '{extra}'")));
        }
        Ok(Self { cfg, arch, params })
    }

    pub fn cast<G: Real>(&self) -> Codec<G> {
        Codec {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn check_mel(&self, mel: &Tensor<F>) -> Result<()> {
        if mel.rank() != 2 || mel.cols() != self.cfg.n_mels || mel.rows() == 0 {
            return Err(Error::invalid(format!(
                "expected a [frames, {}] mel matrix, got {:?}",
                self.cfg.n_mels,
                mel.shape()
            )));
        }
        Ok(())
    }

    /// Speech-encoder output for a raw log-mel input.
    pub fn hidden(&self, mel: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_mel(mel)?;
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let x = g.constant(mel.clone());
        let h = nn::forward(&mut g, &ctx, &self.arch.acoustic.encoder, x)?;
        Ok(g.value(h).clone())
    }

    pub fn acoustic_embedding(&self, mel: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.hidden(mel)?;
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let x = g.constant(h);
        let a = nn::forward(&mut g, &ctx, &self.arch.acoustic.projection, x)?;
        Ok(g.value(a).clone())
    }

    /// Raw log-mel from an acoustic embedding.
    pub fn decode_acoustic(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let y = nn::forward(&mut g, &ctx, &self.arch.acoustic.decoder, x)?;
        let y = nn::forward(&mut g, &ctx, &self.arch.acoustic.denormalize, y)?;
        Ok(g.value(y).clone())
    }

    /// Stage-1 reconstruction (encoder → A → decoder).
    pub fn reconstruct_acoustic(&self, mel: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode_acoustic(&self.acoustic_embedding(mel)?)
    }

    /// Semantic token codes (inference mode, `z = μ`).
    pub fn encode(&self, mel: &Tensor<F>) -> Result<Vec<u64>> {
        let h = self.hidden(mel)?;
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let x = g.constant(h);
        let (mu, _) = semantic::semantic_project(&mut g, &ctx, &self.arch.semantic, x)?;
        let (_, codes) =
            quantizer::fsq_quantize(&mut g, &ctx, &self.arch.quantizer, &self.cfg, mu)?;
        Ok(codes)
    }

    /// Inference-mode paralinguistic vector `G = μ̂` for a raw log-mel window.
    pub fn paralinguistic(&self, window: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_mel(window)?;
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let x = g.constant(window.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = paralinguistic::paralinguistic_encode(
            &mut g,
            &ctx,
            &self.arch.para,
            x,
            Mode::Infer,
            &mut rng,
        )?;
        Ok(Tensor::vector(g.value(s.z).data().to_vec()))
    }

    fn check_g(&self, gvec: &Tensor<F>) -> Result<()> {
        if gvec.numel() != self.cfg.para_dim {
            return Err(Error::invalid(format!(
                "paralinguistic vector has {} values, model expects {}",
                gvec.numel(),
                self.cfg.para_dim
            )));
        }
        Ok(())
    }

    /// Predicted acoustic embedding `Â` from codes and `G`.
    pub fn connect(&self, codes: &[u64], gvec: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_g(gvec)?;
        if codes.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.acous_dim]));
        }
        let frozen = |_: &str| false;
        let ctx = Ctx::new(&self.params, &frozen);
        let mut g = Graph::new();
        let s = quantizer::codes_to_embedding(&mut g, &ctx, &self.arch.quantizer, &self.cfg, codes)?;
        let gv = g.constant(Tensor::matrix(1, self.cfg.para_dim, gvec.data().to_vec())?);
        let a = semantic::semantic_connect(&mut g, &ctx, &self.arch.connector, s, gv)?;
        Ok(g.value(a).clone())
    }

    /// Raw log-mel from semantic codes and `G`.
    pub fn decode(&self, codes: &[u64], gvec: &Tensor<F>) -> Result<Tensor<F>> {
        let a = self.connect(codes, gvec)?;
        if a.rows() == 0 {
            return Ok(Tensor::zeros(&[0, self.cfg.n_mels]));
        }
        self.decode_acoustic(&a)
    }
}
