//! Causal frame-by-frame encoder and decoder that reproduce the offline
//! graph outputs exactly, plus the token bitstream format.

mod bitstream;
mod stage;

use std::time::Instant;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::quantizer::{self, levels_to_codes};
use crate::real::Real;

pub use bitstream::TokenStream;
pub use stage::Chain;

fn to_rows<F: Real>(t: &Tensor<F>) -> Vec<Vec<F>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn from_rows<F: Real>(rows: Vec<Vec<F>>, cols: usize) -> Tensor<F> {
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).expect("row widths")
}

/// Raw log-mel frames in, semantic token codes out.
pub struct EncodeStream<F: Real> {
    n_mels: usize,
    fsq_levels: usize,
    chain: Chain<F>,
    frames_in: usize,
    tokens_out: usize,
    closed: bool,
}

impl<F: Real> EncodeStream<F> {
    pub fn new(codec: &Codec<F>) -> Result<Self> {
        let a = &codec.arch;
        let blocks: Vec<_> = a
            .acoustic
            .encoder
            .iter()
            .chain(&a.semantic.trunk)
            .chain(&a.semantic.mu)
            .chain(&a.quantizer.bound)
            .cloned()
            .collect();
        Ok(Self {
            n_mels: codec.cfg.n_mels,
            fsq_levels: codec.cfg.fsq_levels,
            chain: Chain::new(&blocks, &codec.params)?,
            frames_in: 0,
            tokens_out: 0,
            closed: false,
        })
    }

    fn codes(&mut self, rows: Vec<Vec<F>>) -> Vec<u64> {
        if rows.is_empty() {
            return Vec::new();
        }
        let cols = rows[0].len();
        let rounded = from_rows(rows, cols).map(|v| v.round());
        let codes = levels_to_codes(&rounded, self.fsq_levels);
        self.tokens_out += codes.len();
        codes
    }

    /// Feeds `[frames, n_mels]` raw log-mel rows; returns every token whose
    /// receptive field is now complete.
    pub fn push_frames(&mut self, mel: &Tensor<F>) -> Result<Vec<u64>> {
        if self.closed {
            return Err(Error::Stream("encoder stream already finished".into()));
        }
        if mel.rank() != 2 || mel.cols() != self.n_mels {
            return Err(Error::Stream(format!(
                "expected [frames, {}] mel rows, got {:?}",
                self.n_mels,
                mel.shape()
            )));
        }
        self.frames_in += mel.rows();
        let out = self.chain.push(to_rows(mel));
        Ok(self.codes(out))
    }

    /// Flushes the trailing partial token (zero padded, as offline) and closes.
    pub fn finish(&mut self) -> Result<Vec<u64>> {
        if self.closed {
            return Err(Error::Stream("encoder stream already finished".into()));
        }
        self.closed = true;
        let out = self.chain.finish();
        Ok(self.codes(out))
    }

    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    pub fn tokens_out(&self) -> usize {
        self.tokens_out
    }
}

/// Token codes in, raw log-mel frames out; conditioned on a fixed `G`.
pub struct DecodeStream<F: Real> {
    codec_cfg: crate::config::CodecConfig,
    up: Chain<F>,
    input: Chain<F>,
    cond: Vec<F>,
    body: Chain<F>,
    tokens_in: usize,
    closed: bool,
}

impl<F: Real> DecodeStream<F> {
    /// `gvec` is required: the decoder has no speaker-neutral default.
    pub fn new(codec: &Codec<F>, gvec: Option<&Tensor<F>>) -> Result<Self> {
        let gvec = gvec.ok_or_else(|| {
            Error::Stream("decoding requires a paralinguistic vector".into())
        })?;
        if gvec.numel() != codec.cfg.para_dim {
            return Err(Error::Stream(format!(
                "paralinguistic vector has {} values, model expects {}",
                gvec.numel(),
                codec.cfg.para_dim
            )));
        }
        let a = &codec.arch;
        let mut cond_chain = Chain::new(&a.connector.cond, &codec.params)?;
        let cond = cond_chain
            .push(vec![gvec.data().to_vec()])
            .pop()
            .expect("linear emits one row");
        let body: Vec<_> = a
            .connector
            .body
            .iter()
            .chain(&a.acoustic.decoder)
            .chain(&a.acoustic.denormalize)
            .cloned()
            .collect();
        Ok(Self {
            codec_cfg: codec.cfg.clone(),
            up: Chain::new(&a.quantizer.up, &codec.params)?,
            input: Chain::new(&a.connector.input, &codec.params)?,
            cond,
            body: Chain::new(&body, &codec.params)?,
            tokens_in: 0,
            closed: false,
        })
    }

    /// Returns the `r_sem` mel frames produced by each pushed token.
    pub fn push_tokens(&mut self, codes: &[u64]) -> Result<Tensor<F>> {
        if self.closed {
            return Err(Error::Stream("decoder stream already finished".into()));
        }
        let levels: Tensor<F> = quantizer::codes_to_levels(codes, &self.codec_cfg).map_err(|e| match e {
            Error::CodeOutOfRange {
                position,
                code,
                size,
            } => Error::CodeOutOfRange {
                position: position + self.tokens_in,
                code,
                size,
            },
            e => e,
        })?;
        self.tokens_in += codes.len();
        let s = self.up.push(to_rows(&levels));
        let x: Vec<Vec<F>> = self
            .input
            .push(s)
            .into_iter()
            .map(|r| r.iter().zip(&self.cond).map(|(&a, &b)| a + b).collect())
            .collect();
        Ok(from_rows(self.body.push(x), self.codec_cfg.n_mels))
    }

    pub fn finish(&mut self) -> Result<Tensor<F>> {
        if self.closed {
            return Err(Error::Stream("decoder stream already finished".into()));
        }
        self.closed = true;
        Ok(from_rows(self.body.finish(), self.codec_cfg.n_mels))
    }

    pub fn tokens_in(&self) -> usize {
        self.tokens_in
    }
}

/// Latency and speed of the streaming paths on one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// Audio that must arrive before the first token can exist.
    pub algorithmic_ms: f64,
    /// Compute time from the first pushed frame to the first emitted token.
    pub first_token_compute_ms: f64,
    /// `algorithmic_ms + first_token_compute_ms`.
    pub initial_ms: f64,
    pub encode_rtf: f64,
    pub decode_rtf: f64,
    pub audio_seconds: f64,
}

/// Streams `mel` frame by frame through the encoder, then the resulting tokens
/// one at a time through the decoder, timing both.
pub fn measure<F: Real>(codec: &Codec<F>, mel: &Tensor<F>, gvec: &Tensor<F>) -> Result<LatencyReport> {
    let cfg = &codec.cfg;
    let audio_seconds = (mel.rows() * cfg.hop) as f64 / cfg.sample_rate as f64;
    if audio_seconds < 1.0 {
        return Err(Error::invalid(format!(
            "latency measurement needs at least 1 s of audio, got {audio_seconds:.3} s"
        )));
    }
    let mut enc = EncodeStream::new(codec)?;
    let mut codes = Vec::new();
    let mut first = None;
    let start = Instant::now();
    for r in 0..mel.rows() {
        let out = enc.push_frames(&mel.slice_rows(r, 1))?;
        if first.is_none() && !out.is_empty() {
            first = Some(start.elapsed());
        }
        codes.extend(out);
    }
    codes.extend(enc.finish()?);
    let encode_time = start.elapsed();
    let first = first.unwrap_or(encode_time);

    let mut dec = DecodeStream::new(codec, Some(gvec))?;
    let start = Instant::now();
    for c in &codes {
        dec.push_tokens(std::slice::from_ref(c))?;
    }
    dec.finish()?;
    let decode_time = start.elapsed();

    let algorithmic_ms = 1e3 * (cfg.r_sem * cfg.hop) as f64 / cfg.sample_rate as f64;
    let first_ms = first.as_secs_f64() * 1e3;
    Ok(LatencyReport {
        algorithmic_ms,
        first_token_compute_ms: first_ms,
        initial_ms: algorithmic_ms + first_ms,
        encode_rtf: encode_time.as_secs_f64() / audio_seconds,
        decode_rtf: decode_time.as_secs_f64() / audio_seconds,
        audio_seconds,
    })
}
