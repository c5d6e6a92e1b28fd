use anyhow::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secousti::autodiff::Tensor;
use secousti::streaming::{measure, DecodeStream, EncodeStream, TokenStream};
use secousti::{Codec, CodecConfig};

fn small_cfg(window: usize, r_sem: usize) -> CodecConfig {
    let mut cfg = CodecConfig::desk();
    cfg.n_mels = 12;
    cfg.fmax = 8000.0;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.ffn = 24;
    cfg.layers = 2;
    cfg.conv_channels = 8;
    cfg.acous_dim = 8;
    cfg.joint_dim = 8;
    cfg.para_dim = 6;
    cfg.para_channels = 8;
    cfg.attn_window = window;
    cfg.r_sem = r_sem;
    cfg
}

fn random_mel<F: secousti::Real>(frames: usize, bands: usize, seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * bands)
        .map(|_| F::lit(rng.random_range(-9.0..1.0)))
        .collect();
    Tensor::new(vec![frames, bands], data).unwrap()
}

fn encode_chunked<F: secousti::Real>(codec: &Codec<F>, mel: &Tensor<F>, cuts: &[usize]) -> Result<Vec<u64>> {
    let mut s = EncodeStream::new(codec)?;
    let mut codes = Vec::new();
    let mut at = 0;
    for &n in cuts {
        codes.extend(s.push_frames(&mel.slice_rows(at, n))?);
        at += n;
    }
    codes.extend(s.push_frames(&mel.slice_rows(at, mel.rows() - at))?);
    codes.extend(s.finish()?);
    Ok(codes)
}

fn decode_chunked<F: secousti::Real>(
    codec: &Codec<F>,
    codes: &[u64],
    g: &Tensor<F>,
    cuts: &[usize],
) -> Result<Tensor<F>> {
    let mut s = DecodeStream::new(codec, Some(g))?;
    let mut rows = Vec::new();
    let mut at = 0;
    let mut pieces: Vec<&[u64]> = Vec::new();
    for &n in cuts {
        pieces.push(&codes[at..at + n]);
        at += n;
    }
    pieces.push(&codes[at..]);
    for p in pieces {
        let m = s.push_tokens(p)?;
        rows.extend_from_slice(m.data());
    }
    rows.extend_from_slice(s.finish()?.data());
    let n = rows.len() / codec.cfg.n_mels;
    Ok(Tensor::new(vec![n, codec.cfg.n_mels], rows)?)
}

fn random_cuts(total: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cuts = Vec::new();
    let mut left = total;
    while left > 0 && rng.random_bool(0.8) {
        let n = rng.random_range(0..=left.min(17));
        cuts.push(n);
        left -= n;
    }
    cuts
}

fn check_equivalence<F: secousti::Real>(cfg: CodecConfig, frames: usize, seed: u64) -> Result<()> {
    let codec = Codec::<F>::new(cfg.clone(), seed)?;
    let mel = random_mel::<F>(frames, cfg.n_mels, seed + 1);
    let offline = codec.encode(&mel)?;
    let streamed = encode_chunked(&codec, &mel, &random_cuts(frames, seed + 2))?;
    assert_eq!(streamed, offline);
    let g = random_mel::<F>(1, cfg.para_dim, seed + 3).reshape(vec![cfg.para_dim])?;
    let off_mel = codec.decode(&offline, &g)?;
    let str_mel = decode_chunked(&codec, &offline, &g, &random_cuts(offline.len(), seed + 4))?;
    assert_eq!(str_mel.shape(), off_mel.shape());
    assert!(
        str_mel.data() == off_mel.data(),
        "max diff {}",
        str_mel.max_abs_diff(&off_mel).as_f64()
    );
    Ok(())
}

#[test]
fn one_at_a_time_matches_single_call() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    let mel = random_mel::<f32>(100, cfg.n_mels, 9);
    let whole = encode_chunked(&codec, &mel, &[])?;
    let single = encode_chunked(&codec, &mel, &[1; 99])?;
    let uneven = encode_chunked(&codec, &mel, &[7, 13])?;
    assert_eq!(whole, single);
    assert_eq!(whole, uneven);
    assert_eq!(whole, codec.encode(&mel)?);
    assert_eq!(whole.len(), 25);
    Ok(())
}

#[test]
fn tokens_wait_for_a_full_hop() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    let mel = random_mel::<f32>(9, cfg.n_mels, 1);
    let mut s = EncodeStream::new(&codec)?;
    assert_eq!(s.frames_in(), 0);
    assert!(s.push_frames(&mel.slice_rows(0, 3))?.is_empty());
    assert_eq!(s.push_frames(&mel.slice_rows(3, 1))?.len(), 1);
    assert_eq!(s.push_frames(&mel.slice_rows(4, 5))?.len(), 1);
    assert_eq!(s.finish()?.len(), 1);
    assert!(s.push_frames(&mel.slice_rows(0, 1)).is_err());
    assert!(s.finish().is_err());
    Ok(())
}

#[test]
fn decoding_requires_g_and_valid_codes() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    assert!(DecodeStream::new(&codec, None).is_err());
    assert!(DecodeStream::new(&codec, Some(&Tensor::zeros(&[2]))).is_err());
    let g = Tensor::zeros(&[cfg.para_dim]);
    let mut s = DecodeStream::new(&codec, Some(&g))?;
    assert_eq!(s.push_tokens(&[])?.rows(), 0);
    assert_eq!(s.push_tokens(&[1, 2])?.rows(), 8);
    match s.push_tokens(&[0, 25]) {
        Err(secousti::Error::CodeOutOfRange { position, code, size }) => {
            assert_eq!((position, code, size), (3, 25, 25));
        }
        other => panic!("expected out-of-range error, got {other:?}"),
    }
    Ok(())
}

#[test]
fn streams_on_one_model_are_independent() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    let a = random_mel::<f32>(40, cfg.n_mels, 1);
    let b = random_mel::<f32>(40, cfg.n_mels, 2);
    let (mut sa, mut sb) = (EncodeStream::new(&codec)?, EncodeStream::new(&codec)?);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    for r in 0..40 {
        ca.extend(sa.push_frames(&a.slice_rows(r, 1))?);
        cb.extend(sb.push_frames(&b.slice_rows(r, 1))?);
    }
    ca.extend(sa.finish()?);
    cb.extend(sb.finish()?);
    assert_eq!(ca, codec.encode(&a)?);
    assert_eq!(cb, codec.encode(&b)?);
    Ok(())
}

#[test]
fn long_input_exercises_the_attention_ring() -> Result<()> {
    check_equivalence::<f32>(small_cfg(3, 4), 203, 11)?;
    check_equivalence::<f64>(small_cfg(7, 8), 150, 12)
}

#[test]
fn full_width_model_streams_exactly() -> Result<()> {
    let mut cfg = CodecConfig::desk();
    cfg.layers = 2;
    cfg.attn_window = 16;
    check_equivalence::<f32>(cfg, 120, 5)
}

#[test]
fn measure_reports_latency() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    let mel = random_mel::<f32>(100, cfg.n_mels, 1);
    let g = Tensor::zeros(&[cfg.para_dim]);
    let r = measure(&codec, &mel, &g)?;
    assert!((r.algorithmic_ms - 46.439_909_297).abs() < 1e-6);
    assert!(r.initial_ms >= r.algorithmic_ms);
    assert!(r.encode_rtf > 0.0 && r.decode_rtf > 0.0);
    assert!(measure(&codec, &mel.slice_rows(0, 50), &g).is_err());
    Ok(())
}

#[test]
fn encoded_file_round_trips() -> Result<()> {
    let cfg = small_cfg(5, 4);
    let codec = Codec::<f32>::new(cfg.clone(), 3)?;
    let mel = random_mel::<f32>(30, cfg.n_mels, 4);
    let codes = codec.encode(&mel)?;
    let t = TokenStream::for_config(&cfg, Some(vec![0.25; cfg.para_dim]), codes)?;
    assert_eq!(TokenStream::deserialize(&t.serialize()?)?, t);
    assert!((t.bitrate() - cfg.bitrate()).abs() < 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_chunking_matches_offline(
        frames in 1usize..90,
        seed in 0u64..1000,
        window in 1usize..6,
        wide in any::<bool>(),
    ) {
        let cfg = small_cfg(window, if wide { 8 } else { 4 });
        check_equivalence::<f32>(cfg, frames, seed).unwrap();
    }
}
