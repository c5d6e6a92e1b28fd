//! Audition-only waveform synthesis from log-mel: non-negative least-squares
//! magnitude recovery followed by iterative phase reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::frontend::mel_filterbank;

pub const DEFAULT_PHASE_ITERS: usize = 64;
const NNLS_ITERS: usize = 100;
const EPS: f64 = 1e-10;

/// Linear magnitudes `[frames][n_fft/2 + 1]` whose mel projection best
/// matches `exp(log_mel)`, via multiplicative NNLS updates.
pub fn mel_to_magnitude(log_mel: &[Vec<f64>], cfg: &CodecConfig) -> Vec<Vec<f64>> {
    let fb = mel_filterbank(cfg);
    let bins = cfg.win / 2 + 1;
    let ft = |m: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; bins];
        for (f, &mv) in fb.iter().zip(m) {
            for (sv, &w) in s.iter_mut().zip(f) {
                *sv += w * mv;
            }
        }
        s
    };
    log_mel
        .iter()
        .map(|frame| {
            let target: Vec<f64> = frame.iter().map(|v| v.exp()).collect();
            let num = ft(&target);
            let mut s: Vec<f64> = num.iter().map(|v| v.max(EPS)).collect();
            for _ in 0..NNLS_ITERS {
                let proj: Vec<f64> = fb
                    .iter()
                    .map(|f| f.iter().zip(&s).map(|(w, v)| w * v).sum())
                    .collect();
                let den = ft(&proj);
                for ((sv, n), d) in s.iter_mut().zip(&num).zip(&den) {
                    *sv *= n / (d + EPS);
                }
            }
            s
        })
        .collect()
}

/// Phase reconstruction of a `frames · hop` sample waveform from magnitudes.
pub fn griffin_lim(mag: &[Vec<f64>], cfg: &CodecConfig, iters: usize, seed: u64) -> Result<Vec<f32>> {
    let (n_fft, hop) = (cfg.win, cfg.hop);
    let bins = n_fft / 2 + 1;
    if mag.is_empty() || mag.iter().any(|m| m.len() != bins) {
        return Err(Error::invalid(format!("expected [frames, {bins}] magnitudes")));
    }
    let frames = mag.len();
    let half = n_fft / 2;
    let padded = frames * hop + n_fft;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
        .collect();
    let mut norm = vec![0.0; padded];
    for t in 0..frames {
        for (j, w) in window.iter().enumerate() {
            norm[t * hop + j] += w * w;
        }
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|m| {
            m.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let istft = |spec: &[Vec<Complex<f64>>], buf: &mut Vec<Complex<f64>>| {
        let mut y = vec![0.0; padded];
        for (t, s) in spec.iter().enumerate() {
            for k in 0..n_fft {
                buf[k] = if k < bins { s[k] } else { s[n_fft - k].conj() };
            }
            inv.process(buf);
            for (j, c) in buf.iter().enumerate() {
                y[t * hop + j] += c.re / n_fft as f64 * window[j];
            }
        }
        for (v, n) in y.iter_mut().zip(&norm) {
            if *n > EPS {
                *v /= n;
            }
        }
        y
    };
    for _ in 0..iters {
        let y = istft(&spec, &mut buf);
        for (t, s) in spec.iter_mut().enumerate() {
            for (j, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(y[t * hop + j] * window[j], 0.0);
            }
            fwd.process(&mut buf);
            for ((sv, c), &a) in s.iter_mut().zip(&buf).zip(&mag[t]) {
                let n = c.norm();
                *sv = if n > EPS { c * (a / n) } else { Complex::new(a, 0.0) };
            }
        }
    }
    let y = istft(&spec, &mut buf);
    Ok(y[half..half + frames * hop].iter().map(|&v| v as f32).collect())
}

/// Log-mel `[frames, n_mels]` to waveform.
pub fn mel_to_wave(log_mel: &[Vec<f64>], cfg: &CodecConfig, iters: usize) -> Result<Vec<f32>> {
    griffin_lim(&mel_to_magnitude(log_mel, cfg), cfg, iters, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelAnalyzer;

    #[test]
    fn resynthesis_preserves_the_spectrum() {
        let cfg = CodecConfig::desk();
        let sr = cfg.sample_rate as f64;
        let wave: Vec<f32> = (0..8192)
            .map(|n| {
                let t = n as f64 / sr;
                (0.3 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.1 * (2.0 * std::f64::consts::PI * 1250.0 * t).sin()) as f32
            })
            .collect();
        let an = MelAnalyzer::new(&cfg);
        let mel = an.compute(&wave).unwrap();
        let rows: Vec<Vec<f64>> = (0..mel.frames())
            .map(|t| mel.frame(t).iter().map(|&v| v as f64).collect())
            .collect();
        let out = mel_to_wave(&rows, &cfg, 32).unwrap();
        assert_eq!(out.len(), mel.frames() * cfg.hop);
        let again = an.compute(&out).unwrap();
        let err: f64 = (2..mel.frames() - 2)
            .flat_map(|t| {
                mel.frame(t)
                    .iter()
                    .zip(again.frame(t))
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            / ((mel.frames() - 4) * cfg.n_mels) as f64;
        let var: f64 = {
            let all: Vec<f64> = rows.iter().flatten().copied().collect();
            let m = all.iter().sum::<f64>() / all.len() as f64;
            all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64
        };
        assert!(err < 0.1 * var, "mel error {err} vs variance {var}");
        assert!(griffin_lim(&[vec![0.0; 3]], &cfg, 1, 0).is_err());
    }
}
