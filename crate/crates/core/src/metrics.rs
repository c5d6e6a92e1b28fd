//! Objective reconstruction metrics: LSD, MCD, pitch error, voicing mismatch
//! and mel MSE.

use std::fmt::Write as _;

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::frontend::MelAnalyzer;

pub const LSD_FLOOR: f64 = 1e-5;
pub const MCD_COEFFS: usize = 13;
pub const F0_HOP_SECONDS: f64 = 0.005;
pub const F0_WINDOW_SECONDS: f64 = 0.04;
pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 400.0;
const VOICING_THRESHOLD: f64 = 0.5;
const SILENCE_RATIO: f64 = 0.05;

fn check_shapes(what: &str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let same = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
    if !same || a.is_empty() {
        return Err(Error::invalid(format!(
            "{what}: shapes differ or are empty ({}×{} vs {}×{})",
            a.len(),
            a.first().map_or(0, Vec::len),
            b.len(),
            b.first().map_or(0, Vec::len)
        )));
    }
    Ok(())
}

/// Log-spectral distance between linear-magnitude spectrograms `[frames, bins]`.
pub fn lsd(reference: &[Vec<f64>], degraded: &[Vec<f64>]) -> Result<f64> {
    check_shapes("lsd", reference, degraded)?;
    let total: f64 = reference
        .iter()
        .zip(degraded)
        .map(|(r, d)| {
            let ms = r
                .iter()
                .zip(d)
                .map(|(&a, &b)| (a.max(LSD_FLOOR).log10() - b.max(LSD_FLOOR).log10()).powi(2))
                .sum::<f64>()
                / r.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / reference.len() as f64)
}

/// Orthonormal DCT-II of one log-mel frame, coefficients `0..=k`.
pub fn mel_cepstrum(log_mel: &[f64], k: usize) -> Vec<f64> {
    let n = log_mel.len() as f64;
    (0..=k)
        .map(|q| {
            let norm = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            norm * log_mel
                .iter()
                .enumerate()
                .map(|(i, &x)| x * (std::f64::consts::PI * q as f64 * (i as f64 + 0.5) / n).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Mel-cepstral distortion over coefficients `1..=k` (c₀ excluded); rows
/// hold cepstra starting at c₀.
pub fn mcd(reference: &[Vec<f64>], degraded: &[Vec<f64>], k: usize) -> Result<f64> {
    check_shapes("mcd", reference, degraded)?;
    if reference[0].len() <= k {
        return Err(Error::invalid(format!(
            "mcd: {k} coefficients requested, frames hold {}",
            reference[0].len()
        )));
    }
    let c = 10.0 * 2f64.sqrt() / std::f64::consts::LN_10;
    let total: f64 = reference
        .iter()
        .zip(degraded)
        .map(|(r, d)| (1..=k).map(|q| (r[q] - d[q]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(c * total / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchMetrics {
    /// Mean squared F0 error (Hz²) over frames voiced in both tracks.
    pub msep: f64,
    pub vuv_mismatch: f64,
    /// False when no frame is voiced in both tracks (`msep` is then 0).
    pub msep_defined: bool,
}

/// Pitch error between two F0 tracks, `0` meaning unvoiced.
pub fn pitch_metrics(reference: &[f64], degraded: &[f64]) -> Result<PitchMetrics> {
    if reference.len() != degraded.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "pitch tracks differ in length or are empty ({} vs {})",
            reference.len(),
            degraded.len()
        )));
    }
    let (mut se, mut both, mut mismatch) = (0.0, 0usize, 0usize);
    for (&r, &d) in reference.iter().zip(degraded) {
        match (r > 0.0, d > 0.0) {
            (true, true) => {
                se += (r - d).powi(2);
                both += 1;
            }
            (false, false) => {}
            _ => mismatch += 1,
        }
    }
    Ok(PitchMetrics {
        msep: if both > 0 { se / both as f64 } else { 0.0 },
        vuv_mismatch: mismatch as f64 / reference.len() as f64,
        msep_defined: both > 0,
    })
}

/// Normalised-autocorrelation F0 tracker with a 5 ms hop; `0` marks unvoiced
/// frames.
pub fn track_f0(wave: &[f32], sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let hop = (F0_HOP_SECONDS * sr).round().max(1.0) as usize;
    let win = (F0_WINDOW_SECONDS * sr).round() as usize;
    let (min_lag, max_lag) = ((sr / F0_MAX_HZ).floor() as usize, (sr / F0_MIN_HZ).ceil() as usize);
    let frames = wave.len().div_ceil(hop);
    let x: Vec<f64> = wave.iter().map(|&v| v as f64).collect();
    let frame = |t: usize| {
        let start = t * hop;
        (start..start + win + max_lag)
            .map(|i| x.get(i).copied().unwrap_or(0.0))
            .collect::<Vec<_>>()
    };
    let rms: Vec<f64> = (0..frames)
        .map(|t| {
            let f = frame(t);
            (f[..win].iter().map(|v| v * v).sum::<f64>() / win as f64).sqrt()
        })
        .collect();
    let loudest = rms.iter().copied().fold(0.0, f64::max);
    (0..frames)
        .map(|t| {
            if loudest == 0.0 || rms[t] < SILENCE_RATIO * loudest {
                return 0.0;
            }
            let f = frame(t);
            let e0: f64 = f[..win].iter().map(|v| v * v).sum();
            let r: Vec<f64> = (min_lag..=max_lag)
                .map(|lag| {
                    let num: f64 = (0..win).map(|i| f[i] * f[i + lag]).sum();
                    let el: f64 = f[lag..lag + win].iter().map(|v| v * v).sum();
                    if e0 > 0.0 && el > 0.0 {
                        num / (e0 * el).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            let best = r.iter().copied().fold(f64::MIN, f64::max);
            if best < VOICING_THRESHOLD {
                return 0.0;
            }
            // earliest local peak close to the best one avoids octave-down errors
            let i = (0..r.len())
                .find(|&i| {
                    r[i] >= 0.9 * best
                        && (i == 0 || r[i] >= r[i - 1])
                        && (i + 1 == r.len() || r[i] >= r[i + 1])
                })
                .unwrap_or(0);
            let shift = if i > 0 && i + 1 < r.len() {
                let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
                let den = a - 2.0 * b + c;
                if den.abs() > 1e-12 {
                    0.5 * (a - c) / den
                } else {
                    0.0
                }
            } else {
                0.0
            };
            sr / ((min_lag + i) as f64 + shift)
        })
        .collect()
}

/// Mean squared difference of two equally shaped log-mel matrices.
pub fn mel_mse(reference: &[Vec<f64>], degraded: &[Vec<f64>]) -> Result<f64> {
    check_shapes("mel_mse", reference, degraded)?;
    let n = (reference.len() * reference[0].len()) as f64;
    Ok(reference
        .iter()
        .zip(degraded)
        .flat_map(|(r, d)| r.iter().zip(d).map(|(a, b)| (a - b).powi(2)))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub lsd: f64,
    pub mcd: f64,
    pub msep: f64,
    pub msep_defined: bool,
    pub vuv_mismatch: f64,
    pub mel_mse: f64,
    pub frames: usize,
}

impl MetricReport {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lsd", format!("{:.6}", self.lsd)),
            ("mcd", format!("{:.6}", self.mcd)),
            ("msep", format!("{:.6}", self.msep)),
            ("msep_defined", self.msep_defined.to_string()),
            ("vuv_mismatch", format!("{:.6}", self.vuv_mismatch)),
            ("mel_mse", format!("{:.6}", self.mel_mse)),
            ("frames", self.frames.to_string()),
        ]
    }

    /// `key<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }
}

/// All metrics between two waveforms; the longer one is trimmed to the
/// shorter length first.
pub fn evaluate_waveforms(reference: &[f32], degraded: &[f32], cfg: &CodecConfig) -> Result<MetricReport> {
    let n = reference.len().min(degraded.len());
    if n == 0 {
        return Err(Error::invalid("cannot evaluate an empty waveform"));
    }
    let (r, d) = (&reference[..n], &degraded[..n]);
    let analyzer = MelAnalyzer::new(cfg);
    let spec_r = analyzer.stft_magnitude(r)?;
    let spec_d = analyzer.stft_magnitude(d)?;
    let mel = |w: &[f32]| -> Result<Vec<Vec<f64>>> {
        let m = analyzer.compute(w)?;
        Ok((0..m.frames())
            .map(|t| m.frame(t).iter().map(|&v| v as f64).collect())
            .collect())
    };
    let (mel_r, mel_d) = (mel(r)?, mel(d)?);
    let ceps = |m: &[Vec<f64>]| m.iter().map(|f| mel_cepstrum(f, MCD_COEFFS)).collect::<Vec<_>>();
    let pitch = pitch_metrics(&track_f0(r, cfg.sample_rate), &track_f0(d, cfg.sample_rate))?;
    Ok(MetricReport {
        lsd: lsd(&spec_r, &spec_d)?,
        mcd: mcd(&ceps(&mel_r), &ceps(&mel_d), MCD_COEFFS)?,
        msep: pitch.msep,
        msep_defined: pitch.msep_defined,
        vuv_mismatch: pitch.vuv_mismatch,
        mel_mse: mel_mse(&mel_r, &mel_d)?,
        frames: mel_r.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsd_examples() {
        let a = vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.25, 4.0]];
        assert_eq!(lsd(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * 10.0).collect()).collect();
        assert!((lsd(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![vec![2.0, 1.0, 3.0], vec![0.5, 1.0, 8.0]];
        // hand evaluation: frame 0 has two bins at ±log10 2, frame 1 has log10 4 and log10 2
        let l2 = 2f64.log10();
        let f0 = (2.0 * l2 * l2 / 3.0).sqrt();
        let f1 = ((4.0 * l2 * l2 + l2 * l2) / 3.0).sqrt();
        assert!((lsd(&a, &c).unwrap() - (f0 + f1) / 2.0).abs() < 1e-12);
        assert!(lsd(&a, &a[..1]).is_err());
        let z = vec![vec![0.0, 1e-9]];
        assert_eq!(lsd(&z, &[vec![1e-7, 0.0]]).unwrap(), 0.0);
    }

    #[test]
    fn mcd_examples() {
        let a = vec![vec![0.0; 14]];
        assert_eq!(mcd(&a, &a, 13).unwrap(), 0.0);
        let mut b = a.clone();
        b[0][1] = 1.0;
        assert!((mcd(&a, &b, 13).unwrap() - 6.141_851_463_7).abs() < 1e-6);
        b[0][0] = 50.0;
        assert!((mcd(&a, &b, 13).unwrap() - 6.141_851_463_7).abs() < 1e-6);
        let b2 = vec![b[0].iter().map(|v| v * 2.0).collect::<Vec<_>>()];
        assert!((mcd(&a, &b2, 13).unwrap() - 2.0 * 6.141_851_463_7).abs() < 1e-5);
        assert!(mcd(&a, &[vec![0.0; 5]], 13).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let c = mel_cepstrum(&x, 15);
        let e1: f64 = x.iter().map(|v| v * v).sum();
        let e2: f64 = c.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-10);
        let flat = mel_cepstrum(&[2.0; 8], 3);
        assert!((flat[0] - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(flat[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pitch_examples() {
        let same = pitch_metrics(&[100.0, 0.0, 120.0], &[100.0, 0.0, 120.0]).unwrap();
        assert_eq!((same.msep, same.vuv_mismatch), (0.0, 0.0));
        let p = pitch_metrics(&[100.0, 0.0], &[110.0, 0.0]).unwrap();
        assert_eq!((p.msep, p.vuv_mismatch), (100.0, 0.0));
        let p = pitch_metrics(&[100.0, 100.0], &[100.0, 0.0]).unwrap();
        assert_eq!(p.vuv_mismatch, 0.5);
        let p = pitch_metrics(&[0.0, 100.0], &[100.0, 0.0]).unwrap();
        assert!(!p.msep_defined && p.msep == 0.0 && p.vuv_mismatch == 1.0);
        assert!(pitch_metrics(&[1.0], &[]).is_err());
    }

    #[test]
    fn tracker_finds_tone_and_silence() {
        let sr = 22050;
        let mut w: Vec<f32> = (0..sr)
            .map(|n| {
                let t = n as f64 / sr as f64;
                (0.3 * (2.0 * std::f64::consts::PI * 150.0 * t).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 300.0 * t).sin()) as f32
            })
            .collect();
        w.extend(std::iter::repeat_n(0.0, sr as usize / 2));
        let f0 = track_f0(&w, sr);
        assert_eq!(f0.len(), (w.len()).div_ceil(110));
        let voiced = &f0[10..150];
        assert!(voiced.iter().all(|&f| (f - 150.0).abs() < 1.5), "{voiced:?}");
        assert!(f0[f0.len() - 50..].iter().all(|&f| f == 0.0));
    }

    #[test]
    fn waveform_report_is_zero_on_identity() {
        let cfg = CodecConfig::desk();
        let w: Vec<f32> = (0..8000).map(|n| ((n as f32) * 0.05).sin() * 0.3).collect();
        let r = evaluate_waveforms(&w, &w, &cfg).unwrap();
        assert_eq!((r.lsd, r.mcd, r.msep, r.vuv_mismatch, r.mel_mse), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.to_text().starts_with("lsd\t0.000000\n"));
    }

    proptest! {
        #[test]
        fn metrics_are_nonnegative_and_zero_on_self(
            a in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 14), 1..6),
            scale in 0.1f64..10.0,
        ) {
            let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale + 0.5).collect()).collect();
            prop_assert_eq!(lsd(&a, &a).unwrap(), 0.0);
            prop_assert!(lsd(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(mcd(&a, &a, 13).unwrap(), 0.0);
            prop_assert!(mcd(&a, &b, 13).unwrap() >= 0.0);
            prop_assert!(mel_mse(&a, &b).unwrap() >= 0.0);
            let m1 = mcd(&a, &b, 13).unwrap();
            let b2: Vec<Vec<f64>> = a.iter().zip(&b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + 2.0 * (q - p)).collect()).collect();
            prop_assert!((mcd(&a, &b2, 13).unwrap() - 2.0 * m1).abs() < 1e-9 * (1.0 + m1));
        }
    }
}
