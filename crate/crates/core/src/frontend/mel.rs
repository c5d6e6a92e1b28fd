//! STFT magnitude → mel filterbank → natural log.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::config::CodecConfig;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-5;

/// Frame-major log-mel matrix `[frames, bands]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
}

impl MelSpectrogram {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 || values.rows() == 0 {
            return Err(Error::invalid(format!(
                "mel spectrogram must be a non-empty matrix, got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bands(&self) -> usize {
        self.values.cols()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.values.row(t)
    }

    pub fn slice(&self, start: usize, len: usize) -> MelSpectrogram {
        Self {
            values: self.values.slice_rows(start, len),
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    // Slaney: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Centre frequencies of the mel bands.
pub fn band_centers(cfg: &CodecConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (1..=cfg.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Area-normalised triangular filters, `[n_mels][n_fft/2 + 1]`.
pub fn mel_filterbank(cfg: &CodecConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.win / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.win as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            let norm = 2.0 / (r - l);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Reusable analyser holding the window, filterbank and FFT plan.
pub struct MelAnalyzer {
    n_fft: usize,
    hop: usize,
    n_mels: usize,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: &CodecConfig) -> Self {
        let n_fft = cfg.win;
        let window = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            n_fft,
            hop: cfg.hop,
            n_mels: cfg.n_mels,
            window,
            filters: mel_filterbank(cfg),
            fft,
        }
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    /// Magnitude spectra `[frames][n_fft/2 + 1]`, frames centred at `t·hop`
    /// with reflect padding.
    pub fn stft_magnitude(&self, wave: &[f32]) -> Result<Vec<Vec<f64>>> {
        if wave.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        if let Some(i) = wave.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        let n = wave.len() as isize;
        let half = (self.n_fft / 2) as isize;
        let frames = self.frame_count(wave.len());
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = (t * self.hop) as isize - half;
            for (j, c) in buf.iter_mut().enumerate() {
                let s = wave[reflect(start + j as isize, n)] as f64;
                *c = Complex::new(s * self.window[j], 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm()).collect());
        }
        Ok(out)
    }

    pub fn compute(&self, wave: &[f32]) -> Result<MelSpectrogram> {
        let mags = self.stft_magnitude(wave)?;
        let mut data = Vec::with_capacity(mags.len() * self.n_mels);
        for mag in &mags {
            for f in &self.filters {
                let e: f64 = f.iter().zip(mag).map(|(w, m)| w * m).sum();
                data.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        MelSpectrogram::new(Tensor::matrix(mags.len(), self.n_mels, data)?)
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

pub fn compute_mel(wave: &[f32], cfg: &CodecConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(cfg).compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_frames_and_floor() {
        let cfg = CodecConfig::full();
        let mel = compute_mel(&vec![0.0; 22050], &cfg).unwrap();
        assert_eq!(mel.frames(), 87);
        assert_eq!(mel.bands(), 80);
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn single_hop() {
        let cfg = CodecConfig::full();
        let wave: Vec<f32> = (0..256).map(|i| (i as f32 * 0.1).sin() * 0.5).collect();
        assert_eq!(compute_mel(&wave, &cfg).unwrap().frames(), 1);
        assert_eq!(compute_mel(&wave[..1], &cfg).unwrap().frames(), 1);
        assert_eq!(compute_mel(&vec![0.1; 257], &cfg).unwrap().frames(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = CodecConfig::full();
        assert!(compute_mel(&[], &cfg).is_err());
        assert!(compute_mel(&[0.0, f32::NAN], &cfg).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn slaney_scale_round_trips() {
        for f in [0.0, 440.0, 999.0, 1000.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let cfg = CodecConfig::full();
        let wave: Vec<f32> = (0..22050)
            .map(|n| (0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 22050.0).sin()) as f32)
            .collect();
        let mel = compute_mel(&wave, &cfg).unwrap();
        // independent slaney band centres: 200/3 Hz per mel below 1 kHz
        let top = 15.0 + (8.0f64).ln() / ((6.4f64).ln() / 27.0);
        let centers: Vec<f64> = (1..=80)
            .map(|i| {
                let m = top * i as f64 / 81.0;
                if m < 15.0 { m * 200.0 / 3.0 } else { 1000.0 * ((6.4f64).ln() / 27.0 * (m - 15.0)).exp() }
            })
            .collect();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        for t in 2..mel.frames() - 2 {
            let row = mel.frame(t);
            let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn hop_shift_covariance() {
        let cfg = CodecConfig::full();
        let wave: Vec<f32> = (0..8000).map(|n| (n as f32 * 0.037).sin() * 0.3 + (n as f32 * 0.21).cos() * 0.1).collect();
        let k = 3;
        let mut shifted = vec![0.05f32; 256 * k];
        shifted.extend_from_slice(&wave);
        let a = compute_mel(&wave, &cfg).unwrap();
        let b = compute_mel(&shifted, &cfg).unwrap();
        assert_eq!(b.frames(), a.frames() + k);
        for t in 2..a.frames() - 2 {
            assert_eq!(a.frame(t), b.frame(t + k));
        }
    }
}
