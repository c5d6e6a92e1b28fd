//! Deterministic synthetic speech-like corpus.
//!
//! Each phoneme id owns a fixed "voice": a harmonic series shaped by two
//! formant peaks (voiced), white noise (unvoiced) or near silence (id 0).
//! Utterances concatenate phoneme segments whose lengths are whole hops,
//! so the mel frame count equals the duration sum exactly. Speakers differ
//! only by a first-order spectral tilt filter applied to the whole signal.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{mel::MelAnalyzer, PhonemeSequence, Utterance};
use crate::config::CodecConfig;
use crate::error::{Error, Result};

/// Tilt coefficient `a` per speaker in `y[n] = (x[n] + a·x[n−1]) / (1 + |a|)`.
/// Speaker 0 is dark (low-pass), speaker 1 bright (high-pass).
pub const SPEAKER_TILT: [f64; 2] = [0.7, -0.7];

const INVENTORY_SEED: u64 = 0x5ec0_0571;
const EDGE_RAMP: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeVoice {
    pub f0: f64,
    pub formants: [f64; 2],
    pub voiced: bool,
    pub noise: f64,
}

/// The fixed phoneme inventory shared by every synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Voicebank {
    pub voices: Vec<PhonemeVoice>,
}

impl Voicebank {
    pub fn standard(vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(INVENTORY_SEED);
        let mut voices = vec![PhonemeVoice {
            f0: 0.0,
            formants: [0.0, 0.0],
            voiced: false,
            noise: 0.001,
        }];
        for _ in 1..vocab {
            let voiced = rng.random_bool(0.75);
            voices.push(PhonemeVoice {
                f0: rng.random_range(100.0..200.0),
                formants: [rng.random_range(300.0..900.0), rng.random_range(1000.0..3500.0)],
                voiced,
                noise: if voiced { 0.003 } else { rng.random_range(0.03..0.1) },
            });
        }
        Self { voices }
    }

    /// Harmonic `(frequency, amplitude)` pairs of a voiced phoneme.
    pub fn harmonics(&self, id: usize, sample_rate: u32) -> Vec<(f64, f64)> {
        let v = &self.voices[id];
        if !v.voiced {
            return Vec::new();
        }
        let nyq = (sample_rate as f64 / 2.0).min(7500.0);
        let env = |f: f64| {
            v.formants
                .iter()
                .map(|&fm| (-((f - fm) / 200.0).powi(2)).exp())
                .sum::<f64>()
                + 0.05
        };
        let freqs: Vec<f64> = (1..)
            .map(|k| k as f64 * v.f0)
            .take_while(|&f| f < nyq)
            .collect();
        let total: f64 = freqs.iter().map(|&f| env(f)).sum();
        freqs.iter().map(|&f| (f, 0.5 * env(f) / total)).collect()
    }

    fn render<R: Rng>(&self, id: usize, samples: usize, sr: u32, rng: &mut R, out: &mut Vec<f32>) {
        let harmonics = self.harmonics(id, sr);
        let noise = self.voices[id].noise;
        for n in 0..samples {
            let t = n as f64 / sr as f64;
            let mut s: f64 = harmonics
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t).sin())
                .sum();
            let edge = n.min(samples - 1 - n);
            if edge < EDGE_RAMP {
                s *= 0.5 - 0.5 * (PI * edge as f64 / EDGE_RAMP as f64).cos();
            }
            let z: f64 = StandardNormal.sample(rng);
            out.push((s + noise * z) as f32);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub speakers: usize,
    pub phonemes: (usize, usize),
    pub durations: (usize, usize),
    pub keep_waveform: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            speakers: 2,
            phonemes: (6, 14),
            durations: (3, 10),
            keep_waveform: true,
        }
    }
}

/// Applies a speaker's tilt filter in place.
pub fn apply_tilt(x: &mut [f32], a: f64) {
    let mut prev = 0.0f64;
    let g = 1.0 / (1.0 + a.abs());
    for s in x.iter_mut() {
        let cur = *s as f64;
        *s = ((cur + a * prev) * g) as f32;
        prev = cur;
    }
}

/// `n_utts` utterances; utterance `i` uses speaker `i mod speakers` and an
/// rng stream derived from `(seed, i)`.
pub fn gen_synthetic_corpus(
    seed: u64,
    n_utts: usize,
    cfg: &CodecConfig,
    opts: &SynthOptions,
) -> Result<Vec<Utterance>> {
    if n_utts == 0 {
        return Err(Error::invalid("n_utts must be at least 1"));
    }
    if cfg.phoneme_vocab < 2 {
        return Err(Error::invalid("synthetic corpus needs a vocabulary of at least 2"));
    }
    if opts.speakers == 0 || opts.speakers > SPEAKER_TILT.len() {
        return Err(Error::invalid(format!(
            "speakers must be in 1..={}",
            SPEAKER_TILT.len()
        )));
    }
    let (pmin, pmax) = opts.phonemes;
    let (dmin, dmax) = opts.durations;
    if pmin == 0 || pmin > pmax || dmin == 0 || dmin > dmax {
        return Err(Error::invalid("bad phoneme count or duration range"));
    }
    let bank = Voicebank::standard(cfg.phoneme_vocab);
    let analyzer = MelAnalyzer::new(cfg);
    (0..n_utts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let speaker = i % opts.speakers;
            let n_ph = rng.random_range(pmin..=pmax);
            let mut ids = vec![0];
            let mut durations = vec![rng.random_range(2..=4)];
            for _ in 0..n_ph {
                ids.push(rng.random_range(1..cfg.phoneme_vocab));
                durations.push(rng.random_range(dmin..=dmax));
            }
            ids.push(0);
            durations.push(rng.random_range(2..=4));
            let mut wave = Vec::new();
            for (&id, &d) in ids.iter().zip(&durations) {
                bank.render(id, d * cfg.hop, cfg.sample_rate, &mut rng, &mut wave);
            }
            apply_tilt(&mut wave, SPEAKER_TILT[speaker]);
            let mel = analyzer.compute(&wave)?;
            let phonemes = PhonemeSequence::new(ids, durations)?;
            Utterance::new(
                mel,
                phonemes,
                speaker,
                opts.keep_waveform.then_some(wave),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::band_centers;

    fn tiny() -> CodecConfig {
        CodecConfig::desk()
    }

    #[test]
    fn deterministic_and_aligned() {
        let cfg = tiny();
        let a = gen_synthetic_corpus(1, 2, &cfg, &SynthOptions::default()).unwrap();
        let b = gen_synthetic_corpus(1, 2, &cfg, &SynthOptions::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mel, y.mel);
            assert_eq!(x.phonemes, y.phonemes);
            assert_eq!(x.waveform, y.waveform);
            assert_eq!(x.phonemes.total_frames(), x.mel.frames());
            assert!(x.waveform.as_ref().unwrap().iter().all(|s| s.abs() <= 1.0));
        }
        assert_eq!(a[0].speaker, 0);
        assert_eq!(a[1].speaker, 1);
        assert!(gen_synthetic_corpus(1, 0, &cfg, &SynthOptions::default()).is_err());
    }

    /// Mean log-mel over the interior frames of every segment with phoneme `id`.
    fn signature(u: &Utterance, id: usize) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; u.mel.bands()];
        let mut n = 0usize;
        let mut start = 0;
        for (&p, &d) in u.phonemes.ids.iter().zip(&u.phonemes.durations) {
            if p == id && d >= 7 {
                for t in start + 3..start + d - 3 {
                    for (a, &v) in acc.iter_mut().zip(u.mel.frame(t)) {
                        *a += v as f64;
                    }
                    n += 1;
                }
            }
            start += d;
        }
        (n > 0).then(|| acc.iter().map(|a| a / n as f64).collect())
    }

    #[test]
    fn phoneme_signature_matches_up_to_tilt() {
        let cfg = tiny();
        let corpus = gen_synthetic_corpus(9, 24, &cfg, &SynthOptions::default()).unwrap();
        let bank = Voicebank::standard(cfg.phoneme_vocab);
        let centers = band_centers(&cfg);
        let tilt_db = |a: f64, f: f64| {
            let w = 2.0 * PI * f / cfg.sample_rate as f64;
            let re = 1.0 + a * w.cos();
            let im = -a * w.sin();
            ((re * re + im * im).sqrt() / (1.0 + a.abs())).ln()
        };
        let mut checked_same = 0;
        let mut checked_cross = 0;
        for id in 1..cfg.phoneme_vocab {
            if !bank.voices[id].voiced {
                continue;
            }
            let sigs: Vec<(usize, Vec<f64>)> = corpus
                .iter()
                .filter_map(|u| signature(u, id).map(|s| (u.speaker, s)))
                .collect();
            // strongest band of this phoneme's spectrum
            let (peak_f, _) = bank
                .harmonics(id, cfg.sample_rate)
                .into_iter()
                .fold((0.0, 0.0), |m, h| if h.1 > m.1 { h } else { m });
            let band = centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - peak_f).abs().total_cmp(&(b.1 - peak_f).abs()))
                .unwrap()
                .0;
            for i in 0..sigs.len() {
                for j in i + 1..sigs.len() {
                    let (si, a) = &sigs[i];
                    let (sj, b) = &sigs[j];
                    let diff = b[band] - a[band];
                    if si == sj {
                        assert!(diff.abs() < 0.15, "phoneme {id} band {band}: {diff}");
                        checked_same += 1;
                    } else {
                        let expected = tilt_db(SPEAKER_TILT[*sj], centers[band])
                            - tilt_db(SPEAKER_TILT[*si], centers[band]);
                        assert!(
                            (diff - expected).abs() < 0.25,
                            "phoneme {id} band {band}: got {diff}, tilt predicts {expected}"
                        );
                        checked_cross += 1;
                    }
                }
            }
        }
        assert!(checked_same > 5 && checked_cross > 5);
    }
}
