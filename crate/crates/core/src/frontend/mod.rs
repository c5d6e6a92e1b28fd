//! Audio and text ingestion.

mod io;
mod mel;
mod synth;

pub use io::{load_corpus, read_manifest, read_wav, write_corpus, write_wav, ManifestEntry};
pub use mel::{
    band_centers, compute_mel, hz_to_mel, mel_filterbank, mel_to_hz, MelAnalyzer, MelSpectrogram,
    LOG_FLOOR,
};
pub use synth::{gen_synthetic_corpus, PhonemeVoice, SynthOptions, Voicebank, SPEAKER_TILT};

use rand::Rng;

use crate::error::{Error, Result};

/// Phoneme ids with per-phoneme frame durations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub durations: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if ids.len() != durations.len() {
            return Err(Error::invalid(format!(
                "{} phoneme ids but {} durations",
                ids.len(),
                durations.len()
            )));
        }
        if durations.contains(&0) {
            return Err(Error::invalid("phoneme durations must be positive"));
        }
        Ok(Self { ids, durations })
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// A labelled utterance: mel, aligned phonemes, speaker and optional audio.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub mel: MelSpectrogram,
    pub phonemes: PhonemeSequence,
    pub speaker: usize,
    pub waveform: Option<Vec<f32>>,
}

impl Utterance {
    pub fn new(
        mel: MelSpectrogram,
        phonemes: PhonemeSequence,
        speaker: usize,
        waveform: Option<Vec<f32>>,
    ) -> Result<Self> {
        if phonemes.total_frames() != mel.frames() {
            return Err(Error::DurationMismatch {
                expected: mel.frames(),
                actual: phonemes.total_frames(),
            });
        }
        Ok(Self {
            mel,
            phonemes,
            speaker,
            waveform,
        })
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.phonemes
            .ids
            .iter()
            .zip(&self.phonemes.durations)
            .flat_map(|(&id, &d)| std::iter::repeat_n(id, d))
            .collect()
    }
}

/// Expands phoneme ids to frame resolution. `frames` is the mel length the
/// durations must cover.
pub fn length_regulate(phonemes: &PhonemeSequence, frames: usize) -> Result<Vec<usize>> {
    let total = phonemes.total_frames();
    if total != frames {
        return Err(Error::DurationMismatch {
            expected: frames,
            actual: total,
        });
    }
    if phonemes.durations.contains(&0) {
        return Err(Error::invalid("phoneme durations must be positive"));
    }
    let mut out = Vec::with_capacity(total);
    for (&id, &d) in phonemes.ids.iter().zip(&phonemes.durations) {
        out.extend(std::iter::repeat_n(id, d));
    }
    Ok(out)
}

/// `len` frames read cyclically from `mel` starting at `start`.
fn cyclic_window(mel: &MelSpectrogram, start: usize, len: usize) -> MelSpectrogram {
    let t = mel.frames();
    if start + len <= t {
        return mel.slice(start, len);
    }
    let bands = mel.bands();
    let mut data = Vec::with_capacity(len * bands);
    for i in 0..len {
        data.extend_from_slice(mel.frame((start + i) % t));
    }
    MelSpectrogram {
        values: crate::autodiff::Tensor::matrix(len, bands, data).expect("sized by construction"),
    }
}

/// Random `len`-frame crop for the paralinguistic encoder; inputs shorter
/// than `len` are tiled cyclically first.
pub fn crop_paralinguistic_window<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    len: usize,
    rng: &mut R,
) -> MelSpectrogram {
    let t = mel.frames();
    let start = if t >= len {
        rng.random_range(0..=t - len)
    } else {
        rng.random_range(0..t)
    };
    cyclic_window(mel, start, len)
}

/// Inference-time reference window: the first `len` frames, tiled if short.
pub fn reference_window(mel: &MelSpectrogram, len: usize) -> MelSpectrogram {
    cyclic_window(mel, 0, len)
}
