//! WAV files and the dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavSpec};

use super::{mel::MelAnalyzer, PhonemeSequence, Utterance};
use crate::config::CodecConfig;
use crate::error::{Error, Result};

/// Mono samples in `[-1, 1]` and the sample rate. Multi-channel audio is
/// averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let ch = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(ch)
        .map(|c| c.iter().sum::<f32>() / ch as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes 32-bit float mono audio.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub speaker: usize,
    pub phonemes: PhonemeSequence,
}

fn parse_list(field: &str, what: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::format("manifest", format!("line {line}: bad {what} '{t}'")))
        })
        .collect()
}

/// Parses a manifest; relative wav paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                "manifest",
                format!("line {n}: expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let speaker = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::format("manifest", format!("line {n}: bad speaker id '{}'", fields[1])))?;
        let ids = parse_list(fields[2], "phoneme id", n)?;
        let durations = parse_list(fields[3], "duration", n)?;
        let phonemes = PhonemeSequence::new(ids, durations)
            .map_err(|e| Error::format("manifest", format!("line {n}: {e}")))?;
        out.push(ManifestEntry {
            wav: base.join(fields[0]),
            speaker,
            phonemes,
        });
    }
    Ok(out)
}

/// Writes `manifest.tsv` and `wavs/utt_NNNNN.wav` under `dir`.
pub fn write_corpus(dir: &Path, utts: &[Utterance], sample_rate: u32) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("wavs"))?;
    let manifest = dir.join("manifest.tsv");
    let mut f = fs::File::create(&manifest)?;
    for (i, u) in utts.iter().enumerate() {
        let wave = u
            .waveform
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("utterance {i} has no waveform")))?;
        let rel = format!("wavs/utt_{i:05}.wav");
        write_wav(&dir.join(&rel), wave, sample_rate)?;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(
            f,
            "{rel}\t{}\t{}\t{}",
            u.speaker,
            join(&u.phonemes.ids),
            join(&u.phonemes.durations)
        )?;
    }
    Ok(manifest)
}

/// Loads a corpus from a manifest file or a directory containing `manifest.tsv`.
pub fn load_corpus(path: &Path, cfg: &CodecConfig) -> Result<Vec<Utterance>> {
    let manifest = if path.is_dir() {
        path.join("manifest.tsv")
    } else {
        path.to_path_buf()
    };
    let analyzer = MelAnalyzer::new(cfg);
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            if let Some(&bad) = e.phonemes.ids.iter().find(|&&id| id >= cfg.phoneme_vocab) {
                return Err(Error::invalid(format!(
                    "{}: phoneme id {bad} outside vocabulary of {}",
                    e.wav.display(),
                    cfg.phoneme_vocab
                )));
            }
            let (wave, sr) = read_wav(&e.wav)?;
            if sr != cfg.sample_rate {
                return Err(Error::invalid(format!(
                    "{}: sample rate {sr} Hz, expected {}",
                    e.wav.display(),
                    cfg.sample_rate
                )));
            }
            let mel = analyzer.compute(&wave)?;
            Utterance::new(mel, e.phonemes, e.speaker, Some(wave))
        })
        .collect()
}
