use std::fs;

use anyhow::Result;
use secousti::frontend::{
    gen_synthetic_corpus, load_corpus, read_manifest, read_wav, write_corpus, write_wav, SynthOptions,
};
use secousti::CodecConfig;

#[test]
fn corpus_survives_disk_round_trip() -> Result<()> {
    let cfg = CodecConfig::desk();
    let utts = gen_synthetic_corpus(11, 4, &cfg, &SynthOptions::default())?;
    let dir = tempfile::tempdir()?;
    let manifest = write_corpus(dir.path(), &utts, cfg.sample_rate)?;
    assert_eq!(read_manifest(&manifest)?.len(), 4);
    let back = load_corpus(dir.path(), &cfg)?;
    assert_eq!(back.len(), utts.len());
    for (a, b) in utts.iter().zip(&back) {
        assert_eq!(a.phonemes, b.phonemes);
        assert_eq!(a.speaker, b.speaker);
        assert_eq!(a.waveform, b.waveform);
        assert_eq!(a.mel.values, b.mel.values);
    }
    Ok(())
}

#[test]
fn bad_corpora_are_rejected() -> Result<()> {
    let cfg = CodecConfig::desk();
    let dir = tempfile::tempdir()?;
    assert!(load_corpus(dir.path(), &cfg).is_err());

    write_wav(&dir.path().join("a.wav"), &[0.0; 2048], 16_000)?;
    fs::write(dir.path().join("manifest.tsv"), "a.wav\t0\t1\t8\n")?;
    assert!(load_corpus(dir.path(), &cfg).is_err(), "sample rate mismatch");

    write_wav(&dir.path().join("a.wav"), &[0.0; 2048], cfg.sample_rate)?;
    assert!(load_corpus(dir.path(), &cfg).is_ok());
    fs::write(dir.path().join("manifest.tsv"), "a.wav\t0\t1\t7\n")?;
    assert!(load_corpus(dir.path(), &cfg).is_err(), "duration mismatch");
    fs::write(dir.path().join("manifest.tsv"), "a.wav\t0\t99\t8\n")?;
    assert!(load_corpus(dir.path(), &cfg).is_err(), "phoneme outside vocabulary");
    fs::write(dir.path().join("manifest.tsv"), "a.wav\t0\t1\n")?;
    assert!(load_corpus(dir.path(), &cfg).is_err(), "missing field");

    let (w, sr) = read_wav(&dir.path().join("a.wav"))?;
    assert_eq!((w.len(), sr), (2048, cfg.sample_rate));
    Ok(())
}
