use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use secousti::autodiff::Tensor;
use secousti::frontend::{
    compute_mel, gen_synthetic_corpus, load_corpus, read_wav, reference_window, write_corpus, write_wav,
    SynthOptions,
};
use secousti::metrics::evaluate_waveforms;
use secousti::quantizer::utilization;
use secousti::streaming::TokenStream;
use secousti::trainer::{load_checkpoint, save_checkpoint, train_step, TrainState};
use secousti::vocoder::{mel_to_wave, DEFAULT_PHASE_ITERS};
use secousti::{Codec, CodecConfig, RunConfig};

const SEED_ENV: &str = "SECOUSTI_SEED";
const LOG_EVERY: u64 = 100;
const SAVE_EVERY: u64 = 1000;

#[derive(Parser)]
#[command(name = "secousti", version, about = "Streaming semantic speech codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec on a corpus directory (manifest.tsv + wavs).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its configuration must match --config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode a waveform into a token file.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference for the paralinguistic vector (defaults to the input).
        #[arg(long)]
        paralinguistic: Option<PathBuf>,
    },
    /// Decode a token file to a waveform (.wav) or a log-mel text matrix.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PHASE_ITERS)]
        phase_iters: usize,
    },
    /// Objective metrics between a reference and a degraded waveform.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "deg")]
        degraded: PathBuf,
    },
    /// Codebook utilization of a trained model on a corpus.
    CodebookStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the synthetic two-speaker corpus.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Configuration, parameter counts and bitrate of a checkpoint.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}='{v}' is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn log_config(run: &RunConfig) {
    eprintln!("resolved configuration:");
    for line in run.to_text().lines().filter(|l| !l.starts_with('#')) {
        eprintln!("  {line}");
    }
}

fn load_model(path: &Path) -> Result<TrainState<f32>> {
    let st = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    log_config(&st.run);
    Ok(st)
}

fn load_wave(path: &Path, cfg: &CodecConfig) -> Result<Vec<f32>> {
    let (wave, sr) = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        sr == cfg.sample_rate,
        "{}: sample rate {sr} Hz, model expects {} Hz",
        path.display(),
        cfg.sample_rate
    );
    Ok(wave)
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, seed: u64) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let run = RunConfig::from_text(&text).with_context(|| format!("parsing {}", config.display()))?;
    let mut st = match resume {
        Some(p) => {
            let st = load_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            ensure!(st.run == run, "checkpoint {} was trained with a different configuration", p.display());
            st
        }
        None => TrainState::new(run, seed)?,
    };
    log_config(&st.run);
    eprintln!("seed {seed}, {} parameters", st.codec.num_params());
    let corpus = load_corpus(data, &st.codec.cfg).with_context(|| format!("loading corpus {}", data.display()))?;
    ensure!(!corpus.is_empty(), "corpus {} is empty", data.display());
    eprintln!("{} utterances", corpus.len());
    let start = Instant::now();
    while st.step < st.run.schedule.total_steps {
        let r = train_step(&mut st, &corpus)?;
        if r.step % LOG_EVERY == 0 || r.step == st.run.schedule.total_steps {
            eprintln!(
                "step {} stage {} total {:.5} mel {:.5} acoustic {:.5} contrastive {:.4} kl_para {:.3} kl_sem {:.3} ({:.0} s)",
                r.step,
                r.stage,
                r.total,
                r.mel,
                r.acoustic,
                r.contrastive,
                r.kl_para,
                r.kl_sem,
                start.elapsed().as_secs_f64()
            );
        }
        if r.step % SAVE_EVERY == 0 {
            save_checkpoint(&st, out)?;
        }
    }
    save_checkpoint(&st, out)?;
    eprintln!("saved {} at step {}", out.display(), st.step);
    Ok(())
}

fn encode(ckpt: &Path, input: &Path, out: &Path, para: Option<&Path>) -> Result<()> {
    let st = load_model(ckpt)?;
    let (codec, cfg) = (&st.codec, &st.codec.cfg);
    let wave = load_wave(input, cfg)?;
    let mel = compute_mel(&wave, cfg)?;
    let codes = codec.encode(&mel.values)?;
    let reference = match para {
        Some(p) => compute_mel(&load_wave(p, cfg)?, cfg)?,
        None => mel.clone(),
    };
    let g = codec.paralinguistic(&reference_window(&reference, cfg.para_frames).values)?;
    let tokens = TokenStream::for_config(cfg, Some(g.into_data()), codes)?;
    fs::write(out, tokens.serialize()?).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{} frames -> {} tokens at {:.2} bps",
        mel.frames(),
        tokens.codes.len(),
        tokens.bitrate()
    );
    Ok(())
}

fn decode(ckpt: &Path, input: &Path, out: &Path, phase_iters: usize) -> Result<()> {
    let st = load_model(ckpt)?;
    let (codec, cfg) = (&st.codec, &st.codec.cfg);
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let tokens = TokenStream::deserialize(&bytes).with_context(|| format!("parsing {}", input.display()))?;
    let expected = TokenStream::for_config(cfg, None, Vec::new())?;
    ensure!(
        (tokens.frame_rate, tokens.fsq_d, tokens.fsq_levels, tokens.para_dim)
            == (expected.frame_rate, expected.fsq_d, expected.fsq_levels, expected.para_dim),
        "token header (rate {}/{}, d {}, L {}, D_g {}) does not match the model",
        tokens.frame_rate.0,
        tokens.frame_rate.1,
        tokens.fsq_d,
        tokens.fsq_levels,
        tokens.para_dim
    );
    let g = tokens
        .g
        .clone()
        .context("token file carries no paralinguistic vector")?;
    let mel = codec.decode(&tokens.codes, &Tensor::vector(g))?;
    let is_wav = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let rows: Vec<Vec<f64>> = (0..mel.rows())
            .map(|r| mel.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        ensure!(!rows.is_empty(), "token file holds no tokens");
        let wave = mel_to_wave(&rows, cfg, phase_iters)?;
        write_wav(out, &wave, cfg.sample_rate)?;
    } else {
        let mut text = String::new();
        for r in 0..mel.rows() {
            let row: Vec<String> = mel.row(r).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(text, "{}", row.join(" "));
        }
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    eprintln!("{} tokens -> {} mel frames", tokens.codes.len(), mel.rows());
    Ok(())
}

fn eval(reference: &Path, degraded: &Path) -> Result<()> {
    let (r, sr) = read_wav(reference).with_context(|| format!("reading {}", reference.display()))?;
    let (d, sd) = read_wav(degraded).with_context(|| format!("reading {}", degraded.display()))?;
    ensure!(sr == sd, "sample rates differ ({sr} vs {sd} Hz)");
    let mut cfg = CodecConfig::full();
    cfg.sample_rate = sr;
    cfg.fmax = cfg.fmax.min(sr as f64 / 2.0);
    eprintln!(
        "analysis: sample_rate {} hop {} win {} n_mels {} fmax {}",
        cfg.sample_rate, cfg.hop, cfg.win, cfg.n_mels, cfg.fmax
    );
    let report = evaluate_waveforms(&r, &d, &cfg)?;
    print!("{}", report.to_text());
    Ok(())
}

fn codebook_stats(ckpt: &Path, data: &Path) -> Result<()> {
    let st = load_model(ckpt)?;
    let codec: &Codec<f32> = &st.codec;
    let corpus = load_corpus(data, &codec.cfg).with_context(|| format!("loading corpus {}", data.display()))?;
    let mut codes = Vec::new();
    for u in &corpus {
        codes.extend(codec.encode(&u.mel.values)?);
    }
    let size = codec.cfg.codebook_size().context("codebook size overflows")?;
    let u = utilization(&codes, size)?;
    println!("codebook_size\t{}", u.codebook_size);
    println!("tokens\t{}", u.total);
    println!("distinct\t{}", u.distinct());
    println!("used_fraction\t{:.6}", u.used_fraction);
    println!("max_frequency\t{:.6}", u.max_frequency);
    for (code, count) in &u.counts {
        println!("code\t{code}\t{count}");
    }
    Ok(())
}

fn gen_data(seed: u64, out: &Path, count: usize) -> Result<()> {
    ensure!(count > 0, "--count must be positive");
    let run = RunConfig::desk();
    log_config(&run);
    let cfg = run.codec;
    eprintln!("seed {seed}, {count} utterances at {} Hz", cfg.sample_rate);
    let utts = gen_synthetic_corpus(seed, count, &cfg, &SynthOptions::default())?;
    let manifest = write_corpus(out, &utts, cfg.sample_rate)?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

fn info(ckpt: &Path) -> Result<()> {
    let st = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = &st.codec.cfg;
    print!("{}", st.run.to_text());
    println!("step\t{}", st.step);
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, t) in st.codec.params.iter() {
        *groups.entry(name.split('.').next().unwrap_or(name)).or_default() += t.numel();
    }
    for (g, n) in &groups {
        println!("params.{g}\t{n}");
    }
    println!("params.total\t{}", st.codec.num_params());
    println!("token_rate_hz\t{:.4}", cfg.token_rate_hz());
    println!("bits_per_token\t{:.4}", cfg.bits_per_token());
    println!("bitrate_bps\t{:.2}", cfg.bitrate());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
        } => train(&config, &data, &out, resume.as_deref(), resolve_seed(seed)?),
        Command::Encode {
            ckpt,
            input,
            out,
            paralinguistic,
        } => encode(&ckpt, &input, &out, paralinguistic.as_deref()),
        Command::Decode {
            ckpt,
            input,
            out,
            phase_iters,
        } => decode(&ckpt, &input, &out, phase_iters),
        Command::Eval {
            reference,
            degraded,
        } => eval(&reference, &degraded),
        Command::CodebookStats { ckpt, data } => codebook_stats(&ckpt, &data),
        Command::GenData { seed, out, count } => gen_data(resolve_seed(seed)?, &out, count),
        Command::Info { ckpt } => info(&ckpt),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
