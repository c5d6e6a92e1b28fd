//! Codec and training-schedule hyperparameters with a line-oriented
//! `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

macro_rules! config_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty, )*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }

            /// Sets one field from text. Returns `Ok(false)` for unknown keys.
            pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| {
                            Error::Config(format!("bad value '{value}' for key '{key}'"))
                        })?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

config_struct! {
    /// Architecture hyperparameters.
    pub struct CodecConfig {
        sample_rate: u32,
        hop: usize,
        win: usize,
        n_mels: usize,
        fmin: f64,
        fmax: f64,
        /// Fixed affine normalisation of log-mel inputs (and inverse on output).
        mel_mean: f64,
        mel_std: f64,
        /// Semantic downsampling factor (tokens every `r_sem` mel frames).
        r_sem: usize,
        /// Acoustic downsampling factor; also the speech encoder's total stride.
        r_ac: usize,
        model_dim: usize,
        heads: usize,
        /// Transformer depth of the acoustic projection, semantic projection and connector.
        layers: usize,
        ffn: usize,
        attn_window: usize,
        rope_base: f64,
        conv_channels: usize,
        kernel: usize,
        dilation_base: usize,
        residual_layers: usize,
        acous_dim: usize,
        joint_dim: usize,
        fsq_d: usize,
        fsq_levels: usize,
        /// Initial contrastive temperature (the logit scale multiplying similarities).
        tau_init: f64,
        normalize_embeddings: bool,
        kl_margin: f64,
        para_dim: usize,
        para_channels: usize,
        para_frames: usize,
        phoneme_vocab: usize,
        phoneme_layers: usize,
    }
}

config_struct! {
    /// Multi-stage optimisation schedule and optimiser settings.
    pub struct ScheduleConfig {
        stage1_end: u64,
        kl_start_para: u64,
        kl_end_para: u64,
        kl_upper_para: f64,
        kl_start_sem: u64,
        kl_end_sem: u64,
        kl_upper_sem: f64,
        alpha: f64,
        beta: f64,
        lr: f64,
        adam_beta1: f64,
        adam_beta2: f64,
        adam_eps: f64,
        total_steps: u64,
        batch_size: usize,
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl CodecConfig {
    /// Full-size architecture.
    pub fn full() -> Self {
        Self {
            sample_rate: 22050,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            mel_mean: -5.0,
            mel_std: 4.0,
            r_sem: 4,
            r_ac: 4,
            model_dim: 512,
            heads: 8,
            layers: 8,
            ffn: 2048,
            attn_window: 250,
            rope_base: 10000.0,
            conv_channels: 80,
            kernel: 7,
            dilation_base: 2,
            residual_layers: 1,
            acous_dim: 256,
            joint_dim: 256,
            fsq_d: 8,
            fsq_levels: 5,
            tau_init: 1.0 / 0.07,
            normalize_embeddings: true,
            kl_margin: 1.0,
            para_dim: 256,
            para_channels: 128,
            para_frames: 259,
            phoneme_vocab: 32,
            phoneme_layers: 4,
        }
    }

    /// Small model that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            model_dim: 32,
            heads: 4,
            layers: 1,
            ffn: 64,
            conv_channels: 16,
            acous_dim: 16,
            joint_dim: 16,
            fsq_d: 2,
            fsq_levels: 5,
            para_dim: 16,
            para_channels: 16,
            phoneme_layers: 1,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hop", self.hop),
            ("win", self.win),
            ("n_mels", self.n_mels),
            ("r_sem", self.r_sem),
            ("r_ac", self.r_ac),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("attn_window", self.attn_window),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("dilation_base", self.dilation_base),
            ("residual_layers", self.residual_layers),
            ("acous_dim", self.acous_dim),
            ("joint_dim", self.joint_dim),
            ("fsq_d", self.fsq_d),
            ("para_dim", self.para_dim),
            ("para_channels", self.para_channels),
            ("para_frames", self.para_frames),
            ("phoneme_vocab", self.phoneme_vocab),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.fsq_levels < 3 || self.fsq_levels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fsq_levels must be odd and >= 3, got {}",
                self.fsq_levels
            )));
        }
        if self.codebook_size().is_none() {
            return Err(Error::Config("fsq_levels^fsq_d overflows u64".into()));
        }
        if !self.r_ac.is_power_of_two() {
            return Err(Error::Config(format!("r_ac must be a power of two, got {}", self.r_ac)));
        }
        if !self.r_sem.is_multiple_of(self.r_ac) {
            return Err(Error::Config(format!(
                "r_sem ({}) must be a multiple of r_ac ({})",
                self.r_sem, self.r_ac
            )));
        }
        if !self.model_dim.is_multiple_of(self.heads) || !(self.model_dim / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model_dim {} must split into {} heads of even width",
                self.model_dim, self.heads
            )));
        }
        if !(self.mel_std > 0.0) || !(self.tau_init > 0.0) || !(self.kl_margin >= 0.0) {
            return Err(Error::Config("mel_std and tau_init must be positive, kl_margin non-negative".into()));
        }
        Ok(())
    }

    /// Implied FSQ codebook size `L^d`.
    pub fn codebook_size(&self) -> Option<u64> {
        (self.fsq_levels as u64).checked_pow(self.fsq_d as u32)
    }

    pub fn bits_per_token(&self) -> f64 {
        self.fsq_d as f64 * (self.fsq_levels as f64).log2()
    }

    /// Token rate as an exact rational `(numerator, denominator)` in Hz.
    pub fn token_rate(&self) -> (u32, u32) {
        (self.sample_rate, (self.hop * self.r_sem) as u32)
    }

    pub fn token_rate_hz(&self) -> f64 {
        let (n, d) = self.token_rate();
        n as f64 / d as f64
    }

    pub fn bitrate(&self) -> f64 {
        self.token_rate_hz() * self.bits_per_token()
    }

    /// Frame-rate ratio between semantic tokens and acoustic frames.
    pub fn sem_per_ac(&self) -> usize {
        self.r_sem / self.r_ac
    }

    /// Number of stride-2 stages in the speech encoder / decoder.
    pub fn conv_stages(&self) -> usize {
        self.r_ac.trailing_zeros() as usize
    }

    pub fn half_levels(&self) -> usize {
        self.fsq_levels / 2
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ScheduleConfig {
    pub fn full() -> Self {
        Self {
            stage1_end: 10_000,
            kl_start_para: 20_000,
            kl_end_para: 30_000,
            kl_upper_para: 1e-5,
            kl_start_sem: 20_000,
            kl_end_sem: 30_000,
            kl_upper_sem: 1e-5,
            alpha: 1.0,
            beta: 1e-5,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 40_000,
            batch_size: 64,
        }
    }

    /// Compressed schedule for CPU runs on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            stage1_end: 5_000,
            kl_start_para: 8_000,
            kl_end_para: 12_000,
            kl_start_sem: 8_000,
            kl_end_sem: 12_000,
            lr: 1e-3,
            total_steps: 15_000,
            batch_size: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kl_start_para >= self.kl_end_para || self.kl_start_sem >= self.kl_end_sem {
            return Err(Error::Config("each KL warm-up needs start < end".into()));
        }
        let weights = [
            self.kl_upper_para,
            self.kl_upper_sem,
            self.alpha,
            self.beta,
            self.lr,
            self.adam_eps,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights and optimiser settings must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Codec plus schedule, the unit stored in config files and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            codec: CodecConfig::desk(),
            schedule: ScheduleConfig::desk(),
        }
    }

    pub fn full() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.schedule.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# codec\n");
        for (k, v) in self.codec.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("# schedule\n");
        for (k, v) in self.schedule.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines (`#` comments allowed). An optional
    /// `preset = full|desk` line, which must come first, selects the base
    /// values the remaining keys override. Unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen_key = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if seen_key {
                    return Err(Error::Config("'preset' must precede all other keys".into()));
                }
                cfg = match v {
                    "full" => RunConfig::full(),
                    "desk" => RunConfig::desk(),
                    other => return Err(Error::Config(format!("unknown preset '{other}'"))),
                };
                continue;
            }
            seen_key = true;
            if !cfg.codec.set(k, v)? && !cfg.schedule.set(k, v)? {
                return Err(Error::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn preset_and_overrides() {
        let cfg = RunConfig::from_text("preset = desk\nfsq_d = 3 # comment\nbeta = 0.5\n").unwrap();
        assert_eq!(cfg.codec.fsq_d, 3);
        assert_eq!(cfg.codec.model_dim, CodecConfig::desk().model_dim);
        assert_eq!(cfg.schedule.beta, 0.5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_text("nonsense = 1").is_err());
        assert!(RunConfig::from_text("fsq_levels = 4").is_err());
        assert!(RunConfig::from_text("r_ac = 3").is_err());
        assert!(RunConfig::from_text("model_dim = x").is_err());
        assert!(RunConfig::from_text("fsq_d = 2\npreset = desk").is_err());
        assert!(RunConfig::from_text("kl_start_para = 5\nkl_end_para = 5").is_err());
    }

    #[test]
    fn full_bitrate() {
        let c = CodecConfig::full();
        assert_eq!(c.codebook_size(), Some(390_625));
        assert!((c.bits_per_token() - 18.575).abs() < 1e-3);
        assert!((c.token_rate_hz() - 21.533).abs() < 1e-3);
        assert!((c.bitrate() - 400.0).abs() < 0.5);
    }
}
