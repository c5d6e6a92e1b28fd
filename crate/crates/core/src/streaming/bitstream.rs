//! The `.sct` token file.

use crate::bytes::Reader;
use crate::config::CodecConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCTK";
const VERSION: u8 = 1;
const FLAG_G: u8 = 1;

/// A semantic token sequence with its header and optional `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    /// Semantic frame rate as `numerator / denominator` Hz.
    pub frame_rate: (u32, u32),
    pub fsq_d: u8,
    pub fsq_levels: u8,
    pub para_dim: u16,
    pub g: Option<Vec<f32>>,
    pub codes: Vec<u64>,
}

impl TokenStream {
    pub fn for_config(cfg: &CodecConfig, g: Option<Vec<f32>>, codes: Vec<u64>) -> Result<Self> {
        let narrow = |v: usize, what: &str, max: usize| {
            if v > max {
                Err(Error::Config(format!("{what} = {v} does not fit the token header")))
            } else {
                Ok(v)
            }
        };
        let (num, den) = cfg.token_rate();
        let s = Self {
            frame_rate: (
                narrow(num as usize, "sample_rate", u32::MAX as usize)? as u32,
                narrow(den as usize, "hop·r_sem", u32::MAX as usize)? as u32,
            ),
            fsq_d: narrow(cfg.fsq_d, "fsq_d", u8::MAX as usize)? as u8,
            fsq_levels: narrow(cfg.fsq_levels, "fsq_levels", u8::MAX as usize)? as u8,
            para_dim: narrow(cfg.para_dim, "para_dim", u16::MAX as usize)? as u16,
            g,
            codes,
        };
        s.validate()?;
        Ok(s)
    }

    /// `L^d`, if it fits a 32-bit code word.
    pub fn codebook_size(&self) -> Option<u64> {
        let size = (self.fsq_levels as u64).checked_pow(self.fsq_d as u32)?;
        (size <= 1 << 32).then_some(size)
    }

    pub fn bits_per_token(&self) -> f64 {
        self.fsq_d as f64 * (self.fsq_levels as f64).log2()
    }

    pub fn bitrate(&self) -> f64 {
        self.frame_rate.0 as f64 / self.frame_rate.1 as f64 * self.bits_per_token()
    }

    fn code_width(&self) -> usize {
        match self.codebook_size() {
            Some(s) if s <= 1 << 16 => 2,
            _ => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::format("token stream", r));
        if self.frame_rate.0 == 0 || self.frame_rate.1 == 0 {
            return bad("frame rate has a zero term".into());
        }
        if self.fsq_d == 0 || self.fsq_levels < 2 {
            return bad(format!("invalid quantiser d={} L={}", self.fsq_d, self.fsq_levels));
        }
        let Some(size) = self.codebook_size() else {
            return bad(format!(
                "codebook {}^{} exceeds 32-bit code words",
                self.fsq_levels, self.fsq_d
            ));
        };
        if let Some(g) = &self.g {
            if g.len() != self.para_dim as usize {
                return bad(format!("G has {} values, header says {}", g.len(), self.para_dim));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return bad("G contains a non-finite value".into());
            }
        }
        for (position, &code) in self.codes.iter().enumerate() {
            if code >= size {
                return Err(Error::CodeOutOfRange {
                    position,
                    code,
                    size,
                });
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let width = self.code_width();
        let mut out = Vec::with_capacity(32 + 4 * self.para_dim as usize + width * self.codes.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(if self.g.is_some() { FLAG_G } else { 0 });
        out.extend_from_slice(&self.frame_rate.0.to_le_bytes());
        out.extend_from_slice(&self.frame_rate.1.to_le_bytes());
        out.push(self.fsq_d);
        out.push(self.fsq_levels);
        out.extend_from_slice(&self.para_dim.to_le_bytes());
        if let Some(g) = &self.g {
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        for &c in &self.codes {
            if width == 2 {
                out.extend_from_slice(&(c as u16).to_le_bytes());
            } else {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "token stream");
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error("bad magic (not a .sct file)"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_G != 0 {
            return Err(r.error(format!("unknown flag bits {flags:#04x}")));
        }
        let mut s = Self {
            frame_rate: (r.u32("frame rate numerator")?, r.u32("frame rate denominator")?),
            fsq_d: r.u8("fsq_d")?,
            fsq_levels: r.u8("fsq_L")?,
            para_dim: r.u16("D_g")?,
            g: None,
            codes: Vec::new(),
        };
        if flags & FLAG_G != 0 {
            let g = (0..s.para_dim)
                .map(|_| r.f32("G"))
                .collect::<Result<Vec<_>>>()?;
            s.g = Some(g);
        }
        let count = r.u64("code count")?;
        let width = s.code_width();
        if count.checked_mul(width as u64) != Some(r.remaining() as u64) {
            return Err(r.error(format!(
                "code count {count} does not match {} payload bytes",
                r.remaining()
            )));
        }
        s.codes = (0..count)
            .map(|_| {
                Ok(if width == 2 {
                    r.u16("code")? as u64
                } else {
                    r.u32("code")? as u64
                })
            })
            .collect::<Result<_>>()?;
        r.finish()?;
        s.validate()?;
        Ok(s)
    }
}
