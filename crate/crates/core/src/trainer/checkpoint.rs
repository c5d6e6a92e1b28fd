//! `SCC1` checkpoint files.
//!
//! Layout (little-endian): magic `SCC1`, version u8, config text (u32
//! length, then UTF-8), completed step u64, parameter records, optimiser
//! records, rng state, loss history. A tensor record is name (u16 length + UTF-8), dtype
//! tag u8, rank u8, extents u32 each, row-major payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Adam, LossRecord, Moments, TrainState};
use crate::autodiff::{ParamStore, Tensor};
use crate::bytes::Reader;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 4] = b"SCC1";
pub const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor<F: Real>(out: &mut Vec<u8>, t: &Tensor<F>) {
    out.push(F::DTYPE.tag());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn get_name(r: &mut Reader) -> Result<String> {
    let n = r.u16("name length")? as usize;
    r.string(n, "name")
}

fn get_tensor<F: Real>(r: &mut Reader, name: &str) -> Result<Tensor<F>> {
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| r.error(format!("'{name}': unknown dtype tag {tag}")))?;
    let rank = r.u8("rank")? as usize;
    if rank > MAX_RANK {
        return Err(r.error(format!("'{name}': rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let e = r.u32("extent")?;
        numel = numel.saturating_mul(e as u64);
        shape.push(e as usize);
    }
    let bytes = numel.saturating_mul(dtype.size() as u64);
    if bytes > r.remaining() as u64 {
        return Err(r.error(format!("'{name}': payload of {bytes} bytes exceeds file")));
    }
    let payload = r.take(bytes as usize, "payload")?;
    let data: Vec<F> = match dtype {
        d if d == F::DTYPE => payload.chunks_exact(d.size()).map(F::read_le).collect(),
        DType::F32 => payload.chunks_exact(4).map(|c| F::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| F::lit(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

/// Serialises a training state.
pub fn write_checkpoint<F: Real>(state: &TrainState<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let text = state.run.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());

    out.extend_from_slice(&(state.codec.params.len() as u32).to_le_bytes());
    for (name, t) in state.codec.params.iter() {
        put_name(&mut out, name);
        put_tensor(&mut out, t);
    }
    out.extend_from_slice(&(state.adam.moments.len() as u32).to_le_bytes());
    for (name, m) in &state.adam.moments {
        put_name(&mut out, name);
        out.extend_from_slice(&m.t.to_le_bytes());
        put_tensor(&mut out, &m.m);
        put_tensor(&mut out, &m.v);
    }
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    out.extend_from_slice(&(state.history.len() as u64).to_le_bytes());
    for rec in &state.history {
        out.extend_from_slice(&rec.step.to_le_bytes());
        out.push(rec.stage);
        for v in rec.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses and validates a checkpoint image; nothing is returned unless the
/// whole file is consistent.
pub fn read_checkpoint<F: Real>(bytes: &[u8]) -> Result<TrainState<F>> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error("bad magic (expected SCC1)"));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version} (expected {VERSION})")));
    }
    let text_len = r.u32("config length")? as usize;
    let text = r.string(text_len, "config text")?;
    let run = RunConfig::from_text(&text)?;
    let step = r.u64("step")?;

    let n = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = get_name(&mut r)?;
        let t = get_tensor(&mut r, &name)?;
        if params.contains(&name) {
            return Err(r.error(format!("duplicate parameter '{name}'")));
        }
        params.insert(name, t);
    }
    let codec = Codec::from_params(run.codec.clone(), params)?;

    let n = r.u32("optimiser count")? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let name = get_name(&mut r)?;
        let t = r.u64("optimiser step")?;
        let m = get_tensor(&mut r, &name)?;
        let v = get_tensor(&mut r, &name)?;
        let p = codec
            .params
            .get(&name)
            .ok_or_else(|| r.error(format!("optimiser state for unknown parameter '{name}'")))?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(r.error(format!("optimiser state for '{name}' has the wrong shape")));
        }
        moments.insert(name, Moments { t, m, v });
    }
    if moments.len() != codec.params.len() {
        return Err(r.error("optimiser state does not cover every parameter"));
    }

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("sized");
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let n = r.u64("history length")?;
    if n.saturating_mul(57) > r.remaining() as u64 {
        return Err(r.error(format!("history of {n} records exceeds file")));
    }
    let mut history = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let s = r.u64("history step")?;
        let stage = r.u8("history stage")?;
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = r.f64("history value")?;
        }
        history.push(LossRecord::from_values(s, stage, v));
    }
    r.finish()?;
    Ok(TrainState {
        run,
        codec,
        adam: Adam { moments },
        rng,
        step,
        history,
    })
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint<F: Real>(state: &TrainState<F>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path).map_err(Error::from)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TrainState<F>> {
    read_checkpoint(&fs::read(path)?)
}
