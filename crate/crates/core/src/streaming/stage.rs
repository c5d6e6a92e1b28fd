//! Frame-at-a-time interpretation of [`Block`] lists.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::autodiff::kernels::{self, ConvGeom, ConvTGeom};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::Block;
use crate::real::Real;

type Row<F> = Vec<F>;

fn fetch<F: Real>(store: &ParamStore<F>, name: &str) -> Result<Arc<Tensor<F>>> {
    store
        .get_arc(name)
        .ok_or_else(|| Error::Stream(format!("missing parameter '{name}'")))
}

struct Affine<F> {
    w: Arc<Tensor<F>>,
    b: Arc<Tensor<F>>,
}

impl<F: Real> Affine<F> {
    fn load(store: &ParamStore<F>, name: &str, w: &str, b: &str) -> Result<Self> {
        Ok(Self {
            w: fetch(store, &format!("{name}.{w}"))?,
            b: fetch(store, &format!("{name}.{b}"))?,
        })
    }

    fn linear(&self, x: &[F]) -> Row<F> {
        let mut out = vec![F::zero(); self.b.numel()];
        kernels::linear_row(x, self.w.data(), Some(self.b.data()), &mut out);
        out
    }

    fn layer_norm(&self, x: &[F]) -> Row<F> {
        let mut out = vec![F::zero(); x.len()];
        kernels::layer_norm_row(x, self.w.data(), self.b.data(), &mut out);
        out
    }
}

struct ConvState<F> {
    geom: ConvGeom,
    p: Affine<F>,
    /// Retained inputs; `buf[0]` has absolute index `base`.
    buf: VecDeque<Row<F>>,
    base: usize,
    consumed: usize,
    emitted: usize,
}

impl<F: Real> ConvState<F> {
    fn emit(&mut self, out: &mut Vec<Row<F>>, flush: bool) {
        let limit = if flush {
            self.geom.out_len(self.consumed)
        } else {
            usize::MAX
        };
        while self.emitted < limit && (flush || self.geom.last_input(self.emitted) < self.consumed) {
            let i = self.emitted;
            let (buf, base, consumed) = (&self.buf, self.base, self.consumed);
            let row = |j: isize| {
                (j >= base as isize && (j as usize) < consumed).then(|| buf[j as usize - base].as_slice())
            };
            let mut o = vec![F::zero(); self.geom.cout];
            kernels::conv_frame(&self.geom, self.p.w.data(), Some(self.p.b.data()), i, row, &mut o);
            out.push(o);
            self.emitted += 1;
        }
        // drop inputs no later output can reach
        let keep_from = self.geom.input_index(self.emitted, 0).max(0) as usize;
        while self.base < keep_from && !self.buf.is_empty() {
            self.buf.pop_front();
            self.base += 1;
        }
    }
}

struct ConvTState<F> {
    geom: ConvTGeom,
    p: Affine<F>,
    buf: VecDeque<Row<F>>,
    base: usize,
    consumed: usize,
}

struct Layer<F> {
    ln1: Affine<F>,
    wq: Affine<F>,
    wk: Affine<F>,
    wv: Affine<F>,
    wo: Affine<F>,
    ln2: Affine<F>,
    ff1: Affine<F>,
    ff2: Affine<F>,
    keys: VecDeque<Row<F>>,
    values: VecDeque<Row<F>>,
}

struct TransformerState<F> {
    layers: Vec<Layer<F>>,
    heads: usize,
    window: usize,
    rope_base: f64,
    pos: usize,
    probs: Vec<F>,
}

impl<F: Real> TransformerState<F> {
    fn step(&mut self, x: Row<F>) -> Row<F> {
        let mut h = x;
        let (heads, window, base, pos) = (self.heads, self.window, self.rope_base, self.pos);
        for l in &mut self.layers {
            let n1 = l.ln1.layer_norm(&h);
            let mut q = l.wq.linear(&n1);
            let mut k = l.wk.linear(&n1);
            let v = l.wv.linear(&n1);
            kernels::rope_rotate(&mut q, pos, heads, base, 1.0);
            kernels::rope_rotate(&mut k, pos, heads, base, 1.0);
            l.keys.push_back(k);
            l.values.push_back(v);
            if l.keys.len() > window {
                l.keys.pop_front();
                l.values.pop_front();
            }
            let ks: Vec<F> = l.keys.iter().flatten().copied().collect();
            let vs: Vec<F> = l.values.iter().flatten().copied().collect();
            let mut a = vec![F::zero(); h.len()];
            kernels::attend_row(&q, &ks, &vs, heads, &mut a, &mut self.probs);
            let o = l.wo.linear(&a);
            h = h.iter().zip(&o).map(|(&x, &y)| x + y).collect();
            let n2 = l.ln2.layer_norm(&h);
            let f: Row<F> = l.ff1.linear(&n2).into_iter().map(kernels::relu).collect();
            let f = l.ff2.linear(&f);
            h = h.iter().zip(&f).map(|(&x, &y)| x + y).collect();
        }
        self.pos += 1;
        h
    }
}

enum Stage<F> {
    Conv(ConvState<F>),
    ConvT(ConvTState<F>),
    Linear(Affine<F>),
    LayerNorm(Affine<F>),
    Map(fn(F) -> F),
    Affine(F, F),
    Residual {
        body: Chain<F>,
        pending: VecDeque<Row<F>>,
    },
    Transformer(TransformerState<F>),
    Repeat(usize),
}

fn elu<F: Real>(x: F) -> F {
    kernels::elu(x)
}

fn relu<F: Real>(x: F) -> F {
    kernels::relu(x)
}

fn tanh<F: Real>(x: F) -> F {
    x.tanh()
}

impl<F: Real> Stage<F> {
    fn new(block: &Block, store: &ParamStore<F>) -> Result<Self> {
        Ok(match block {
            Block::Conv {
                name,
                stride,
                dilation,
            } => {
                let p = Affine::load(store, name, "w", "b")?;
                let s = p.w.shape();
                Stage::Conv(ConvState {
                    geom: ConvGeom {
                        kernel: s[0],
                        stride: *stride,
                        dilation: *dilation,
                        cin: s[1],
                        cout: s[2],
                    },
                    p,
                    buf: VecDeque::new(),
                    base: 0,
                    consumed: 0,
                    emitted: 0,
                })
            }
            Block::ConvT { name, stride } => {
                let p = Affine::load(store, name, "w", "b")?;
                let s = p.w.shape();
                Stage::ConvT(ConvTState {
                    geom: ConvTGeom {
                        kernel: s[0],
                        stride: *stride,
                        cin: s[1],
                        cout: s[2],
                    },
                    p,
                    buf: VecDeque::new(),
                    base: 0,
                    consumed: 0,
                })
            }
            Block::Linear { name } => Stage::Linear(Affine::load(store, name, "w", "b")?),
            Block::LayerNorm { name } => Stage::LayerNorm(Affine::load(store, name, "g", "b")?),
            Block::Elu => Stage::Map(elu::<F>),
            Block::Relu => Stage::Map(relu::<F>),
            Block::Tanh => Stage::Map(tanh::<F>),
            Block::Affine { shift, scale } => Stage::Affine(F::lit(*shift), F::lit(*scale)),
            Block::Residual(body) => Stage::Residual {
                body: Chain::new(body, store)?,
                pending: VecDeque::new(),
            },
            Block::Transformer {
                name,
                layers,
                heads,
                window,
                rope_base,
            } => {
                let layers = (0..*layers)
                    .map(|l| {
                        let p = format!("{name}.{l}");
                        let lin = |n: &str| Affine::load(store, &format!("{p}.{n}"), "w", "b");
                        Ok(Layer {
                            ln1: Affine::load(store, &format!("{p}.ln1"), "g", "b")?,
                            wq: lin("wq")?,
                            wk: lin("wk")?,
                            wv: lin("wv")?,
                            wo: lin("wo")?,
                            ln2: Affine::load(store, &format!("{p}.ln2"), "g", "b")?,
                            ff1: lin("ff1")?,
                            ff2: lin("ff2")?,
                            keys: VecDeque::new(),
                            values: VecDeque::new(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Stage::Transformer(TransformerState {
                    layers,
                    heads: *heads,
                    window: *window,
                    rope_base: *rope_base,
                    pos: 0,
                    probs: Vec::new(),
                })
            }
            Block::Repeat(f) => Stage::Repeat(*f),
        })
    }

    fn push(&mut self, rows: Vec<Row<F>>) -> Vec<Row<F>> {
        match self {
            Stage::Conv(c) => {
                let mut out = Vec::new();
                for r in rows {
                    c.buf.push_back(r);
                    c.consumed += 1;
                    c.emit(&mut out, false);
                }
                out
            }
            Stage::ConvT(c) => {
                let mut out = Vec::new();
                let hist = c.geom.history();
                for r in rows {
                    c.buf.push_back(r);
                    let j = c.consumed;
                    c.consumed += 1;
                    let (buf, base) = (&c.buf, c.base);
                    let row = |i: usize| (i >= base && i <= j).then(|| buf[i - base].as_slice());
                    for o in j * c.geom.stride..(j + 1) * c.geom.stride {
                        let mut v = vec![F::zero(); c.geom.cout];
                        kernels::conv_t_frame(&c.geom, c.p.w.data(), Some(c.p.b.data()), o, row, &mut v);
                        out.push(v);
                    }
                    while c.buf.len() > hist {
                        c.buf.pop_front();
                        c.base += 1;
                    }
                }
                out
            }
            Stage::Linear(p) => rows.iter().map(|r| p.linear(r)).collect(),
            Stage::LayerNorm(p) => rows.iter().map(|r| p.layer_norm(r)).collect(),
            Stage::Map(f) => rows
                .into_iter()
                .map(|r| r.into_iter().map(*f).collect())
                .collect(),
            Stage::Affine(shift, scale) => rows
                .into_iter()
                .map(|r| r.into_iter().map(|v| (v + *shift) * *scale).collect())
                .collect(),
            Stage::Residual { body, pending } => {
                pending.extend(rows.iter().cloned());
                let ys = body.push(rows);
                Self::pair(pending, ys)
            }
            Stage::Transformer(t) => rows.into_iter().map(|r| t.step(r)).collect(),
            Stage::Repeat(f) => rows
                .into_iter()
                .flat_map(|r| std::iter::repeat_n(r, *f))
                .collect(),
        }
    }

    fn pair(pending: &mut VecDeque<Row<F>>, ys: Vec<Row<F>>) -> Vec<Row<F>> {
        ys.into_iter()
            .map(|y| {
                let x = pending.pop_front().expect("residual body preserves frame count");
                x.iter().zip(&y).map(|(&a, &b)| a + b).collect()
            })
            .collect()
    }

    fn finish(&mut self) -> Vec<Row<F>> {
        match self {
            Stage::Conv(c) => {
                let mut out = Vec::new();
                c.emit(&mut out, true);
                out
            }
            Stage::Residual { body, pending } => {
                let ys = body.finish();
                Self::pair(pending, ys)
            }
            _ => Vec::new(),
        }
    }
}

/// A block list evaluated incrementally.
pub struct Chain<F> {
    stages: Vec<Stage<F>>,
}

impl<F: Real> Chain<F> {
    pub fn new(blocks: &[Block], store: &ParamStore<F>) -> Result<Self> {
        Ok(Self {
            stages: blocks
                .iter()
                .map(|b| Stage::new(b, store))
                .collect::<Result<_>>()?,
        })
    }

    pub fn push(&mut self, mut rows: Vec<Row<F>>) -> Vec<Row<F>> {
        for s in &mut self.stages {
            if rows.is_empty() {
                break;
            }
            rows = s.push(rows);
        }
        rows
    }

    /// Flushes partially filled strided convolutions (inputs past the end
    /// count as zero, as offline) through the rest of the chain.
    pub fn finish(&mut self) -> Vec<Row<F>> {
        let mut rows: Vec<Row<F>> = Vec::new();
        for s in &mut self.stages {
            if !rows.is_empty() {
                rows = s.push(rows);
            }
            rows.extend(s.finish());
        }
        rows
    }
}
