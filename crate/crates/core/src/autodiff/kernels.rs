//! Frame-level compute kernels shared by the graph forward pass and the
//! streaming runtime.
//!
//! Each kernel produces one output row with a fixed accumulation order, so
//! that offline (whole sequence) and streamed (row at a time) evaluation agree
//! bit for bit.

use crate::real::Real;

/// `out = x · W + b` for one row; `w` is `[input, output]` row-major.
#[inline]
pub fn linear_row<F: Real>(x: &[F], w: &[F], b: Option<&[F]>, out: &mut [F]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    out.fill(F::zero());
    for (i, &xv) in x.iter().enumerate() {
        let wr = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xv * wv;
        }
    }
    if let Some(b) = b {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// Geometry of a causal (left padded) 1-D convolution over frame-major input.
///
/// Output frame `i` reads input frames
/// `i·stride + stride − 1 − dilation·(kernel − 1 − tap)` for `tap in 0..kernel`,
/// so it never depends on frames after `i·stride + stride − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn out_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }

    /// Last input frame consumed by output `i`.
    pub fn last_input(&self, i: usize) -> usize {
        i * self.stride + self.stride - 1
    }

    #[inline]
    pub fn input_index(&self, i: usize, tap: usize) -> isize {
        self.last_input(i) as isize - (self.dilation * (self.kernel - 1 - tap)) as isize
    }

    /// Frames of history the earliest tap reaches behind the newest one.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1)
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.cin * self.cout
    }
}

/// One output frame of a causal convolution. `w` is `[kernel, cin, cout]`.
/// Frames for which `row` returns `None` contribute nothing (zero padding).
#[inline]
pub fn conv_frame<'a, F: Real>(
    geom: &ConvGeom,
    w: &[F],
    b: Option<&[F]>,
    i: usize,
    row: impl Fn(isize) -> Option<&'a [F]>,
    out: &mut [F],
) {
    out.fill(F::zero());
    let (cin, cout) = (geom.cin, geom.cout);
    for tap in 0..geom.kernel {
        let Some(x) = row(geom.input_index(i, tap)) else {
            continue;
        };
        let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
        for (c, &xv) in x.iter().enumerate() {
            let wr = &wt[c * cout..(c + 1) * cout];
            for (o, &wv) in out.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    if let Some(b) = b {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// Geometry of a causal transposed convolution: each input frame is spread
/// over `kernel` output frames starting at `i·stride`, and the output is
/// trimmed to `t_in·stride` frames (no lookahead).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTGeom {
    pub fn out_len(&self, t_in: usize) -> usize {
        t_in * self.stride
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.cin * self.cout
    }

    /// Input frames needed (behind the newest) to emit a full stride of output.
    pub fn history(&self) -> usize {
        self.kernel.div_ceil(self.stride)
    }
}

/// Output frame `o` of a causal transposed convolution in gather form.
#[inline]
pub fn conv_t_frame<'a, F: Real>(
    geom: &ConvTGeom,
    w: &[F],
    b: Option<&[F]>,
    o: usize,
    row: impl Fn(usize) -> Option<&'a [F]>,
    out: &mut [F],
) {
    out.fill(F::zero());
    let (cin, cout) = (geom.cin, geom.cout);
    for tap in 0..geom.kernel.min(o + 1) {
        if !(o - tap).is_multiple_of(geom.stride) {
            continue;
        }
        let Some(x) = row((o - tap) / geom.stride) else {
            continue;
        };
        let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
        for (c, &xv) in x.iter().enumerate() {
            let wr = &wt[c * cout..(c + 1) * cout];
            for (ov, &wv) in out.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    }
    if let Some(b) = b {
        for (ov, &bv) in out.iter_mut().zip(b) {
            *ov += bv;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row statistics `(mean, 1/sqrt(var + eps))`.
#[inline]
pub fn row_stats<F: Real>(x: &[F]) -> (F, F) {
    let n = F::lit(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, F::one() / (var + F::lit(LAYER_NORM_EPS)).sqrt())
}

#[inline]
pub fn layer_norm_row<F: Real>(x: &[F], gamma: &[F], beta: &[F], out: &mut [F]) {
    let (mean, inv) = row_stats(x);
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gamma.iter().zip(beta)) {
        *o = (v - mean) * inv * g + b;
    }
}

/// Applies the rotary position embedding at `pos` to every head of `row`
/// in place (adjacent pairs rotated). `sign = -1` applies the inverse rotation.
#[inline]
pub fn rope_rotate<F: Real>(row: &mut [F], pos: usize, heads: usize, base: f64, sign: f64) {
    let hd = row.len() / heads;
    for j in 0..hd / 2 {
        let theta = (pos as f64) * base.powf(-(2.0 * j as f64) / hd as f64);
        let (s, c) = (sign * theta).sin_cos();
        let (s, c) = (F::lit(s), F::lit(c));
        for h in 0..heads {
            let a = h * hd + 2 * j;
            let (x0, x1) = (row[a], row[a + 1]);
            row[a] = x0 * c - x1 * s;
            row[a + 1] = x0 * s + x1 * c;
        }
    }
}

/// Attention output for a single query over `n` contiguous key/value rows
/// (oldest first). `probs` receives the per-head attention weights
/// `[heads, n]`.
pub fn attend_row<F: Real>(
    q: &[F],
    keys: &[F],
    values: &[F],
    heads: usize,
    out: &mut [F],
    probs: &mut Vec<F>,
) {
    let dim = q.len();
    let hd = dim / heads;
    let n = keys.len() / dim;
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    probs.clear();
    probs.resize(heads * n, F::zero());
    out.fill(F::zero());
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n..(h + 1) * n];
        let mut max = F::neg_infinity();
        for (j, pj) in p.iter_mut().enumerate() {
            let kh = &keys[j * dim + h * hd..j * dim + (h + 1) * hd];
            let mut dot = F::zero();
            for (&a, &b) in qh.iter().zip(kh) {
                dot += a * b;
            }
            *pj = dot * scale;
            max = max.max(*pj);
        }
        let mut z = F::zero();
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            z += *pj;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= z;
            let vh = &values[j * dim + h * hd..j * dim + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += *pj * v;
            }
        }
    }
}

#[inline]
pub fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp() - F::one()
    }
}

#[inline]
pub fn relu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_is_causal() {
        let g = ConvGeom {
            kernel: 4,
            stride: 2,
            dilation: 1,
            cin: 1,
            cout: 1,
        };
        assert_eq!(g.input_index(0, 3), 1);
        assert_eq!(g.input_index(0, 0), -2);
        assert_eq!(g.out_len(5), 3);
        let d = ConvGeom {
            kernel: 3,
            stride: 1,
            dilation: 2,
            cin: 1,
            cout: 1,
        };
        assert_eq!(d.input_index(10, 2), 10);
        assert_eq!(d.input_index(10, 0), 6);
    }

    #[test]
    fn rope_inverse_restores_row() {
        let mut row = vec![0.3f64, -1.2, 0.7, 2.0, 0.1, 0.5, -0.4, 0.9];
        let orig = row.clone();
        rope_rotate(&mut row, 17, 2, 10000.0, 1.0);
        rope_rotate(&mut row, 17, 2, 10000.0, -1.0);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_scores_depend_on_relative_position() {
        let q = vec![0.3f64, -1.2, 0.7, 2.0];
        let k = vec![1.1f64, 0.4, -0.6, 0.2];
        let dot = |pq: usize, pk: usize| {
            let (mut a, mut b) = (q.clone(), k.clone());
            rope_rotate(&mut a, pq, 1, 10000.0, 1.0);
            rope_rotate(&mut b, pk, 1, 10000.0, 1.0);
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(5, 2) - dot(105, 102)).abs() < 1e-9);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let q = vec![0.5f64, -0.25, 1.0, 0.0];
        let keys = vec![
            0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 1.0, -1.1, 1.2,
        ];
        let values = keys.iter().map(|v| v * 2.0).collect::<Vec<_>>();
        let mut out = vec![0.0; 4];
        let mut probs = Vec::new();
        attend_row(&q, &keys, &values, 2, &mut out, &mut probs);
        for h in 0..2 {
            let s: f64 = probs[h * 3..(h + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
