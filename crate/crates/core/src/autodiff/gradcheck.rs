//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per parameter; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max|analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over probed coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
    pub non_finite: bool,
    pub discontinuous: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Compares the analytic gradient of the scalar returned by `build` against
/// central differences for each parameter in `params`.
///
/// `build` must be a pure function of the store (any sampling inside it has
/// to use a fixed seed), so that perturbed evaluations see the same graph.
pub fn grad_check<B>(
    store: &ParamStore<f64>,
    params: &[String],
    build: B,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    B: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let (g, loss) = build(store)?;
    let grads = g.backward(loss)?;
    let f0 = g.value(loss).item();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut work = store.clone();
    for name in params {
        let base = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("grad_check: unknown parameter '{name}'")))?
            .clone();
        let analytic = grads.param(name).ok_or_else(|| {
            Error::invalid(format!(
                "grad_check: '{name}' is not a trainable node of the graph"
            ))
        })?;
        let n = base.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let eval = |work: &mut ParamStore<f64>, idx: usize, v: f64| -> Result<f64> {
            work.get_mut(name).expect("present").data_mut()[idx] = v;
            let (g, l) = build(work)?;
            Ok(g.value(l).item())
        };
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut non_finite = false;
        let mut discontinuous = false;
        for &i in &coords {
            let x = base.data()[i];
            let fp = eval(&mut work, i, x + opts.eps)?;
            let fm = eval(&mut work, i, x - opts.eps)?;
            work.get_mut(name).expect("present").data_mut()[i] = x;
            if !fp.is_finite() || !fm.is_finite() {
                non_finite = true;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            // A smooth function has a second difference of order eps²; a jump
            // shows up at full size.
            if (fp - 2.0 * f0 + fm).abs() > opts.eps.sqrt() * (1.0 + f0.abs()) {
                discontinuous = true;
            }
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel_error = if max_abs == 0.0 {
            0.0
        } else {
            max_abs / scale.max(1e-10)
        };
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error,
            max_abs_error: max_abs,
            coords: coords.len(),
            non_finite,
            discontinuous,
            flagged: non_finite || discontinuous || max_rel_error > opts.tol,
        });
    }
    Ok(GradCheckReport {
        entries,
        tol: opts.tol,
    })
}
