//! Multi-stage optimisation: stage gating, freezing, KL warm-ups, Adam,
//! checkpoints.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{Adam, Moments};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use schedule::{loss_weights, LossWeights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic;
use crate::autodiff::{Graph, RoundMode, Var};
use crate::config::RunConfig;
use crate::contrastive::{self, LOG_TAU};
use crate::error::{Error, Result};
use crate::frontend::{crop_paralinguistic_window, Utterance};
use crate::model::{is_stage1, Codec, STAGE1_PREFIXES};
use crate::nn::{self, Ctx};
use crate::paralinguistic::{self, kl_margin_loss};
use crate::quantizer::{self, Mode};
use crate::real::Real;
use crate::semantic;

/// Per-step loss values; terms inactive in the step's stage are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub total: f64,
    pub mel: f64,
    pub acoustic: f64,
    pub contrastive: f64,
    pub kl_para: f64,
    pub kl_sem: f64,
}

impl LossRecord {
    pub const FIELDS: [&'static str; 6] = ["total", "mel", "acoustic", "contrastive", "kl_para", "kl_sem"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.total,
            self.mel,
            self.acoustic,
            self.contrastive,
            self.kl_para,
            self.kl_sem,
        ]
    }

    pub fn from_values(step: u64, stage: u8, v: [f64; 6]) -> Self {
        Self {
            step,
            stage,
            total: v[0],
            mel: v[1],
            acoustic: v[2],
            contrastive: v[3],
            kl_para: v[4],
            kl_sem: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<F: Real> {
    pub run: RunConfig,
    pub codec: Codec<F>,
    pub adam: Adam<F>,
    pub rng: ChaCha8Rng,
    /// Number of completed steps.
    pub step: u64,
    pub history: Vec<LossRecord>,
}

impl<F: Real> TrainState<F> {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self> {
        run.validate()?;
        let codec = Codec::new(run.codec.clone(), seed)?;
        let adam = Adam::new(&codec.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            run,
            codec,
            adam,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    /// FNV checksum of the stage-1 parameters.
    pub fn stage1_checksum(&self) -> u64 {
        self.codec.params.checksum_prefixes(&STAGE1_PREFIXES)
    }
}

/// Options for building loss graphs outside the normal training path.
#[derive(Debug, Clone, Copy)]
pub struct GraphOptions {
    /// Register stage-1 parameters as trainable in the stage-2 graph, so tests
    /// can confirm no gradient reaches them.
    pub stage1_trainable: bool,
    pub round_mode: RoundMode,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            stage1_trainable: false,
            round_mode: RoundMode::StraightThrough,
        }
    }
}

pub struct Stage1Graph<F> {
    pub graph: Graph<F>,
    pub loss: Var,
}

/// Mel reconstruction loss over a batch; frames of all utterances are pooled.
pub fn stage1_graph<F: Real>(codec: &Codec<F>, batch: &[&Utterance]) -> Result<Stage1Graph<F>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let trainable = |n: &str| is_stage1(n);
    let ctx = Ctx::new(&codec.params, &trainable);
    let blocks = &codec.arch.acoustic;
    let norm = [acoustic::normalize_block(&codec.cfg)];
    let mut g = Graph::new();
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for u in batch {
        let mel = g.constant(u.mel.values.cast());
        let h = nn::forward(&mut g, &ctx, &blocks.encoder, mel)?;
        let a = nn::forward(&mut g, &ctx, &blocks.projection, h)?;
        let y = nn::forward(&mut g, &ctx, &blocks.decoder, a)?;
        let target = nn::forward(&mut g, &ctx, &norm, mel)?;
        let n = g.shape(target)[0];
        preds.push(g.slice_rows(y, 0, n)?);
        targets.push(target);
    }
    let p = g.concat_rows(&preds)?;
    let t = g.concat_rows(&targets)?;
    let loss = acoustic::mel_loss(&mut g, p, t)?;
    Ok(Stage1Graph { graph: g, loss })
}

pub struct Stage2Graph<F> {
    pub graph: Graph<F>,
    pub total: Var,
    pub acoustic: Var,
    pub contrastive: Var,
    pub kl_para: Var,
    pub kl_sem: Var,
    pub codes: Vec<Vec<u64>>,
}

/// `α·L_acoustic + β·L_contrastive + γ·L_kl_para + δ·L_kl_sem` over a batch.
/// Randomness (crops, VAE noise) is drawn from `rng` in utterance order.
pub fn stage2_graph<F: Real, R: rand::Rng + ?Sized>(
    codec: &Codec<F>,
    batch: &[&Utterance],
    w: &LossWeights,
    rng: &mut R,
    opts: GraphOptions,
) -> Result<Stage2Graph<F>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &codec.cfg;
    let arch = &codec.arch;
    let s1 = opts.stage1_trainable;
    let trainable = move |n: &str| s1 || !is_stage1(n);
    let ctx = Ctx::new(&codec.params, &trainable);
    let mut g = Graph::new();
    g.set_round_mode(opts.round_mode);
    let mut parts: [Vec<Var>; 8] = Default::default();
    let mut codes = Vec::with_capacity(batch.len());
    for u in batch {
        let mel = g.constant(u.mel.values.cast());
        let h = nn::forward(&mut g, &ctx, &arch.acoustic.encoder, mel)?;
        let a = nn::forward(&mut g, &ctx, &arch.acoustic.projection, h)?;
        // stage-1 outputs are fixed inputs/targets here
        let h = g.detach(h);
        let a = g.detach(a);

        let window = crop_paralinguistic_window(&u.mel, cfg.para_frames, rng);
        let window = g.constant(window.values.cast());
        let (mu, raw) = semantic::semantic_project(&mut g, &ctx, &arch.semantic, h)?;
        let lat = quantizer::vae_sample(&mut g, mu, raw, Mode::Train, rng)?;
        let (q, c) = quantizer::fsq_quantize(&mut g, &ctx, &arch.quantizer, cfg, lat.z)?;
        codes.push(c);
        let para = paralinguistic::paralinguistic_encode(
            &mut g,
            &ctx,
            &arch.para,
            window,
            Mode::Train,
            rng,
        )?;
        let a_hat = semantic::semantic_connect(&mut g, &ctx, &arch.connector, q.s, para.z)?;
        let n = g.shape(a)[0];
        let a_hat = g.slice_rows(a_hat, 0, n)?;
        let p = contrastive::phoneme_encode(&mut g, &ctx, &arch.phoneme, &u.frame_ids())?;
        for (slot, v) in parts
            .iter_mut()
            .zip([a_hat, a, q.s, p, lat.mu, lat.sigma, para.mu, para.sigma])
        {
            slot.push(v);
        }
    }
    let [a_hat, a, s, p, mu, sigma, pmu, psigma] = parts.map(|vs| g.concat_rows(&vs));
    let acoustic_l = semantic::acoustic_loss(&mut g, a_hat?, a?)?;
    let log_tau = ctx.param(&mut g, LOG_TAU)?;
    let c = contrastive::similarity_matrix(&mut g, s?, p?, log_tau, cfg.normalize_embeddings)?;
    let contrastive_l = contrastive::contrastive_loss(&mut g, c)?;
    let kl_para = kl_margin_loss(&mut g, pmu?, psigma?, cfg.kl_margin)?;
    let kl_sem = kl_margin_loss(&mut g, mu?, sigma?, cfg.kl_margin)?;
    let mut total = g.scale(acoustic_l, F::lit(w.alpha));
    for (term, weight) in [(contrastive_l, w.beta), (kl_para, w.gamma), (kl_sem, w.delta)] {
        let t = g.scale(term, F::lit(weight));
        total = g.add(total, t)?;
    }
    Ok(Stage2Graph {
        graph: g,
        total,
        acoustic: acoustic_l,
        contrastive: contrastive_l,
        kl_para,
        kl_sem,
        codes,
    })
}

/// Batch for a (1-based) step: `batch_size` consecutive utterances, wrapping.
pub fn batch_indices(step: u64, batch_size: usize, corpus_len: usize) -> Vec<usize> {
    let start = (step - 1) as usize * batch_size;
    (0..batch_size).map(|j| (start + j) % corpus_len).collect()
}

/// Runs one optimisation step and appends its losses to the history.
pub fn train_step<F: Real>(state: &mut TrainState<F>, corpus: &[Utterance]) -> Result<LossRecord> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let step = state.step + 1;
    let sched = state.run.schedule.clone();
    let w = loss_weights(step, &sched);
    let batch: Vec<&Utterance> = batch_indices(step, sched.batch_size, corpus.len())
        .into_iter()
        .map(|i| &corpus[i])
        .collect();
    let (record, grads) = if w.stage == 1 {
        let sg = stage1_graph(&state.codec, &batch)?;
        let (loss, grads) = sg.graph.forward_backward(sg.loss)?;
        let mel = loss.as_f64();
        (
            LossRecord::from_values(step, 1, [mel, mel, 0.0, 0.0, 0.0, 0.0]),
            grads,
        )
    } else {
        let sg = stage2_graph(
            &state.codec,
            &batch,
            &w,
            &mut state.rng,
            GraphOptions::default(),
        )?;
        let v = |x: Var| sg.graph.value(x).item().as_f64();
        let rec = LossRecord::from_values(
            step,
            2,
            [
                v(sg.total),
                0.0,
                v(sg.acoustic),
                v(sg.contrastive),
                v(sg.kl_para),
                v(sg.kl_sem),
            ],
        );
        if !rec.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{rec:?}"),
            });
        }
        (rec, sg.graph.backward(sg.total)?)
    };
    if !record.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{record:?}"),
        });
    }
    for (name, grad) in grads.into_params() {
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of '{name}' is not finite; losses {record:?}"),
            });
        }
        state
            .adam
            .apply(&mut state.codec.params, &name, &grad, &sched);
    }
    state.step = step;
    state.history.push(record);
    Ok(record)
}

/// Trailing-window means of one history field (`window` records each).
pub fn smoothed(history: &[LossRecord], field: usize, window: usize) -> Vec<f64> {
    history
        .windows(window.max(1))
        .map(|w| w.iter().map(|r| r.values()[field]).sum::<f64>() / w.len() as f64)
        .collect()
}
