//! The training loop and corpus-level evaluation.
//!
//! A [`Trainer`] owns the model, its Adam state, and the shuffling/dropout
//! RNG, and advances one epoch at a time through a staged noise curriculum.
//! Two invariants make interrupted runs indistinguishable from
//! uninterrupted ones:
//!
//! * every tensor (parameters and Adam moments) is rounded to f32
//!   precision at each epoch boundary — exactly the precision checkpoints
//!   store — so resuming from disk continues from the same numbers the
//!   uninterrupted run had in memory;
//! * noisy stage data is a pure function of the clean split, the seed, and
//!   the stage index, so it is rebuilt identically instead of persisted.
//!
//! [`evaluate`] scores a model over a test split in any of three decoding
//! regimes (whole-utterance, streamed with final-only decoding, streamed
//! with eager re-decoding) and reports pooled character error rate,
//! word-count accuracy of the gate, duration histograms, and — for the
//! streamed regimes — emission latency.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, round_state_to_f32, save_checkpoint, TrainerState};
use crate::config::TrainConfig;
use crate::diff::{Adam, AdamParams, DiffArray, Tape};
use crate::metrics::{
    segment_histogram, word_length_histogram, CerAccumulator, EvalReport, WordCountAccumulator,
};
use crate::model::{total_loss, Modality, ModelConfig, TarisModel};
use crate::streaming::{DecodeMode, LatencyReport, StreamState};
use crate::synth::{derive_seed, mix_noise, quantize, SyntheticSample};
use crate::{Error, Result};

/// Decorrelates the shuffle/dropout stream from model initialization.
const SALT_OPT_RNG: u64 = 0x4f50_5449_4d52_4e47;
/// Decorrelates per-stage curriculum noise from corpus generation.
const SALT_STAGE: u64 = 0x5354_4147_4e4f_4953;

/// Mean losses over one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochStats {
    /// Curriculum stage the epoch belonged to.
    pub stage: usize,
    /// Epoch index within the stage (0-based).
    pub epoch: usize,
    /// Learning rate the epoch ran with.
    pub lr: f64,
    /// Mean composite loss CE + λ·Word per sentence.
    pub loss: f64,
    pub cross_entropy: f64,
    pub word_loss: f64,
}

/// A training run in progress: model, optimizer, RNG, and curriculum
/// position.
pub struct Trainer {
    pub model: TarisModel,
    pub optimizer: Adam,
    pub tc: TrainConfig,
    /// Curriculum stage index; `snr_stages.len()` once training is done.
    pub stage: usize,
    /// Completed epochs within the current stage.
    pub epoch: usize,
    rng: ChaCha8Rng,
    rng_seed: u64,
}

impl Trainer {
    /// A fresh run: model initialized from `tc.seed`, zeroed Adam moments.
    pub fn new(mc: ModelConfig, tc: TrainConfig) -> Result<Self> {
        mc.validate()?;
        tc.validate()?;
        let model = TarisModel::init(mc, tc.seed)?;
        let optimizer = Adam::new(&model.param_sizes(), AdamParams::with_lr(tc.lr));
        let rng_seed = derive_seed(tc.seed, SALT_OPT_RNG, 0);
        Ok(Trainer {
            model,
            optimizer,
            tc,
            stage: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
        })
    }

    /// Resumes from a checkpoint. The model comes entirely from the file;
    /// `tc` supplies the schedule going forward and must match the original
    /// run for the resumed trajectory to equal the uninterrupted one.
    pub fn resume(path: &Path, tc: TrainConfig) -> Result<Self> {
        tc.validate()?;
        let cp = load_checkpoint(path)?;
        let model = cp.restore_model()?;
        let optimizer = match cp.restore_optimizer(&model, tc.lr)? {
            Some(opt) => opt,
            None => Adam::new(&model.param_sizes(), AdamParams::with_lr(tc.lr)),
        };
        Ok(Trainer {
            model,
            optimizer,
            tc,
            stage: cp.state.stage,
            epoch: cp.state.epoch,
            rng: cp.state.rng(),
            rng_seed: cp.state.rng_seed,
        })
    }

    /// Writes the full run state (parameters, Adam moments, RNG position)
    /// to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = TrainerState {
            epoch: self.epoch,
            stage: self.stage,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos(),
        };
        save_checkpoint(path, &self.model, Some(&self.optimizer), &state)
    }

    /// True once every stage has run its full epoch count.
    pub fn finished(&self) -> bool {
        self.stage >= self.tc.snr_stages.len()
    }

    /// The noise level of the current stage (`None` = clean).
    pub fn stage_snr(&self) -> Option<f64> {
        self.tc.snr_stages.get(self.stage).copied().flatten()
    }

    /// One shuffled pass over `data` with batched gradient means, then the
    /// f32 rounding barrier. Advances the (epoch, stage) position.
    pub fn run_epoch(&mut self, data: &[SyntheticSample]) -> Result<EpochStats> {
        if self.finished() {
            return Err(Error::Config("run_epoch: all curriculum stages already trained".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("run_epoch: empty training split".into()));
        }
        let (stage, epoch) = (self.stage, self.epoch);
        let lr = self.tc.lr_at(epoch);
        self.optimizer.hp.lr = lr;

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let lambda = self.model.cfg.lambda;
        let av = self.model.cfg.modality == Modality::Av;
        let (mut sum_total, mut sum_ce, mut sum_word) = (0.0, 0.0, 0.0);
        for batch in order.chunks(self.tc.batch_size) {
            let mut acc: Option<Vec<DiffArray>> = None;
            for &i in batch {
                let s = &data[i];
                let mut tape = Tape::new();
                let video = av.then_some(&s.video);
                let (bound, trace) =
                    self.model.forward(&mut tape, &s.audio, video, &s.transcript, Some(&mut self.rng))?;
                let losses = total_loss(&mut tape, &trace, &s.transcript, lambda)?;
                sum_total += tape.value(losses.total).item()?;
                sum_ce += tape.value(losses.cross_entropy).item()?;
                sum_word += tape.value(losses.word).item()?;
                let g = tape.backward(losses.total)?;
                let grads = bound.gradients(&tape, &g);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (ai, gi) in a.iter_mut().zip(grads.iter()) {
                            for (x, y) in ai.values_mut().iter_mut().zip(gi.values()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut mean = acc.expect("chunks never yields an empty batch");
            let inv = 1.0 / batch.len() as f64;
            for t in &mut mean {
                for x in t.values_mut() {
                    *x *= inv;
                }
            }
            self.model.adam_update(&mut self.optimizer, &mean)?;
        }

        self.epoch += 1;
        if self.epoch == self.tc.epochs {
            self.stage += 1;
            self.epoch = 0;
        }
        round_state_to_f32(&mut self.model, Some(&mut self.optimizer));

        let n = data.len() as f64;
        Ok(EpochStats {
            stage,
            epoch,
            lr,
            loss: sum_total / n,
            cross_entropy: sum_ce / n,
            word_loss: sum_word / n,
        })
    }
}

/// The training split for one curriculum stage: clean audio mixed with
/// stage-specific noise and re-quantized like generated data. Pure in
/// (clean split, seed, stage), so a resumed run rebuilds it identically.
pub fn noisy_stage(
    clean: &[SyntheticSample],
    snr_db: f64,
    seed: u64,
    stage: usize,
) -> Result<Vec<SyntheticSample>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut noisy = mix_noise(s, snr_db, derive_seed(seed, SALT_STAGE ^ stage as u64, i as u64))?;
            quantize(&mut noisy);
            Ok(noisy)
        })
        .collect()
}

/// Drives a trainer through every remaining stage and epoch.
///
/// Writes `latest.ck` after each epoch and `stageN.ck` at each stage
/// boundary when a checkpoint directory is given. `on_epoch` sees each
/// completed epoch and may return `false` to stop early.
pub fn train_full(
    trainer: &mut Trainer,
    clean_train: &[SyntheticSample],
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&Trainer, &EpochStats) -> bool,
) -> Result<()> {
    let mut staged: Option<(usize, Vec<SyntheticSample>)> = None;
    while !trainer.finished() {
        let stage = trainer.stage;
        let data: &[SyntheticSample] = match trainer.stage_snr() {
            None => clean_train,
            Some(db) => {
                if staged.as_ref().map(|(s, _)| *s) != Some(stage) {
                    staged = Some((stage, noisy_stage(clean_train, db, trainer.tc.seed, stage)?));
                }
                &staged.as_ref().expect("just staged").1
            }
        };
        let stats = trainer.run_epoch(data)?;
        if let Some(dir) = checkpoint_dir {
            trainer.save(&dir.join("latest.ck"))?;
            if trainer.epoch == 0 {
                trainer.save(&dir.join(format!("stage{stage}.ck")))?;
            }
        }
        if !on_epoch(trainer, &stats) {
            return Ok(());
        }
    }
    Ok(())
}

/// How transcripts are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Whole-utterance greedy decoding from a single full encode.
    Offline,
    /// Frame-by-frame streaming, decoding only at end of stream.
    StreamFinal,
    /// Frame-by-frame streaming with eager provisional words.
    StreamEager,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(EvalMode::Offline),
            "stream-final" | "stream_final" => Ok(EvalMode::StreamFinal),
            "stream-eager" | "stream_eager" => Ok(EvalMode::StreamEager),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?} (offline|stream-final|stream-eager)"
            ))),
        }
    }
}

/// Scores `model` over a split: pooled CER, gate word-count error,
/// segment/word duration histograms, and (for streamed modes) latency.
pub fn evaluate(
    model: &TarisModel,
    data: &[SyntheticSample],
    mode: EvalMode,
    frame_ms: f64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluate: empty split".into()));
    }
    if !(frame_ms > 0.0 && frame_ms.is_finite()) {
        return Err(Error::Config(format!("frame duration must be positive, got {frame_ms}")));
    }
    let av = model.cfg.modality == Modality::Av;
    let (d_a, d_v) = (model.cfg.d_a, model.cfg.d_v);

    let mut cer = CerAccumulator::default();
    let mut wc = WordCountAccumulator::default();
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(data.len());
    let mut spans = Vec::with_capacity(data.len());
    let mut latency = LatencyReport { frame_ms: Some(frame_ms), words: Vec::new() };
    let mut revisions = 0usize;

    for s in data {
        let reference = s.text();
        let video = av.then_some(&s.video);
        match mode {
            EvalMode::Offline => {
                let mut tape = Tape::new();
                let (_, _, gate) = model.memory(&mut tape, &s.audio, video)?;
                alphas.push(gate.alpha.clone());
                let out = model.greedy_decode_offline(&s.audio, video)?;
                cer.add(&out.text, &reference)?;
                wc.add(out.sigma_alpha, s.space_count());
            }
            EvalMode::StreamFinal | EvalMode::StreamEager => {
                let dm = if mode == EvalMode::StreamEager { DecodeMode::Eager } else { DecodeMode::Final };
                let mut st = StreamState::new(&model.cfg)?;
                st.set_frame_ms(Some(frame_ms));
                let n = s.audio.shape()[0];
                let m = s.video.shape()[0];
                for i in 0..n {
                    let arow = &s.audio.values()[i * d_a..(i + 1) * d_a];
                    let vrow = (av && i % 2 == 0 && i / 2 < m)
                        .then(|| &s.video.values()[(i / 2) * d_v..(i / 2 + 1) * d_v]);
                    st.ingest(model, arow, vrow)?;
                    st.try_decode(model, dm)?;
                }
                let fin = st.finalize(model, dm)?;
                alphas.push(st.alphas().to_vec());
                cer.add(&fin.transcript, &reference)?;
                wc.add(fin.sigma_alpha, s.space_count());
                revisions += fin.report.words.iter().map(|w| w.revisions).sum::<usize>();
                latency.words.extend(fin.report.words);
            }
        }
        spans.push(s.spans.clone());
    }

    let streamed = mode != EvalMode::Offline;
    Ok(EvalReport {
        sentences: data.len(),
        cer: cer.value(),
        word_count_mae: wc.mae(),
        word_count_mse: wc.mse(),
        segment_histogram: segment_histogram(&alphas, frame_ms)?,
        word_histogram: word_length_histogram(&spans, frame_ms)?,
        mean_latency_ms: streamed.then(|| latency.mean_delay_ms().unwrap_or(0.0)),
        p90_latency_ms: streamed.then(|| latency.percentile_delay_frames(90.0) * frame_ms),
        mean_revisions: streamed.then(|| {
            if latency.words.is_empty() {
                0.0
            } else {
                revisions as f64 / latency.words.len() as f64
            }
        }),
    })
}
