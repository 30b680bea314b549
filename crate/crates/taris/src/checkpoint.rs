//! Checkpoint persistence: named f32 tensors plus everything needed to
//! resume training exactly — the model config, curriculum position, Adam
//! moments, and the training RNG's stream position.
//!
//! Payloads are stored as f32 (half the size; ~7 significant digits is
//! plenty at this scale) while the in-memory model computes in f64.
//! Round-trip exactness is therefore defined at the f32 representation:
//! the training loop rounds its state to f32 at every epoch boundary, so a
//! resumed run and an uninterrupted run see bit-identical numbers.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Adam, AdamParams};
use crate::model::{ModelConfig, TarisModel};
use crate::{Error, Result};

/// Magic string opening every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TARISCK1";

/// Where a training run is, beyond the tensor values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs within the current stage.
    pub epoch: usize,
    /// Curriculum stage index (0 = clean).
    pub stage: usize,
    /// Base seed of the training RNG.
    pub rng_seed: u64,
    /// Stream position of the training RNG, so resumed draws continue the
    /// uninterrupted sequence.
    pub rng_word_pos: u128,
}

impl TrainerState {
    /// The training RNG exactly as it stood at save time.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

/// A loaded checkpoint: config snapshot, trainer position, and the named
/// tensor map (model parameters, plus `adam.m.*` / `adam.v.*` moments when
/// an optimizer was saved).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainerState,
    pub adam_t: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Rebuilds the model from the snapshot config and stored tensors.
    /// Every model parameter must be present with exactly the shape the
    /// config dictates.
    pub fn restore_model(&self) -> Result<TarisModel> {
        let mut model = TarisModel::init(self.config.clone(), 0)?;
        let mut err = None;
        model.visit_mut(&mut |name, param| {
            if err.is_some() {
                return;
            }
            match self.tensor(&name) {
                None => err = Some(Error::Data(format!("checkpoint is missing tensor {name}"))),
                Some((_, shape, values)) => {
                    if shape != param.shape() {
                        err = Some(Error::Shape(format!(
                            "tensor {name} has shape {shape:?}, config wants {:?}",
                            param.shape()
                        )));
                    } else {
                        param.values_mut().copy_from_slice(values);
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Rebuilds the Adam state if moments were saved (returns None for a
    /// model-only checkpoint). `lr` comes from the schedule, not the file.
    pub fn restore_optimizer(&self, model: &TarisModel, lr: f64) -> Result<Option<Adam>> {
        let names = model.param_names();
        let has_any = names.iter().any(|n| self.tensor(&format!("adam.m.{n}")).is_some());
        if !has_any {
            return Ok(None);
        }
        let mut opt = Adam::new(&model.param_sizes(), AdamParams::with_lr(lr));
        opt.t = self.adam_t;
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut opt.m[i]), ("adam.v", &mut opt.v[i])] {
                let key = format!("{prefix}.{name}");
                let (_, _, values) = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {key}")))?;
                if values.len() != slot.len() {
                    return Err(Error::Shape(format!(
                        "tensor {key} has {} values, config wants {}",
                        values.len(),
                        slot.len()
                    )));
                }
                slot.copy_from_slice(values);
            }
        }
        Ok(Some(opt))
    }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in values {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Writes model (and optionally optimizer) state: the magic, a JSON config
/// snapshot, the trainer position, then `u32 tensor_count` length-prefixed
/// named f32 tensors. Little-endian throughout.
pub fn save_checkpoint(
    path: &Path,
    model: &TarisModel,
    optimizer: Option<&Adam>,
    state: &TrainerState,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg_json = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::Data(format!("checkpoint config encode: {e}")))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(state.epoch as u32).to_le_bytes());
    buf.extend_from_slice(&(state.stage as u32).to_le_bytes());
    buf.extend_from_slice(&state.rng_seed.to_le_bytes());
    buf.extend_from_slice(&state.rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&optimizer.map_or(0, |o| o.t).to_le_bytes());

    let mut count = model.param_names().len();
    if optimizer.is_some() {
        count *= 3; // parameters plus first and second moments
    }
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    model.visit(&mut |name, param| {
        push_tensor(&mut buf, &name, param.shape(), param.values());
    });
    if let Some(opt) = optimizer {
        for (i, name) in model.param_names().iter().enumerate() {
            let shape = [opt.m[i].len()];
            push_tensor(&mut buf, &format!("adam.m.{name}"), &shape, &opt.m[i]);
            push_tensor(&mut buf, &format!("adam.v.{name}"), &shape, &opt.v[i]);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint file back; the inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &bytes, pos: 0, path };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic (not a checkpoint file)",
            path.display()
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Data(format!("{}: config snapshot: {e}", path.display())))?;
    let epoch = r.u32()? as usize;
    let stage = r.u32()? as usize;
    let rng_seed = r.u64()?;
    let rng_word_pos = r.u128()?;
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Data(format!("{}: tensor name: {e}", path.display())))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(4 * len)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after the tensor map",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, state: TrainerState { epoch, stage, rng_seed, rng_word_pos }, adam_t, tensors })
}

/// Rounds every value to its f32 representation in place. The training loop
/// applies this to parameters and moments at each epoch boundary so that
/// checkpoint/resume runs and uninterrupted runs are bit-identical.
pub fn round_to_f32(values: &mut [f64]) {
    for x in values {
        *x = *x as f32 as f64;
    }
}

/// [`round_to_f32`] over a whole model and optimizer.
pub fn round_state_to_f32(model: &mut TarisModel, optimizer: Option<&mut Adam>) {
    model.visit_mut(&mut |_, param| round_to_f32(param.values_mut()));
    if let Some(opt) = optimizer {
        for m in &mut opt.m {
            round_to_f32(m);
        }
        for v in &mut opt.v {
            round_to_f32(v);
        }
    }
}
