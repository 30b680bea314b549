//! Stock Transformer building blocks, parameterized by additive attention
//! biases so that every connectivity variant of the model is a mask choice.
//!
//! Blocks use pre-norm residuals, a single attention head, and inverted
//! dropout on attention weights and the feed-forward hidden activations.
//! Targets carry a leading BOS token and no EOS; termination is handled by
//! the decoding layer, not the vocabulary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alphabet::{INPUT_VOCAB, VOCAB};
use crate::diff::{DiffArray, NodeId, Tape};
use crate::mask::AttentionBias;
use crate::{Error, Result};

/// Layer-norm variance epsilon used across all blocks.
pub const LN_EPS: f64 = 1e-5;

/// Shared shape/behavior knobs for one encoder or decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    /// Model width d_model.
    pub h: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab: usize,
}

impl StackConfig {
    pub fn new(layers: usize, h: usize, d_ff: usize, dropout: f64) -> Self {
        StackConfig { layers, h, d_ff, heads: 1, dropout, vocab: VOCAB }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.h == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!(
                "stack needs layers/h/d_ff ≥ 1, got {}/{}/{}",
                self.layers, self.h, self.d_ff
            )));
        }
        if self.heads != 1 {
            return Err(Error::Config(format!("only one attention head is supported, got {}", self.heads)));
        }
        if self.vocab != VOCAB {
            return Err(Error::Config(format!("output vocabulary must be {VOCAB}, got {}", self.vocab)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one attention sublayer (all h×h,
/// bias-free as in the original Transformer).
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: DiffArray,
    pub wk: DiffArray,
    pub wv: DiffArray,
    pub wo: DiffArray,
}

/// One encoder layer: self-attention and feed-forward sublayers, each with a
/// pre-norm gain/shift pair.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub attn: AttnParams,
    pub ln1_gain: DiffArray,
    pub ln1_shift: DiffArray,
    pub ff_w1: DiffArray,
    pub ff_b1: DiffArray,
    pub ff_w2: DiffArray,
    pub ff_b2: DiffArray,
    pub ln2_gain: DiffArray,
    pub ln2_shift: DiffArray,
}

/// One decoder layer: causal self-attention, cross-attention over encoder
/// memory, and feed-forward, with three pre-norm pairs.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub ln1_gain: DiffArray,
    pub ln1_shift: DiffArray,
    pub cross_attn: AttnParams,
    pub ln2_gain: DiffArray,
    pub ln2_shift: DiffArray,
    pub ff_w1: DiffArray,
    pub ff_b1: DiffArray,
    pub ff_w2: DiffArray,
    pub ff_b2: DiffArray,
    pub ln3_gain: DiffArray,
    pub ln3_shift: DiffArray,
}

/// Full encoder stack: input affine projection plus `layers` blocks.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub in_w: DiffArray,
    pub in_b: DiffArray,
    pub layers: Vec<EncoderLayerParams>,
}

/// Full decoder stack: token embedding, `layers` blocks, output projection
/// to vocabulary logits.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: DiffArray,
    pub layers: Vec<DecoderLayerParams>,
    pub out_w: DiffArray,
    pub out_b: DiffArray,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffArray {
    // Scaled-uniform init: ±sqrt(6/(fan_in+fan_out)).
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect();
    DiffArray::new(vec![rows, cols], v).expect("finite init")
}

fn ones(n: usize) -> DiffArray {
    DiffArray::new(vec![n], vec![1.0; n]).expect("finite init")
}

impl AttnParams {
    pub fn init(rng: &mut ChaCha8Rng, h: usize) -> Self {
        AttnParams {
            wq: uniform(rng, h, h),
            wk: uniform(rng, h, h),
            wv: uniform(rng, h, h),
            wo: uniform(rng, h, h),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DiffArray)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DiffArray)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl EncoderLayerParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &StackConfig) -> Self {
        EncoderLayerParams {
            attn: AttnParams::init(rng, cfg.h),
            ln1_gain: ones(cfg.h),
            ln1_shift: DiffArray::zeros(vec![cfg.h]),
            ff_w1: uniform(rng, cfg.h, cfg.d_ff),
            ff_b1: DiffArray::zeros(vec![cfg.d_ff]),
            ff_w2: uniform(rng, cfg.d_ff, cfg.h),
            ff_b2: DiffArray::zeros(vec![cfg.h]),
            ln2_gain: ones(cfg.h),
            ln2_shift: DiffArray::zeros(vec![cfg.h]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DiffArray)) {
        self.attn.visit(&format!("{prefix}.self"), f);
        f(format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1.shift"), &self.ln1_shift);
        f(format!("{prefix}.ff.w1"), &self.ff_w1);
        f(format!("{prefix}.ff.b1"), &self.ff_b1);
        f(format!("{prefix}.ff.w2"), &self.ff_w2);
        f(format!("{prefix}.ff.b2"), &self.ff_b2);
        f(format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2.shift"), &self.ln2_shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DiffArray)) {
        self.attn.visit_mut(&format!("{prefix}.self"), f);
        f(format!("{prefix}.ln1.gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1.shift"), &mut self.ln1_shift);
        f(format!("{prefix}.ff.w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff.b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff.w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff.b2"), &mut self.ff_b2);
        f(format!("{prefix}.ln2.gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2.shift"), &mut self.ln2_shift);
    }
}

impl DecoderLayerParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &StackConfig) -> Self {
        DecoderLayerParams {
            self_attn: AttnParams::init(rng, cfg.h),
            ln1_gain: ones(cfg.h),
            ln1_shift: DiffArray::zeros(vec![cfg.h]),
            cross_attn: AttnParams::init(rng, cfg.h),
            ln2_gain: ones(cfg.h),
            ln2_shift: DiffArray::zeros(vec![cfg.h]),
            ff_w1: uniform(rng, cfg.h, cfg.d_ff),
            ff_b1: DiffArray::zeros(vec![cfg.d_ff]),
            ff_w2: uniform(rng, cfg.d_ff, cfg.h),
            ff_b2: DiffArray::zeros(vec![cfg.h]),
            ln3_gain: ones(cfg.h),
            ln3_shift: DiffArray::zeros(vec![cfg.h]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DiffArray)) {
        self.self_attn.visit(&format!("{prefix}.self"), f);
        f(format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1.shift"), &self.ln1_shift);
        self.cross_attn.visit(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2.shift"), &self.ln2_shift);
        f(format!("{prefix}.ff.w1"), &self.ff_w1);
        f(format!("{prefix}.ff.b1"), &self.ff_b1);
        f(format!("{prefix}.ff.w2"), &self.ff_w2);
        f(format!("{prefix}.ff.b2"), &self.ff_b2);
        f(format!("{prefix}.ln3.gain"), &self.ln3_gain);
        f(format!("{prefix}.ln3.shift"), &self.ln3_shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DiffArray)) {
        self.self_attn.visit_mut(&format!("{prefix}.self"), f);
        f(format!("{prefix}.ln1.gain"), &mut self.ln1_gain);
        f(format!("{prefix}.ln1.shift"), &mut self.ln1_shift);
        self.cross_attn.visit_mut(&format!("{prefix}.cross"), f);
        f(format!("{prefix}.ln2.gain"), &mut self.ln2_gain);
        f(format!("{prefix}.ln2.shift"), &mut self.ln2_shift);
        f(format!("{prefix}.ff.w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff.b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff.w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff.b2"), &mut self.ff_b2);
        f(format!("{prefix}.ln3.gain"), &mut self.ln3_gain);
        f(format!("{prefix}.ln3.shift"), &mut self.ln3_shift);
    }
}

impl EncoderParams {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, cfg: &StackConfig) -> Self {
        EncoderParams {
            in_w: uniform(rng, d_in, cfg.h),
            in_b: DiffArray::zeros(vec![cfg.h]),
            layers: (0..cfg.layers).map(|_| EncoderLayerParams::init(rng, cfg)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DiffArray)) {
        f(format!("{prefix}.in.w"), &self.in_w);
        f(format!("{prefix}.in.b"), &self.in_b);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DiffArray)) {
        f(format!("{prefix}.in.w"), &mut self.in_w);
        f(format!("{prefix}.in.b"), &mut self.in_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), f);
        }
    }
}

impl DecoderParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &StackConfig) -> Self {
        DecoderParams {
            embed: uniform(rng, INPUT_VOCAB, cfg.h),
            layers: (0..cfg.layers).map(|_| DecoderLayerParams::init(rng, cfg)).collect(),
            out_w: uniform(rng, cfg.h, cfg.vocab),
            out_b: DiffArray::zeros(vec![cfg.vocab]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DiffArray)) {
        f(format!("{prefix}.embed"), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), f);
        }
        f(format!("{prefix}.out.w"), &self.out_w);
        f(format!("{prefix}.out.b"), &self.out_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DiffArray)) {
        f(format!("{prefix}.embed"), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), f);
        }
        f(format!("{prefix}.out.w"), &mut self.out_w);
        f(format!("{prefix}.out.b"), &mut self.out_b);
    }
}

// ---------------------------------------------------------------------------
// Tape-bound mirrors: every parameter registered as a leaf node once per
// forward pass, so gradients can be read back by NodeId.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BoundAttn {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoderLayer {
    pub attn: BoundAttn,
    pub ln1_gain: NodeId,
    pub ln1_shift: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_shift: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDecoderLayer {
    pub self_attn: BoundAttn,
    pub ln1_gain: NodeId,
    pub ln1_shift: NodeId,
    pub cross_attn: BoundAttn,
    pub ln2_gain: NodeId,
    pub ln2_shift: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
    pub ln3_gain: NodeId,
    pub ln3_shift: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub in_w: NodeId,
    pub in_b: NodeId,
    pub layers: Vec<BoundEncoderLayer>,
}

#[derive(Debug, Clone)]
pub struct BoundDecoder {
    pub embed: NodeId,
    pub layers: Vec<BoundDecoderLayer>,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl AttnParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundAttn {
        BoundAttn {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
        }
    }
}

impl EncoderParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            in_w: tape.leaf(self.in_w.clone()),
            in_b: tape.leaf(self.in_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| BoundEncoderLayer {
                    attn: l.attn.bind(tape),
                    ln1_gain: tape.leaf(l.ln1_gain.clone()),
                    ln1_shift: tape.leaf(l.ln1_shift.clone()),
                    ff_w1: tape.leaf(l.ff_w1.clone()),
                    ff_b1: tape.leaf(l.ff_b1.clone()),
                    ff_w2: tape.leaf(l.ff_w2.clone()),
                    ff_b2: tape.leaf(l.ff_b2.clone()),
                    ln2_gain: tape.leaf(l.ln2_gain.clone()),
                    ln2_shift: tape.leaf(l.ln2_shift.clone()),
                })
                .collect(),
        }
    }
}

impl DecoderParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundDecoder {
        BoundDecoder {
            embed: tape.leaf(self.embed.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| BoundDecoderLayer {
                    self_attn: l.self_attn.bind(tape),
                    ln1_gain: tape.leaf(l.ln1_gain.clone()),
                    ln1_shift: tape.leaf(l.ln1_shift.clone()),
                    cross_attn: l.cross_attn.bind(tape),
                    ln2_gain: tape.leaf(l.ln2_gain.clone()),
                    ln2_shift: tape.leaf(l.ln2_shift.clone()),
                    ff_w1: tape.leaf(l.ff_w1.clone()),
                    ff_b1: tape.leaf(l.ff_b1.clone()),
                    ff_w2: tape.leaf(l.ff_w2.clone()),
                    ff_b2: tape.leaf(l.ff_b2.clone()),
                    ln3_gain: tape.leaf(l.ln3_gain.clone()),
                    ln3_shift: tape.leaf(l.ln3_shift.clone()),
                })
                .collect(),
            out_w: tape.leaf(self.out_w.clone()),
            out_b: tape.leaf(self.out_b.clone()),
        }
    }
}

/// One forward pass's mutable context: the tape plus the dropout stream.
/// Dropout fires only when an RNG is attached (training mode); inference
/// passes apply no dropout and no rescaling.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    pub fn inference(tape: &'a mut Tape) -> Self {
        Fwd { tape, dropout: 0.0, rng: None }
    }

    pub fn training(tape: &'a mut Tape, dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Fwd { tape, dropout, rng: Some(rng) }
    }

    /// Applies dropout in training mode (an RNG present and rate > 0),
    /// otherwise passes the node through untouched.
    pub fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        match &mut self.rng {
            Some(r) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, &mut **r),
            _ => Ok(x),
        }
    }
}

/// Deterministic sinusoidal position table, values in [−1, 1].
pub fn positional_encoding(length: usize, h: usize) -> Result<DiffArray> {
    if length == 0 || h == 0 {
        return Err(Error::Shape(format!("positional_encoding: length={length}, h={h} must be ≥ 1")));
    }
    let mut v = vec![0.0; length * h];
    for pos in 0..length {
        for j in 0..h {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / h as f64);
            v[pos * h + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    DiffArray::new(vec![length, h], v)
}

/// Single-head scaled dot-product attention with an additive mask:
/// `softmax(QKᵀ/√h + bias) · V`. Applies dropout to the attention weights
/// in training mode.
pub fn attention(
    fwd: &mut Fwd,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    bias: &AttentionBias,
    h: usize,
) -> Result<NodeId> {
    let scores = fwd.tape.matmul_nt(q, k)?;
    let scaled = fwd.tape.scale(scores, 1.0 / (h as f64).sqrt())?;
    let weights = fwd.tape.softmax_bias(scaled, bias.values())?;
    let weights = fwd.maybe_dropout(weights)?;
    fwd.tape.matmul(weights, v)
}

fn encoder_block(
    fwd: &mut Fwd,
    x: NodeId,
    mask: &AttentionBias,
    p: &BoundEncoderLayer,
    cfg: &StackConfig,
) -> Result<NodeId> {
    let ln = fwd.tape.layer_norm(x, p.ln1_gain, p.ln1_shift, LN_EPS)?;
    let q = fwd.tape.matmul(ln, p.attn.wq)?;
    let k = fwd.tape.matmul(ln, p.attn.wk)?;
    let v = fwd.tape.matmul(ln, p.attn.wv)?;
    let ctx = attention(fwd, q, k, v, mask, cfg.h)?;
    let proj = fwd.tape.matmul(ctx, p.attn.wo)?;
    let x = fwd.tape.add(x, proj)?;

    let ln2 = fwd.tape.layer_norm(x, p.ln2_gain, p.ln2_shift, LN_EPS)?;
    let hmid = fwd.tape.matmul(ln2, p.ff_w1)?;
    let hmid = fwd.tape.add_row(hmid, p.ff_b1)?;
    let hmid = fwd.tape.relu(hmid)?;
    let hmid = fwd.maybe_dropout(hmid)?;
    let out = fwd.tape.matmul(hmid, p.ff_w2)?;
    let out = fwd.tape.add_row(out, p.ff_b2)?;
    fwd.tape.add(x, out)
}

/// Encodes `frames[N×d_in]` through the full stack, returning the output of
/// every layer in order (the last entry is the stack output). The same mask
/// is reused at every layer, which is what makes the per-layer receptive
/// field grow linearly.
pub fn encode_collect(
    fwd: &mut Fwd,
    frames: &DiffArray,
    mask: &AttentionBias,
    p: &BoundEncoder,
    cfg: &StackConfig,
) -> Result<Vec<NodeId>> {
    let shape = frames.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("encode: frames must be rank-2, got {shape:?}")));
    }
    let n = shape[0];
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::Shape(format!(
            "encode: mask is {}x{} but frames have {} rows",
            mask.rows(),
            mask.cols(),
            n
        )));
    }
    let x0 = fwd.tape.leaf(frames.clone());
    let proj = fwd.tape.matmul(x0, p.in_w)?;
    let proj = fwd.tape.add_row(proj, p.in_b)?;
    let pe = fwd.tape.leaf(positional_encoding(n, cfg.h)?);
    let mut x = fwd.tape.add(proj, pe)?;
    let mut outs = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        x = encoder_block(fwd, x, mask, layer, cfg)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Encodes `frames[N×d_in]` to the final `[N×h]` representation.
pub fn encode(
    fwd: &mut Fwd,
    frames: &DiffArray,
    mask: &AttentionBias,
    p: &BoundEncoder,
    cfg: &StackConfig,
) -> Result<NodeId> {
    let outs = encode_collect(fwd, frames, mask, p, cfg)?;
    outs.last()
        .copied()
        .ok_or_else(|| Error::Config("encode: stack has zero layers".into()))
}

/// What a decoder pass hands back: vocabulary logits plus the final
/// layer's raw cross-attention context rows (one per grapheme position).
#[derive(Debug, Clone, Copy)]
pub struct DecodeOut {
    pub logits: NodeId,
    pub cross_ctx: NodeId,
}

/// Decodes teacher-forced `inputs` (BOS-led token ids) against encoder
/// `memory[N×h]`, returning vocabulary logits `[L×28]`.
pub fn decode(
    fwd: &mut Fwd,
    inputs: &[u8],
    memory: NodeId,
    self_mask: &AttentionBias,
    cross_mask: &AttentionBias,
    p: &BoundDecoder,
    cfg: &StackConfig,
) -> Result<DecodeOut> {
    let l = inputs.len();
    if l == 0 {
        return Err(Error::Shape("decode: empty input sequence".into()));
    }
    for (pos, &tok) in inputs.iter().enumerate() {
        if usize::from(tok) >= INPUT_VOCAB {
            return Err(Error::Data(format!("decode: token {tok} at position {pos} out of range")));
        }
    }
    let n = fwd.tape.value(memory).rows_cols().0;
    if self_mask.rows() != l || self_mask.cols() != l {
        return Err(Error::Shape(format!(
            "decode: self mask is {}x{} for {} tokens",
            self_mask.rows(),
            self_mask.cols(),
            l
        )));
    }
    if cross_mask.rows() != l || cross_mask.cols() != n {
        return Err(Error::Shape(format!(
            "decode: cross mask is {}x{} but need {}x{}",
            cross_mask.rows(),
            cross_mask.cols(),
            l,
            n
        )));
    }

    let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
    let emb = fwd.tape.gather_rows(p.embed, &idx)?;
    let emb = fwd.tape.scale(emb, (cfg.h as f64).sqrt())?;
    let pe = fwd.tape.leaf(positional_encoding(l, cfg.h)?);
    let mut x = fwd.tape.add(emb, pe)?;

    let mut last_cross_ctx = None;
    for layer in &p.layers {
        let ln1 = fwd.tape.layer_norm(x, layer.ln1_gain, layer.ln1_shift, LN_EPS)?;
        let q = fwd.tape.matmul(ln1, layer.self_attn.wq)?;
        let k = fwd.tape.matmul(ln1, layer.self_attn.wk)?;
        let v = fwd.tape.matmul(ln1, layer.self_attn.wv)?;
        let ctx = attention(fwd, q, k, v, self_mask, cfg.h)?;
        let proj = fwd.tape.matmul(ctx, layer.self_attn.wo)?;
        x = fwd.tape.add(x, proj)?;

        let ln2 = fwd.tape.layer_norm(x, layer.ln2_gain, layer.ln2_shift, LN_EPS)?;
        let q = fwd.tape.matmul(ln2, layer.cross_attn.wq)?;
        let k = fwd.tape.matmul(memory, layer.cross_attn.wk)?;
        let v = fwd.tape.matmul(memory, layer.cross_attn.wv)?;
        let ctx = attention(fwd, q, k, v, cross_mask, cfg.h)?;
        last_cross_ctx = Some(ctx);
        let proj = fwd.tape.matmul(ctx, layer.cross_attn.wo)?;
        x = fwd.tape.add(x, proj)?;

        let ln3 = fwd.tape.layer_norm(x, layer.ln3_gain, layer.ln3_shift, LN_EPS)?;
        let hmid = fwd.tape.matmul(ln3, layer.ff_w1)?;
        let hmid = fwd.tape.add_row(hmid, layer.ff_b1)?;
        let hmid = fwd.tape.relu(hmid)?;
        let hmid = fwd.maybe_dropout(hmid)?;
        let out = fwd.tape.matmul(hmid, layer.ff_w2)?;
        let out = fwd.tape.add_row(out, layer.ff_b2)?;
        x = fwd.tape.add(x, out)?;
    }

    let logits = fwd.tape.matmul(x, p.out_w)?;
    let logits = fwd.tape.add_row(logits, p.out_b)?;
    let cross_ctx =
        last_cross_ctx.ok_or_else(|| Error::Config("decode: stack has zero layers".into()))?;
    Ok(DecodeOut { logits, cross_ctx })
}
