//! Model assembly: audio and audio-visual forward passes, word-boundary
//! gating, cross-modal fusion, the composite training objective, and greedy
//! offline decoding.
//!
//! One convention matters everywhere: the word count `|w|` is the number of
//! SPACE tokens in the transcript, so a one-word sentence has `|w| = 0`. The
//! gate learns to count word *boundaries*, and every Σα comparison in this
//! crate is shifted by one relative to the intuitive word count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alphabet::{space_count, BOS, VOCAB};
use crate::diff::{Adam, DiffArray, Gradients, NodeId, Tape};
use crate::mask::{
    av_window, causal_mask, encoder_window_mask, segment_mask, word_indices, AttentionBias,
    ConnectivitySpec, GateTrace, SegmentSpec,
};
use crate::transformer::{
    decode, encode, BoundDecoder, BoundEncoder, DecoderParams, EncoderParams, Fwd, StackConfig,
};
use crate::{Error, Result};

/// Which input streams the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Av,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "av" => Ok(Modality::Av),
            other => Err(Error::Config(format!("unknown modality {other:?} (audio|av)"))),
        }
    }
}

/// How the video context joins the audio representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// o_AV = o_A + c_V — no extra parameters.
    Add,
    /// o_AV = W_AV·[o_A; c_V] + b_AV.
    Concat,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Fusion::Add),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!("unknown fusion {other:?} (add|concat)"))),
        }
    }
}

/// Gate activation. Sigmoid is the asserted default; the scaled sigmoid and
/// tanh variants exist for ablation and carry no behavioral guarantees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    Sigmoid,
    /// sigmoid(k·x) with slope k.
    ScaledSigmoid(f64),
    Tanh,
}

impl std::str::FromStr for GateActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(GateActivation::Sigmoid),
            "scaled-sigmoid" | "scaled_sigmoid" => Ok(GateActivation::ScaledSigmoid(2.0)),
            "tanh" => Ok(GateActivation::Tanh),
            other => Err(Error::Config(format!(
                "unknown gate activation {other:?} (sigmoid|scaled-sigmoid|tanh)"
            ))),
        }
    }
}

/// Everything that shapes a model instance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub fusion: Fusion,
    pub gate: GateActivation,
    /// Word-loss weight λ in the composite objective.
    pub lambda: f64,
    /// Cross-modal half-window B: each audio frame integrates 2B+1 video frames.
    pub window_b: usize,
    /// Audio encoder self-attention window (e_LB / e_LA in frames).
    pub encoder: ConnectivitySpec,
    /// Video encoder self-attention window; full by default.
    pub video_encoder: ConnectivitySpec,
    /// Decoder cross-attention window (d_LB / d_LA in segments).
    pub segments: SegmentSpec,
    pub stack: StackConfig,
    /// Audio feature width per frame.
    pub d_a: usize,
    /// Video feature width per frame.
    pub d_v: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.d_a == 0 {
            return Err(Error::Config("audio feature width d_a must be ≥ 1".into()));
        }
        if self.modality == Modality::Av && self.d_v == 0 {
            return Err(Error::Config("video feature width d_v must be ≥ 1 for av models".into()));
        }
        if let GateActivation::ScaledSigmoid(k) = self.gate {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::Config(format!("scaled sigmoid slope must be > 0, got {k}")));
            }
        }
        Ok(())
    }
}

/// Parameter bundle for the whole system: audio (and optionally video)
/// encoder stacks, the gating unit, optional concat-fusion weights, and the
/// decoder stack with its output projection.
#[derive(Debug, Clone)]
pub struct TarisModel {
    pub cfg: ModelConfig,
    pub audio_enc: EncoderParams,
    pub video_enc: Option<EncoderParams>,
    /// Gate weights, h×1.
    pub gate_w: DiffArray,
    /// Gate bias, scalar.
    pub gate_b: DiffArray,
    /// Concat-fusion projection (2h×h, row convention), present iff
    /// modality=av and fusion=concat.
    pub fuse_w: Option<DiffArray>,
    pub fuse_b: Option<DiffArray>,
    pub decoder: DecoderParams,
}

impl TarisModel {
    /// Initializes all parameters from a seed. The same seed and config
    /// always produce bit-identical parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.stack.h;
        let audio_enc = EncoderParams::init(&mut rng, cfg.d_a, &cfg.stack);
        let video_enc = match cfg.modality {
            Modality::Av => Some(EncoderParams::init(&mut rng, cfg.d_v, &cfg.stack)),
            Modality::Audio => None,
        };
        let lim = (6.0 / (h + 1) as f64).sqrt();
        let gate_w = DiffArray::new(
            vec![h, 1],
            (0..h).map(|_| rand::Rng::gen_range(&mut rng, -lim..lim)).collect(),
        )?;
        let gate_b = DiffArray::zeros(vec![1]);
        let (fuse_w, fuse_b) = if cfg.modality == Modality::Av && cfg.fusion == Fusion::Concat {
            let lim = (6.0 / (3 * h) as f64).sqrt();
            let w = DiffArray::new(
                vec![2 * h, h],
                (0..2 * h * h).map(|_| rand::Rng::gen_range(&mut rng, -lim..lim)).collect(),
            )?;
            (Some(w), Some(DiffArray::zeros(vec![h])))
        } else {
            (None, None)
        };
        let decoder = DecoderParams::init(&mut rng, &cfg.stack);
        Ok(TarisModel { cfg, audio_enc, video_enc, gate_w, gate_b, fuse_w, fuse_b, decoder })
    }

    /// Walks every parameter in registry order with its stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a DiffArray)) {
        self.audio_enc.visit("enc.a", f);
        if let Some(v) = &self.video_enc {
            v.visit("enc.v", f);
        }
        f("gate.w".into(), &self.gate_w);
        f("gate.b".into(), &self.gate_b);
        if let Some(w) = &self.fuse_w {
            f("fuse.w".into(), w);
        }
        if let Some(b) = &self.fuse_b {
            f("fuse.b".into(), b);
        }
        self.decoder.visit("dec", f);
    }

    /// Mutable walk in the same registry order as [`TarisModel::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut DiffArray)) {
        self.audio_enc.visit_mut("enc.a", f);
        if let Some(v) = &mut self.video_enc {
            v.visit_mut("enc.v", f);
        }
        f("gate.w".into(), &mut self.gate_w);
        f("gate.b".into(), &mut self.gate_b);
        if let Some(w) = &mut self.fuse_w {
            f("fuse.w".into(), w);
        }
        if let Some(b) = &mut self.fuse_b {
            f("fuse.b".into(), b);
        }
        self.decoder.visit_mut("dec", f);
    }

    /// Parameter names in registry order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    /// Flat element count across all parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    /// Per-tensor element sizes in registry order (for optimizer state).
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.visit(&mut |_, a| sizes.push(a.len()));
        sizes
    }

    /// Registers every parameter on the tape, returning the node mirror.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            audio_enc: self.audio_enc.bind(tape),
            video_enc: self.video_enc.as_ref().map(|v| v.bind(tape)),
            gate_w: tape.leaf(self.gate_w.clone()),
            gate_b: tape.leaf(self.gate_b.clone()),
            fuse_w: self.fuse_w.as_ref().map(|w| tape.leaf(w.clone())),
            fuse_b: self.fuse_b.as_ref().map(|b| tape.leaf(b.clone())),
            decoder: self.decoder.bind(tape),
        }
    }

    /// One Adam update from gradients listed in registry order.
    pub fn adam_update(&mut self, opt: &mut Adam, grads: &[DiffArray]) -> Result<()> {
        let sizes = self.param_sizes();
        if grads.len() != sizes.len() || opt.m.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "adam_update: {} gradients / {} optimizer slots for {} parameters",
                grads.len(),
                opt.m.len(),
                sizes.len()
            )));
        }
        opt.t += 1;
        let t = opt.t;
        let hp = opt.hp;
        let mut i = 0;
        let mut failure = None;
        let m = &mut opt.m;
        let v = &mut opt.v;
        self.visit_mut(&mut |name, arr| {
            if failure.is_some() {
                return;
            }
            if let Err(e) = crate::diff::adam_step(
                arr.values_mut(),
                grads[i].values(),
                &mut m[i],
                &mut v[i],
                t,
                &hp,
            ) {
                failure = Some(Error::Numerical(format!("{name}: {e}")));
            }
            i += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Node mirrors of every model parameter for one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub audio_enc: BoundEncoder,
    pub video_enc: Option<BoundEncoder>,
    pub gate_w: NodeId,
    pub gate_b: NodeId,
    pub fuse_w: Option<NodeId>,
    pub fuse_b: Option<NodeId>,
    pub decoder: BoundDecoder,
}

impl BoundModel {
    /// Node ids in the same registry order as [`TarisModel::visit`].
    pub fn nodes(&self) -> Vec<NodeId> {
        fn push_enc(out: &mut Vec<NodeId>, e: &BoundEncoder) {
            out.push(e.in_w);
            out.push(e.in_b);
            for l in &e.layers {
                out.extend([l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo]);
                out.extend([l.ln1_gain, l.ln1_shift]);
                out.extend([l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2]);
                out.extend([l.ln2_gain, l.ln2_shift]);
            }
        }
        let mut out = Vec::new();
        push_enc(&mut out, &self.audio_enc);
        if let Some(v) = &self.video_enc {
            push_enc(&mut out, v);
        }
        out.push(self.gate_w);
        out.push(self.gate_b);
        if let Some(w) = self.fuse_w {
            out.push(w);
        }
        if let Some(b) = self.fuse_b {
            out.push(b);
        }
        out.push(self.decoder.embed);
        for l in &self.decoder.layers {
            out.extend([l.self_attn.wq, l.self_attn.wk, l.self_attn.wv, l.self_attn.wo]);
            out.extend([l.ln1_gain, l.ln1_shift]);
            out.extend([l.cross_attn.wq, l.cross_attn.wk, l.cross_attn.wv, l.cross_attn.wo]);
            out.extend([l.ln2_gain, l.ln2_shift]);
            out.extend([l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2]);
            out.extend([l.ln3_gain, l.ln3_shift]);
        }
        out.push(self.decoder.out_w);
        out.push(self.decoder.out_b);
        out
    }

    /// Gradients for every parameter in registry order (zeros where the loss
    /// does not touch a tensor).
    pub fn gradients(&self, tape: &Tape, g: &Gradients) -> Vec<DiffArray> {
        self.nodes()
            .into_iter()
            .map(|id| g.get_or_zeros(id, tape.value(id).shape()))
            .collect()
    }
}

/// Computes the per-frame gating signal α = activation(o·W_G + b_G) from
/// encoder outputs `[N×h]`, recording it on the tape.
pub fn gate_alpha(
    fwd: &mut Fwd,
    encodings: NodeId,
    gate_w: NodeId,
    gate_b: NodeId,
    activation: GateActivation,
) -> Result<GateTrace> {
    let z = fwd.tape.matmul(encodings, gate_w)?;
    let z = fwd.tape.add_row(z, gate_b)?;
    let alpha = match activation {
        GateActivation::Sigmoid => fwd.tape.sigmoid(z)?,
        GateActivation::ScaledSigmoid(k) => {
            let scaled = fwd.tape.scale(z, k)?;
            fwd.tape.sigmoid(scaled)?
        }
        GateActivation::Tanh => fwd.tape.tanh(z)?,
    };
    let sum = fwd.tape.sum(alpha)?;
    let mut trace = GateTrace::from_alpha(fwd.tape.value(alpha).values().to_vec())?;
    trace.alpha_node = Some(alpha);
    trace.alpha_sum_node = Some(sum);
    Ok(trace)
}

/// Word loss: the squared difference between the transcript's SPACE count
/// and the raw (un-floored) gate sum Σα. Differentiable through α.
pub fn word_loss(tape: &mut Tape, gate: &GateTrace, transcript: &[u8]) -> Result<NodeId> {
    let sum = gate
        .alpha_sum_node
        .ok_or_else(|| Error::Config("word_loss: gate trace carries no tape nodes".into()))?;
    let target = space_count(transcript) as f64;
    let neg = tape.scale(sum, -1.0)?;
    let diff = tape.add_const(neg, target)?;
    tape.mul(diff, diff)
}

/// Cross-modal windowed attention: each audio frame attends over the video
/// frames inside its alignment window, with raw (unscaled) dot-product
/// scores and the video representations as values.
fn windowed_video_context(
    fwd: &mut Fwd,
    o_a: NodeId,
    o_v: NodeId,
    b: usize,
) -> Result<NodeId> {
    let n = fwd.tape.value(o_a).rows_cols().0;
    let m = fwd.tape.value(o_v).rows_cols().0;
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        windows.push(av_window(i, n, m, b)?);
    }
    let bias = AttentionBias::from_predicate(n, m, |i, j| {
        let (lo, hi) = windows[i];
        lo <= j && j <= hi
    });
    let scores = fwd.tape.matmul_nt(o_a, o_v)?;
    let weights = fwd.tape.softmax_bias(scores, bias.values())?;
    let weights = fwd.maybe_dropout(weights)?;
    fwd.tape.matmul(weights, o_v)
}

/// Fuses audio and video encodings: windowed cross-modal attention produces
/// a per-audio-frame video context c_V, combined additively or by a learned
/// projection of the concatenation. Returns `(c_V, o_AV)`.
pub fn av_fuse(
    fwd: &mut Fwd,
    o_a: NodeId,
    o_v: NodeId,
    b: usize,
    fusion: Fusion,
    fuse_w: Option<NodeId>,
    fuse_b: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let c_v = windowed_video_context(fwd, o_a, o_v, b)?;
    let o_av = match fusion {
        Fusion::Add => fwd.tape.add(o_a, c_v)?,
        Fusion::Concat => {
            let (w, bb) = match (fuse_w, fuse_b) {
                (Some(w), Some(bb)) => (w, bb),
                _ => {
                    return Err(Error::Config(
                        "concat fusion requires fuse_w/fuse_b parameters".into(),
                    ))
                }
            };
            let cat = fwd.tape.concat_cols(o_a, c_v)?;
            let proj = fwd.tape.matmul(cat, w)?;
            fwd.tape.add_row(proj, bb)?
        }
    };
    Ok((c_v, o_av))
}

/// Builds the decoder-encoder validity bias for query rows whose word index
/// is `w_rows`, patching any empty row to allow-all. Returns the bias and
/// the patched-row count.
pub fn cross_bias_for(
    w_rows: &[i64],
    w_hat: &[i64],
    spec: &SegmentSpec,
) -> (AttentionBias, usize) {
    let sm = segment_mask(w_rows, w_hat, spec);
    let mut bias = sm.bias;
    for &r in &sm.empty_rows {
        bias.allow_entire_row(r);
    }
    (bias, sm.empty_rows.len())
}

/// Word index of each teacher-forced decoder *query* position: position p
/// sees BOS plus the first p transcript tokens, so its word index is the
/// SPACE count among `transcript[..p]`. This matches what incremental
/// decoding knows at emission time (SPACEs already emitted).
pub fn query_word_rows(transcript: &[u8]) -> Vec<i64> {
    let w = word_indices(transcript);
    let mut rows = Vec::with_capacity(transcript.len());
    rows.push(0);
    rows.extend_from_slice(&w[..transcript.len().saturating_sub(1)]);
    rows
}

/// Everything a forward pass computed, by tape node.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Audio encoder output `[N×h]`.
    pub o_a: NodeId,
    /// Video encoder output `[M×h]`, multimodal only.
    pub o_v: Option<NodeId>,
    /// Windowed video context per audio frame `[N×h]`, multimodal only.
    pub c_v: Option<NodeId>,
    /// Fused representation `[N×h]`, present iff modality is av.
    pub o_av: Option<NodeId>,
    /// Gate values derived from o_AV when multimodal, else from o_A.
    pub gate: GateTrace,
    /// Decoder vocabulary logits `[L×28]`.
    pub logits: NodeId,
    /// Softmax of the logits (the probability rows fed to cross-entropy).
    pub probs: NodeId,
    /// Final-layer cross-attention context per grapheme `[L×h]`.
    pub cross_ctx: NodeId,
    /// Cross-entropy target classes (the transcript).
    pub targets: Vec<usize>,
    /// How many validity-mask rows were patched to allow-all.
    pub empty_row_fallbacks: usize,
}

/// What the encoder side of a pass produced: encodings, optional fusion
/// products, and the gate trace. The decoder memory is the fused stream when
/// multimodal, otherwise the audio encoding.
pub struct EncodeSide {
    pub o_a: NodeId,
    pub o_v: Option<NodeId>,
    pub c_v: Option<NodeId>,
    pub o_av: Option<NodeId>,
    pub gate: GateTrace,
}

impl EncodeSide {
    /// The representation the decoder attends over.
    pub fn memory_node(&self) -> NodeId {
        self.o_av.unwrap_or(self.o_a)
    }
}

impl TarisModel {
    /// Encoder-side pass shared by training, offline decoding, and
    /// streaming: windowed audio encoding, optional video encoding plus
    /// windowed fusion, and the gate. Validates frame shapes against the
    /// config and the modality/video contract.
    fn encode_side(
        &self,
        fwd: &mut Fwd,
        bound: &BoundModel,
        audio: &DiffArray,
        video: Option<&DiffArray>,
    ) -> Result<EncodeSide> {
        if audio.shape().len() != 2 || audio.shape()[1] != self.cfg.d_a {
            return Err(Error::Shape(format!(
                "audio shape {:?} does not match d_a={}",
                audio.shape(),
                self.cfg.d_a
            )));
        }
        let video = match (self.cfg.modality, video) {
            (Modality::Av, Some(v)) => {
                if v.shape().len() != 2 || v.shape()[1] != self.cfg.d_v {
                    return Err(Error::Shape(format!(
                        "video shape {:?} does not match d_v={}",
                        v.shape(),
                        self.cfg.d_v
                    )));
                }
                Some(v)
            }
            (Modality::Av, None) => {
                return Err(Error::Config("modality av requires video frames".into()))
            }
            // Audio models ignore any video stream (modality ablations run
            // on the same corpus).
            (Modality::Audio, _) => None,
        };

        let n = audio.shape()[0];
        let enc_mask = encoder_window_mask(n, &self.cfg.encoder)?;
        let o_a = encode(fwd, audio, &enc_mask, &bound.audio_enc, &self.cfg.stack)?;

        let (o_v, c_v, o_av) = match video {
            Some(v) => {
                let m = v.shape()[0];
                let v_mask = encoder_window_mask(m, &self.cfg.video_encoder)?;
                let benc = bound
                    .video_enc
                    .as_ref()
                    .ok_or_else(|| Error::Config("av model missing video encoder".into()))?;
                let o_v = encode(fwd, v, &v_mask, benc, &self.cfg.stack)?;
                let (c_v, o_av) = av_fuse(
                    fwd,
                    o_a,
                    o_v,
                    self.cfg.window_b,
                    self.cfg.fusion,
                    bound.fuse_w,
                    bound.fuse_b,
                )?;
                (Some(o_v), Some(c_v), Some(o_av))
            }
            None => (None, None, None),
        };

        let gate_src = o_av.unwrap_or(o_a);
        let gate = gate_alpha(fwd, gate_src, bound.gate_w, bound.gate_b, self.cfg.gate)?;
        Ok(EncodeSide { o_a, o_v, c_v, o_av, gate })
    }

    /// Inference-mode encoder side only: binds the model, encodes (and
    /// fuses, when multimodal), runs the gate, and hands back the decoder
    /// memory node with the gate trace. This is the pass the streaming
    /// engine replays on growing prefixes.
    pub fn memory(
        &self,
        tape: &mut Tape,
        audio: &DiffArray,
        video: Option<&DiffArray>,
    ) -> Result<(BoundModel, NodeId, GateTrace)> {
        self.cfg.validate()?;
        let bound = self.bind(tape);
        let mut fwd = Fwd::inference(tape);
        let side = self.encode_side(&mut fwd, &bound, audio, video)?;
        let mem = side.memory_node();
        Ok((bound, mem, side.gate))
    }

    /// Full teacher-forced forward pass. Training mode (an RNG present)
    /// applies dropout; inference is deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        audio: &DiffArray,
        video: Option<&DiffArray>,
        transcript: &[u8],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(BoundModel, ForwardTrace)> {
        self.cfg.validate()?;
        if transcript.is_empty() {
            return Err(Error::Data("forward: empty transcript".into()));
        }
        for (i, &tok) in transcript.iter().enumerate() {
            if usize::from(tok) >= VOCAB {
                return Err(Error::Data(format!(
                    "forward: transcript token {tok} at position {i} outside the 28-token alphabet"
                )));
            }
        }

        let bound = self.bind(tape);
        let dropout = if rng.is_some() { self.cfg.stack.dropout } else { 0.0 };
        let mut fwd = Fwd { tape, dropout, rng };
        let side = self.encode_side(&mut fwd, &bound, audio, video)?;
        let EncodeSide { o_a, o_v, c_v, o_av, gate } = side;

        let l = transcript.len();
        let w_rows = query_word_rows(transcript);
        let (cross_bias, fallbacks) = cross_bias_for(&w_rows, &gate.segment_ids, &self.cfg.segments);
        let self_mask = causal_mask(l)?;
        let mut inputs = Vec::with_capacity(l);
        inputs.push(BOS);
        inputs.extend_from_slice(&transcript[..l - 1]);

        let memory = o_av.unwrap_or(o_a);
        let out = decode(
            &mut fwd,
            &inputs,
            memory,
            &self_mask,
            &cross_bias,
            &bound.decoder,
            &self.cfg.stack,
        )?;
        let vocab_bias = AttentionBias::all_allowed(l, self.cfg.stack.vocab);
        let probs = fwd.tape.softmax_bias(out.logits, vocab_bias.values())?;

        let trace = ForwardTrace {
            o_a,
            o_v,
            c_v,
            o_av,
            gate,
            logits: out.logits,
            probs,
            cross_ctx: out.cross_ctx,
            targets: transcript.iter().map(|&t| t as usize).collect(),
            empty_row_fallbacks: fallbacks,
        };
        Ok((bound, trace))
    }
}

/// The three scalar loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub word: NodeId,
}

/// Combines per-part scalars into the composite objective CE + λ·Word.
pub fn combine_losses(tape: &mut Tape, ce: NodeId, word: NodeId, lambda: f64) -> Result<NodeId> {
    let scaled = tape.scale(word, lambda)?;
    tape.add(ce, scaled)
}

/// Composite training loss for a completed forward pass.
pub fn total_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    transcript: &[u8],
    lambda: f64,
) -> Result<LossNodes> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let ce = tape.cross_entropy(trace.probs, &trace.targets)?;
    let word = word_loss(tape, &trace.gate, transcript)?;
    let total = combine_losses(tape, ce, word, lambda)?;
    Ok(LossNodes { total, cross_entropy: ce, word })
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyDecode {
    pub text: String,
    pub tokens: Vec<u8>,
    /// True when the hard length cap cut decoding short.
    pub truncated: bool,
    /// Total gate mass Σα the stop rule worked from.
    pub sigma_alpha: f64,
    pub empty_row_fallbacks: usize,
}

/// The token-by-token greedy loop, factored out so tests can drive it with
/// constructed logits.
///
/// Stop rule: the gate promises `T = floor(Σα)` word boundaries. A SPACE is
/// emitted only while fewer than T SPACEs are out; the SPACE that would
/// exceed the promise instead terminates the sentence (it is the sentence-
/// final boundary, which transcripts do not carry). A hard cap of
/// `15·(T+1)` tokens guards against non-terminating models.
pub fn greedy_loop<F>(
    sigma_alpha: f64,
    w_hat: &[i64],
    spec: &SegmentSpec,
    mut next_logits: F,
) -> Result<GreedyDecode>
where
    F: FnMut(&[u8], &AttentionBias) -> Result<Vec<f64>>,
{
    let t_floor = sigma_alpha.floor().max(0.0) as usize;
    let cap = 15 * (t_floor + 1);
    let mut tokens: Vec<u8> = Vec::new();
    let mut spaces = 0usize;
    let mut fallbacks = 0usize;
    let mut truncated = false;
    loop {
        if tokens.len() >= cap {
            truncated = true;
            break;
        }
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&tokens);
        // Query row p's word index is the SPACE count among tokens[..p] —
        // the incremental counterpart of the teacher-forced construction.
        let mut w_rows = Vec::with_capacity(inputs.len());
        let mut run = 0i64;
        w_rows.push(run);
        for &t in tokens.iter().take(inputs.len() - 1) {
            if t == crate::alphabet::SPACE {
                run += 1;
            }
            w_rows.push(run);
        }
        let (bias, fb) = cross_bias_for(&w_rows, w_hat, spec);
        fallbacks += fb;
        let logits = next_logits(&inputs, &bias)?;
        if logits.len() != VOCAB {
            return Err(Error::Shape(format!(
                "greedy step returned {} logits, expected {VOCAB}",
                logits.len()
            )));
        }
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let tok = best as u8;
        if tok == crate::alphabet::SPACE {
            if spaces >= t_floor {
                break; // sentence-final boundary: stop without emitting
            }
            spaces += 1;
        }
        tokens.push(tok);
    }
    let text = crate::alphabet::decode(&tokens);
    Ok(GreedyDecode { text, tokens, truncated, sigma_alpha, empty_row_fallbacks: fallbacks })
}

impl TarisModel {
    /// Greedy autoregressive decoding of a full utterance. Encodes once,
    /// then re-runs the decoder per emitted token with an incrementally
    /// rebuilt validity mask.
    pub fn greedy_decode_offline(
        &self,
        audio: &DiffArray,
        video: Option<&DiffArray>,
    ) -> Result<GreedyDecode> {
        let mut tape = Tape::new();
        let (bound, memory, gate) = self.memory(&mut tape, audio, video)?;

        let sigma = gate.total();
        let w_hat = gate.segment_ids.clone();
        let spec = self.cfg.segments;
        let decoder = bound.decoder.clone();
        let stack = self.cfg.stack;
        greedy_loop(sigma, &w_hat, &spec, |inputs, cross_bias| {
            let l = inputs.len();
            let self_mask = causal_mask(l)?;
            let mut fwd = Fwd::inference(&mut tape);
            let out = decode(&mut fwd, inputs, memory, &self_mask, cross_bias, &decoder, &stack)?;
            let vals = tape.value(out.logits).values();
            Ok(vals[(l - 1) * VOCAB..l * VOCAB].to_vec())
        })
    }
}
