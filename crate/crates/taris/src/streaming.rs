//! Incremental online inference: ingest frames as they arrive, commit
//! encoder outputs once their receptive fields are complete, decode words as
//! soon as the gate has counted enough boundaries, and account for latency.
//!
//! The engine's contract is *offline equivalence*: in final mode, the
//! streamed transcript and every committed encoder output are identical to
//! what the offline pass produces on the whole utterance. This works because
//! windowed attention gives each position a finite receptive field (a
//! position's output is final once `layers·look_ahead` future frames have
//! arrived) and because masked attention weights underflow to exactly zero,
//! so decoding against the committed prefix matches decoding against the
//! full sequence bit for bit.
//!
//! Multimodal streams additionally assume the corpus's fixed 2:1 audio:video
//! frame rate. Under that rate the audio→video alignment of a position
//! stabilizes one frame after it (the floor in the alignment formula can no
//! longer move), which is why the fused commit rule asks for one extra audio
//! frame of look-ahead.

use serde::{Deserialize, Serialize};

use crate::alphabet::{decode as decode_text, BOS, SPACE, VOCAB};
use crate::diff::{DiffArray, Tape};
use crate::mask::{causal_mask, AttentionBias, ConnectivitySpec, GateTrace};
use crate::model::{Modality, TarisModel};
use crate::transformer::{decode, Fwd};
use crate::{Error, Result};

/// The input-frame span that can affect a layer-`layer` output at position
/// `k` of an `n`-frame sequence: `[k − layer·look_back, k + layer·look_ahead]`
/// clamped to the sequence. Infinite extents clamp to the sequence ends.
pub fn receptive_field(
    layer: usize,
    spec: &ConnectivitySpec,
    k: usize,
    n: usize,
) -> Result<(usize, usize)> {
    if layer == 0 {
        return Err(Error::Config("receptive_field: layer must be ≥ 1".into()));
    }
    if n == 0 || k >= n {
        return Err(Error::Shape(format!(
            "receptive_field: position {k} out of range for {n} frames"
        )));
    }
    let first = match spec.look_back.as_finite() {
        None => 0,
        Some(b) => k.saturating_sub(layer * b),
    };
    let last = match spec.look_ahead.as_finite() {
        None => n - 1,
        Some(a) => (k + layer * a).min(n - 1),
    };
    Ok((first, last))
}

/// When words leave the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Words are emitted once their full segment look-ahead is committed and
    /// never change afterwards.
    Final,
    /// A provisional word appears at its own boundary crossing and is
    /// revised as each further look-ahead segment commits.
    Eager,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(DecodeMode::Final),
            "eager" => Ok(DecodeMode::Eager),
            other => Err(Error::Config(format!("unknown decode mode {other:?} (final|eager)"))),
        }
    }
}

/// One line of streaming output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// Last ingested audio frame when the event fired (0-based).
    pub frame_index: usize,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventPayload {
    /// The committed-prefix frontier advanced.
    Commit { committed_frames: usize, sigma_alpha: f64, boundaries: i64 },
    /// First appearance of a word.
    Emit { word: usize, text: String },
    /// A later version of an already-shown word (eager mode, or the settled
    /// form of a provisional word).
    Revise { word: usize, text: String, version: usize },
}

/// Latency bookkeeping for one word.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordLatency {
    pub word: usize,
    /// Frame where the gate's running sum crossed this word's boundary
    /// (none for the sentence-final word — the stream end is its boundary).
    pub crossing_frame: Option<usize>,
    /// Frame at the word's first emission.
    pub emit_frame: usize,
    pub delay_frames: i64,
    pub delay_ms: Option<f64>,
    /// Emission count including the first version.
    pub revisions: usize,
}

/// Per-word emission delays with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct LatencyReport {
    pub frame_ms: Option<f64>,
    pub words: Vec<WordLatency>,
}

impl LatencyReport {
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn mean_delay_frames(&self) -> f64 {
        if self.words.is_empty() {
            return 0.0;
        }
        self.words.iter().map(|w| w.delay_frames as f64).sum::<f64>() / self.words.len() as f64
    }

    pub fn mean_delay_ms(&self) -> Option<f64> {
        self.frame_ms.map(|ms| self.mean_delay_frames() * ms)
    }

    /// Nearest-rank percentile of the per-word frame delays (p in 0..=100).
    pub fn percentile_delay_frames(&self, p: f64) -> f64 {
        if self.words.is_empty() {
            return 0.0;
        }
        let mut d: Vec<i64> = self.words.iter().map(|w| w.delay_frames).collect();
        d.sort_unstable();
        let rank = ((p / 100.0) * d.len() as f64).ceil() as usize;
        d[rank.clamp(1, d.len()) - 1] as f64
    }
}

/// Everything `finalize` hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFinish {
    pub transcript: String,
    pub tokens: Vec<u8>,
    /// True when the decode length cap cut the transcript short.
    pub truncated: bool,
    /// Total gate mass over the whole stream.
    pub sigma_alpha: f64,
    pub report: LatencyReport,
    pub events: Vec<StreamEvent>,
}

#[derive(Debug, Clone, Default)]
struct WordRecord {
    crossing_frame: Option<usize>,
    emit_frame: Option<usize>,
    versions: usize,
}

/// State of one incremental decoding session. Single-owner: one stream per
/// state; independent streams can share the read-only model.
#[derive(Debug, Clone)]
pub struct StreamState {
    cfg: crate::model::ModelConfig,
    mode: Option<DecodeMode>,
    frame_ms: Option<f64>,
    // raw ingested frames
    audio: Vec<f64>,
    n_a: usize,
    video: Vec<f64>,
    n_v: usize,
    // committed prefix: fused (or audio) encoder outputs and gate values
    committed: usize,
    mem: Vec<f64>,
    alpha: Vec<f64>,
    cum: f64,
    seg_ids: Vec<i64>,
    /// crossing_frames[k] = frame where the running sum first reached k+1.
    crossing_frames: Vec<usize>,
    // emitted transcript
    tokens: Vec<u8>,
    spaces: usize,
    provisional: Vec<u8>,
    prov_version: Option<usize>,
    ledger: Vec<WordRecord>,
    truncated: bool,
    empty_row_fallbacks: usize,
    ended: bool,
}

impl StreamState {
    /// Fresh state for one utterance. Millisecond latency reporting uses a
    /// 30 ms frame step unless changed with [`StreamState::set_frame_ms`].
    pub fn new(cfg: &crate::model::ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(StreamState {
            cfg: cfg.clone(),
            mode: None,
            frame_ms: Some(30.0),
            audio: Vec::new(),
            n_a: 0,
            video: Vec::new(),
            n_v: 0,
            committed: 0,
            mem: Vec::new(),
            alpha: Vec::new(),
            cum: 0.0,
            seg_ids: Vec::new(),
            crossing_frames: Vec::new(),
            tokens: Vec::new(),
            spaces: 0,
            provisional: Vec::new(),
            prov_version: None,
            ledger: Vec::new(),
            truncated: false,
            empty_row_fallbacks: 0,
            ended: false,
        })
    }

    /// Frame duration used for millisecond latency numbers (None disables).
    pub fn set_frame_ms(&mut self, ms: Option<f64>) {
        self.frame_ms = ms;
    }

    pub fn frames_ingested(&self) -> (usize, usize) {
        (self.n_a, self.n_v)
    }

    /// Number of positions whose encoder output is committed.
    pub fn committed(&self) -> usize {
        self.committed
    }

    /// Gate mass over the committed prefix.
    pub fn sigma_alpha(&self) -> f64 {
        self.cum
    }

    /// Per-frame gate values over the committed prefix (all frames once
    /// the stream is finalized).
    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Word boundaries the committed gate mass accounts for: ⌊Σα⌋.
    pub fn boundaries(&self) -> i64 {
        self.cum.floor() as i64
    }

    /// The committed decoder-memory rows, `[committed × h]`.
    pub fn committed_memory(&self) -> DiffArray {
        DiffArray::new(vec![self.committed, self.cfg.stack.h], self.mem.clone())
            .expect("committed rows are finite")
    }

    /// Settled transcript so far (excludes any provisional word).
    pub fn transcript_so_far(&self) -> String {
        decode_text(&self.tokens)
    }

    /// Current provisional word, if eager decoding has one on display.
    pub fn provisional_text(&self) -> Option<String> {
        self.prov_version.map(|_| decode_text(&self.provisional))
    }

    /// How many validity-mask rows had to fall back to allow-all.
    pub fn empty_row_fallbacks(&self) -> usize {
        self.empty_row_fallbacks
    }

    fn lock_mode(&mut self, mode: DecodeMode) -> Result<()> {
        match self.mode {
            None => {
                self.mode = Some(mode);
                Ok(())
            }
            Some(m) if m == mode => Ok(()),
            Some(m) => Err(Error::Config(format!(
                "decode mode cannot change mid-stream (started {m:?}, asked {mode:?})"
            ))),
        }
    }

    /// Adds one audio frame and, optionally, an accompanying video frame,
    /// then commits every position whose receptive field is now complete.
    /// Returns at most one commit event.
    pub fn ingest(
        &mut self,
        model: &TarisModel,
        audio_frame: &[f64],
        video_frame: Option<&[f64]>,
    ) -> Result<Vec<StreamEvent>> {
        if self.ended {
            return Err(Error::Config("ingest: stream already finalized".into()));
        }
        if audio_frame.len() != self.cfg.d_a {
            return Err(Error::Shape(format!(
                "ingest: audio frame has {} features, expected {}",
                audio_frame.len(),
                self.cfg.d_a
            )));
        }
        for v in audio_frame {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("ingest: non-finite audio sample {v}")));
            }
        }
        self.audio.extend_from_slice(audio_frame);
        self.n_a += 1;
        if let Some(vf) = video_frame {
            // Audio-only models ignore the video stream, mirroring offline
            // evaluation of multimodal corpora.
            if self.cfg.modality == Modality::Av {
                self.push_video(vf)?;
            }
        }
        Ok(self.recommit(model)?.into_iter().collect())
    }

    /// Adds a video frame that arrived without an audio frame (a lagging
    /// video stream catching up).
    pub fn ingest_video(
        &mut self,
        model: &TarisModel,
        video_frame: &[f64],
    ) -> Result<Vec<StreamEvent>> {
        if self.ended {
            return Err(Error::Config("ingest: stream already finalized".into()));
        }
        if self.cfg.modality != Modality::Av {
            return Err(Error::Config("ingest_video: model is audio-only".into()));
        }
        self.push_video(video_frame)?;
        Ok(self.recommit(model)?.into_iter().collect())
    }

    fn push_video(&mut self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.cfg.d_v {
            return Err(Error::Shape(format!(
                "ingest: video frame has {} features, expected {}",
                frame.len(),
                self.cfg.d_v
            )));
        }
        for v in frame {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("ingest: non-finite video sample {v}")));
            }
        }
        self.video.extend_from_slice(frame);
        self.n_v += 1;
        Ok(())
    }

    /// The prefix lengths the commit math may rely on. Multimodal streams
    /// truncate to the longest prefix consistent with the 2:1 frame rate so
    /// alignment computed now equals alignment computed at stream end.
    fn used_lengths(&self) -> (usize, usize) {
        match self.cfg.modality {
            Modality::Audio => (self.n_a, 0),
            Modality::Av => {
                let na = self.n_a.min(2 * self.n_v);
                let nv = na.div_ceil(2);
                (na, nv)
            }
        }
    }

    /// Rate-based audio→video alignment under the fixed 2:1 ratio. Valid for
    /// every position except a stream's very last frame, which is aligned at
    /// finalize with the true lengths.
    fn rate_aligned_video(i: usize) -> usize {
        ((i + 1) / 2).saturating_sub(1)
    }

    /// How many leading positions have complete receptive fields right now.
    fn commit_target(&self) -> usize {
        let layers = self.cfg.stack.layers;
        match self.cfg.modality {
            Modality::Audio => match self.cfg.encoder.look_ahead.as_finite() {
                None => 0,
                Some(a) => self.n_a.saturating_sub(layers * a),
            },
            Modality::Av => {
                let (na, nv) = self.used_lengths();
                let (Some(ea), Some(ev)) = (
                    self.cfg.encoder.look_ahead.as_finite(),
                    self.cfg.video_encoder.look_ahead.as_finite(),
                ) else {
                    return 0;
                };
                let mut i = self.committed;
                loop {
                    // Full audio receptive field, plus one frame so the
                    // alignment floor is settled.
                    if na < (i + 1 + layers * ea).max(i + 2) {
                        break;
                    }
                    // Video outputs across the fusion window must themselves
                    // be committed.
                    let j = Self::rate_aligned_video(i);
                    if nv < j + self.cfg.window_b + 1 + layers * ev {
                        break;
                    }
                    i += 1;
                }
                i
            }
        }
    }

    /// Re-encodes the usable prefix and extends the committed state. In test
    /// builds every already-committed value is re-checked for stability.
    fn recommit(&mut self, model: &TarisModel) -> Result<Option<StreamEvent>> {
        let target = self.commit_target();
        let grow = target > self.committed;
        let recheck = cfg!(debug_assertions) && self.committed > 0;
        if !grow && !recheck {
            return Ok(None);
        }
        let (na, nv) = self.used_lengths();
        if na == 0 {
            return Ok(None);
        }
        let (vals, gate) = self.encode_prefix(model, na, nv)?;
        let h = self.cfg.stack.h;
        #[cfg(debug_assertions)]
        {
            for i in 0..self.committed {
                assert!(
                    self.mem[i * h..(i + 1) * h] == vals[i * h..(i + 1) * h]
                        && self.alpha[i] == gate.alpha[i],
                    "committed output changed at position {i}"
                );
            }
        }
        if !grow {
            return Ok(None);
        }
        self.absorb(&vals, &gate, target, h);
        Ok(Some(StreamEvent {
            frame_index: self.n_a - 1,
            payload: EventPayload::Commit {
                committed_frames: self.committed,
                sigma_alpha: self.cum,
                boundaries: self.boundaries(),
            },
        }))
    }

    /// One encoder-side pass over the first `na` audio (and `nv` video)
    /// frames, returning memory rows and the gate trace.
    fn encode_prefix(
        &self,
        model: &TarisModel,
        na: usize,
        nv: usize,
    ) -> Result<(Vec<f64>, GateTrace)> {
        let audio = DiffArray::new(vec![na, self.cfg.d_a], self.audio[..na * self.cfg.d_a].to_vec())?;
        let video = match self.cfg.modality {
            Modality::Av => Some(DiffArray::new(
                vec![nv, self.cfg.d_v],
                self.video[..nv * self.cfg.d_v].to_vec(),
            )?),
            Modality::Audio => None,
        };
        let mut tape = Tape::new();
        let (_, mem, gate) = model.memory(&mut tape, &audio, video.as_ref())?;
        Ok((tape.value(mem).values().to_vec(), gate))
    }

    /// Moves positions `committed..target` of a freshly encoded prefix into
    /// the committed state, recording boundary crossings as they pass.
    fn absorb(&mut self, vals: &[f64], gate: &GateTrace, target: usize, h: usize) {
        for i in self.committed..target {
            self.mem.extend_from_slice(&vals[i * h..(i + 1) * h]);
            self.alpha.push(gate.alpha[i]);
            self.seg_ids.push(gate.segment_ids[i]);
            while (self.crossing_frames.len() as i64) < gate.segment_ids[i] {
                self.crossing_frames.push(i);
            }
        }
        if target > 0 {
            self.cum = gate.cumsum[target - 1];
        }
        self.committed = target;
    }

    fn word_record(&mut self, k: usize) -> &mut WordRecord {
        while self.ledger.len() <= k {
            let idx = self.ledger.len();
            self.ledger.push(WordRecord {
                crossing_frame: self.crossing_frames.get(idx).copied(),
                ..WordRecord::default()
            });
        }
        // A record created before its crossing committed picks it up late.
        if self.ledger[k].crossing_frame.is_none() {
            self.ledger[k].crossing_frame = self.crossing_frames.get(k).copied();
        }
        &mut self.ledger[k]
    }

    /// Next-token logits for the settled tokens plus `extra`, decoded
    /// against the committed memory. `prov_la` caps the segment look-ahead
    /// of the current word's query rows (eager provisional decoding).
    fn next_token_logits(
        &mut self,
        model: &TarisModel,
        extra: &[u8],
        prov_la: Option<usize>,
    ) -> Result<Vec<f64>> {
        let n_c = self.committed;
        let h = self.cfg.stack.h;
        let mut inputs = Vec::with_capacity(self.tokens.len() + extra.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&self.tokens);
        inputs.extend_from_slice(extra);
        let l = inputs.len();

        // Word index of each query row: SPACE count among the tokens before
        // that position (the same incremental rule the offline greedy uses).
        let mut w_rows = Vec::with_capacity(l);
        let mut run = 0i64;
        w_rows.push(run);
        for &t in inputs.iter().skip(1) {
            if t == SPACE {
                run += 1;
            }
            w_rows.push(run);
        }

        let d_lb = self.cfg.segments.look_back.as_finite().map(|b| b as i64);
        let d_la = self.cfg.segments.look_ahead.as_finite().map(|a| a as i64);
        let cur = self.spaces as i64;
        let seg_ids = &self.seg_ids;
        let mut bias = AttentionBias::from_predicate(l, n_c, |p, f| {
            let w = w_rows[p];
            let id = seg_ids[f];
            let ahead = if prov_la.is_some() && w == cur {
                prov_la.map(|a| a as i64)
            } else {
                d_la
            };
            let back_ok = match d_lb {
                None => true,
                Some(b) => id >= w - b,
            };
            let ahead_ok = match ahead {
                None => true,
                Some(a) => id <= w + a,
            };
            back_ok && ahead_ok
        });
        for p in 0..l {
            if (0..n_c).all(|f| !bias.allowed(p, f)) {
                bias.allow_entire_row(p);
                self.empty_row_fallbacks += 1;
            }
        }

        let mem = DiffArray::new(vec![n_c, h], self.mem.clone())?;
        let mut tape = Tape::new();
        let mem_id = tape.leaf(mem);
        let bdec = model.decoder.bind(&mut tape);
        let self_mask = causal_mask(l)?;
        let mut fwd = Fwd::inference(&mut tape);
        let out = decode(&mut fwd, &inputs, mem_id, &self_mask, &bias, &bdec, &self.cfg.stack)?;
        let v = tape.value(out.logits).values();
        Ok(v[(l - 1) * VOCAB..l * VOCAB].to_vec())
    }

    /// Index of this word's first grapheme in the settled token stream.
    fn word_start(&self) -> usize {
        self.tokens
            .iter()
            .rposition(|&t| t == SPACE)
            .map(|p| p + 1)
            .unwrap_or(0)
    }

    /// Emits every word whose full segment look-ahead is committed. This is
    /// the only path that appends to the settled transcript before stream
    /// end, so settled words are identical across modes.
    fn decode_settled(&mut self, model: &TarisModel, events: &mut Vec<StreamEvent>) -> Result<()> {
        let Some(d_la) = self.cfg.segments.look_ahead.as_finite() else {
            return Ok(()); // unbounded look-ahead: nothing settles mid-stream
        };
        let t_c = self.boundaries();
        let cap = 15 * (t_c.max(0) as usize + 1);
        loop {
            let k = self.spaces;
            if t_c < (k + d_la + 1) as i64 {
                break;
            }
            // Decode word k to its boundary. Hitting the cap pauses (the cap
            // grows with the committed gate mass; finalize uses the true one).
            let completed = loop {
                if self.tokens.len() >= cap {
                    break false;
                }
                let logits = self.next_token_logits(model, &[], None)?;
                let tok = argmax(&logits);
                self.tokens.push(tok);
                if tok == SPACE {
                    self.spaces += 1;
                    break true;
                }
            };
            if !completed {
                break;
            }
            let text = decode_text(&self.tokens[self.word_start_of(k)..self.tokens.len() - 1]);
            let frame = self.n_a - 1;
            let rec = self.word_record(k);
            let first = rec.versions == 0;
            if rec.emit_frame.is_none() {
                rec.emit_frame = Some(frame);
            }
            let version = rec.versions;
            rec.versions += 1;
            events.push(StreamEvent {
                frame_index: frame,
                payload: if first {
                    EventPayload::Emit { word: k, text }
                } else {
                    EventPayload::Revise { word: k, text, version }
                },
            });
            self.provisional.clear();
            self.prov_version = None;
        }
        Ok(())
    }

    /// Start index of word `k`'s graphemes given that the settled stream
    /// currently ends with word `k`'s trailing SPACE.
    fn word_start_of(&self, k: usize) -> usize {
        debug_assert_eq!(self.spaces, k + 1);
        let before_last = &self.tokens[..self.tokens.len() - 1];
        before_last
            .iter()
            .rposition(|&t| t == SPACE)
            .map(|p| p + 1)
            .unwrap_or(0)
    }

    /// Decodes or revises the provisional word from the complete segments
    /// committed so far (eager mode).
    fn decode_provisional(
        &mut self,
        model: &TarisModel,
        events: &mut Vec<StreamEvent>,
    ) -> Result<()> {
        // A cap-paused partial word owns the settled tail; leave it alone.
        if self.tokens.last().is_some_and(|&t| t != SPACE) {
            return Ok(());
        }
        let k = self.spaces;
        let t_c = self.boundaries();
        let la_eff = t_c - k as i64 - 1;
        if la_eff < 0 {
            return Ok(()); // this word's own crossing has not committed yet
        }
        let la_eff = la_eff as usize;
        if self.prov_version == Some(la_eff) {
            return Ok(()); // no new look-ahead segment since the last version
        }
        let cap = 15 * (t_c.max(0) as usize + 1);
        let mut prov: Vec<u8> = Vec::new();
        loop {
            if self.tokens.len() + prov.len() >= cap {
                break;
            }
            let logits = self.next_token_logits(model, &prov, Some(la_eff))?;
            let tok = argmax(&logits);
            if tok == SPACE {
                break;
            }
            prov.push(tok);
        }
        let text = decode_text(&prov);
        let frame = self.n_a - 1;
        let rec = self.word_record(k);
        let first = rec.versions == 0;
        if rec.emit_frame.is_none() {
            rec.emit_frame = Some(frame);
        }
        let version = rec.versions;
        rec.versions += 1;
        events.push(StreamEvent {
            frame_index: frame,
            payload: if first {
                EventPayload::Emit { word: k, text }
            } else {
                EventPayload::Revise { word: k, text, version }
            },
        });
        self.provisional = prov;
        self.prov_version = Some(la_eff);
        Ok(())
    }

    /// Decodes whatever the committed prefix supports. Final mode emits only
    /// settled words; eager mode additionally shows a provisional word.
    pub fn try_decode(&mut self, model: &TarisModel, mode: DecodeMode) -> Result<Vec<StreamEvent>> {
        if self.ended {
            return Err(Error::Config("try_decode: stream already finalized".into()));
        }
        self.lock_mode(mode)?;
        let mut events = Vec::new();
        self.decode_settled(model, &mut events)?;
        if mode == DecodeMode::Eager {
            self.decode_provisional(model, &mut events)?;
        }
        Ok(events)
    }

    /// Ends the stream: commits everything (the stream end acts as infinite
    /// look-ahead), decodes the remaining words, and closes the books.
    pub fn finalize(&mut self, model: &TarisModel, mode: DecodeMode) -> Result<StreamFinish> {
        if self.ended {
            return Err(Error::Config("finalize: stream already finalized".into()));
        }
        self.lock_mode(mode)?;
        self.ended = true;
        let mut events = Vec::new();

        if self.n_a > 0 {
            // Full-stream encode with the true lengths.
            let (vals, gate) = self.encode_prefix(model, self.n_a, self.n_v)?;
            let h = self.cfg.stack.h;
            #[cfg(debug_assertions)]
            {
                for i in 0..self.committed {
                    assert!(
                        self.mem[i * h..(i + 1) * h] == vals[i * h..(i + 1) * h]
                            && self.alpha[i] == gate.alpha[i],
                        "committed output changed at finalize, position {i}"
                    );
                }
            }
            if self.n_a > self.committed {
                self.absorb(&vals, &gate, self.n_a, h);
                events.push(StreamEvent {
                    frame_index: self.n_a - 1,
                    payload: EventPayload::Commit {
                        committed_frames: self.committed,
                        sigma_alpha: self.cum,
                        boundaries: self.boundaries(),
                    },
                });
            }

            // The provisional word, if any, is superseded by its settled form.
            self.provisional.clear();
            self.prov_version = None;

            let t_total = self.boundaries().max(0) as usize;
            let cap = 15 * (t_total + 1);
            let frame = self.n_a - 1;
            loop {
                if self.tokens.len() >= cap {
                    self.truncated = true;
                    break;
                }
                let logits = self.next_token_logits(model, &[], None)?;
                let tok = argmax(&logits);
                if tok == SPACE {
                    if self.spaces >= t_total {
                        break; // sentence-final boundary: stop without emitting
                    }
                    self.tokens.push(SPACE);
                    self.spaces += 1;
                    let k = self.spaces - 1;
                    let text = decode_text(&self.tokens[self.word_start_of(k)..self.tokens.len() - 1]);
                    let rec = self.word_record(k);
                    let first = rec.versions == 0;
                    if rec.emit_frame.is_none() {
                        rec.emit_frame = Some(frame);
                    }
                    let version = rec.versions;
                    rec.versions += 1;
                    events.push(StreamEvent {
                        frame_index: frame,
                        payload: if first {
                            EventPayload::Emit { word: k, text }
                        } else {
                            EventPayload::Revise { word: k, text, version }
                        },
                    });
                } else {
                    self.tokens.push(tok);
                }
            }
            // Trailing graphemes form the sentence-final word.
            let tail = self.word_start();
            if tail < self.tokens.len() {
                let k = self.spaces;
                let text = decode_text(&self.tokens[tail..]);
                let rec = self.word_record(k);
                let first = rec.versions == 0;
                if rec.emit_frame.is_none() {
                    rec.emit_frame = Some(frame);
                }
                let version = rec.versions;
                rec.versions += 1;
                events.push(StreamEvent {
                    frame_index: frame,
                    payload: if first {
                        EventPayload::Emit { word: k, text }
                    } else {
                        EventPayload::Revise { word: k, text, version }
                    },
                });
            }
        }

        Ok(StreamFinish {
            transcript: decode_text(&self.tokens),
            tokens: self.tokens.clone(),
            truncated: self.truncated,
            sigma_alpha: self.cum,
            report: self.report(),
            events,
        })
    }

    fn report(&self) -> LatencyReport {
        let last_frame = self.n_a.saturating_sub(1);
        let words = self
            .ledger
            .iter()
            .enumerate()
            .filter(|(_, r)| r.emit_frame.is_some())
            .map(|(word, r)| {
                let emit = r.emit_frame.unwrap_or(last_frame);
                // A word with no boundary crossing is bounded by the stream
                // end itself.
                let origin = r.crossing_frame.unwrap_or(emit);
                let delay = emit as i64 - origin as i64;
                WordLatency {
                    word,
                    crossing_frame: r.crossing_frame,
                    emit_frame: emit,
                    delay_frames: delay,
                    delay_ms: self.frame_ms.map(|ms| delay as f64 * ms),
                    revisions: r.versions,
                }
            })
            .collect();
        LatencyReport { frame_ms: self.frame_ms, words }
    }
}

fn argmax(logits: &[f64]) -> u8 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Extent, SegmentSpec};
    use crate::model::{Fusion, GateActivation, ModelConfig};
    use crate::transformer::StackConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(
        modality: Modality,
        e_la: usize,
        d_la: usize,
        layers: usize,
        window_b: usize,
    ) -> ModelConfig {
        ModelConfig {
            modality,
            fusion: Fusion::Add,
            gate: GateActivation::Sigmoid,
            lambda: 0.01,
            window_b,
            encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(e_la)),
            video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(e_la)),
            segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(d_la)),
            stack: StackConfig::new(layers, 8, 8, 0.1),
            d_a: 4,
            d_v: 3,
        }
    }

    fn rand_arr(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffArray {
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DiffArray::new(vec![rows, cols], v).unwrap()
    }

    /// Streams an utterance with the 2:1 interleave (video frame j rides
    /// with audio frame 2j), calling try_decode after every ingest.
    fn stream_all(
        model: &TarisModel,
        audio: &DiffArray,
        video: Option<&DiffArray>,
        mode: DecodeMode,
    ) -> (StreamFinish, Vec<String>, Vec<StreamEvent>) {
        let mut st = StreamState::new(&model.cfg).unwrap();
        let d_a = model.cfg.d_a;
        let d_v = model.cfg.d_v;
        let n = audio.shape()[0];
        let m = video.map_or(0, |v| v.shape()[0]);
        let mut snapshots = Vec::new();
        let mut mid_events = Vec::new();
        for i in 0..n {
            let arow = &audio.values()[i * d_a..(i + 1) * d_a];
            let vrow = video.and_then(|v| {
                (i % 2 == 0 && i / 2 < m).then(|| &v.values()[(i / 2) * d_v..(i / 2 + 1) * d_v])
            });
            mid_events.extend(st.ingest(model, arow, vrow).unwrap());
            mid_events.extend(st.try_decode(model, mode).unwrap());
            snapshots.push(st.transcript_so_far());
        }
        let fin = st.finalize(model, mode).unwrap();
        (fin, snapshots, mid_events)
    }

    #[test]
    fn receptive_field_arithmetic() {
        let spec = ConnectivitySpec::new(Extent::Infinite, Extent::Finite(11));
        assert_eq!(receptive_field(6, &spec, 0, 100).unwrap(), (0, 66));
        // Fully causal: the field never extends past the position itself.
        let causal = ConnectivitySpec::new(Extent::Infinite, Extent::Finite(0));
        assert_eq!(receptive_field(3, &causal, 7, 20).unwrap(), (0, 7));
        // Finite look-back, clamped at both ends.
        let spec2 = ConnectivitySpec::new(Extent::Finite(2), Extent::Finite(3));
        assert_eq!(receptive_field(2, &spec2, 5, 8).unwrap(), (1, 7));
        let inf = ConnectivitySpec::full();
        assert_eq!(receptive_field(1, &inf, 3, 9).unwrap(), (0, 8));
        assert!(receptive_field(0, &spec, 0, 10).is_err());
        assert!(receptive_field(1, &spec, 10, 10).is_err());
    }

    #[test]
    fn receptive_field_matches_perturbation() {
        // Perturb one input frame; exactly the positions whose receptive
        // field covers it may change.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (layers, e_lb, e_la) in [(1, 1, 1), (2, 2, 1), (2, 0, 2)] {
            let mut cfg = cfg_with(Modality::Audio, e_la, 0, layers, 0);
            cfg.encoder = ConnectivitySpec::new(Extent::Finite(e_lb), Extent::Finite(e_la));
            let model = TarisModel::init(cfg.clone(), 7).unwrap();
            let n = 10;
            let audio = rand_arr(&mut rng, n, 4);
            let base = {
                let mut tape = Tape::new();
                let (_, mem, _) = model.memory(&mut tape, &audio, None).unwrap();
                tape.value(mem).values().to_vec()
            };
            let f = 4;
            let mut bumped = audio.clone();
            bumped.values_mut()[f * 4] += 1.0;
            let out = {
                let mut tape = Tape::new();
                let (_, mem, _) = model.memory(&mut tape, &bumped, None).unwrap();
                tape.value(mem).values().to_vec()
            };
            for k in 0..n {
                let (first, last) = receptive_field(layers, &cfg.encoder, k, n).unwrap();
                let covers = first <= f && f <= last;
                let changed = base[k * 8..(k + 1) * 8] != out[k * 8..(k + 1) * 8];
                if !covers {
                    assert!(!changed, "position {k} outside field changed (layers {layers})");
                } else if k == f {
                    assert!(changed, "perturbed position must change");
                }
            }
        }
    }

    #[test]
    fn no_lookahead_commits_every_frame_on_arrival() {
        let cfg = cfg_with(Modality::Audio, 0, 0, 1, 0);
        let model = TarisModel::init(cfg.clone(), 2).unwrap();
        let mut st = StreamState::new(&cfg).unwrap();
        assert_eq!(st.committed(), 0);
        assert_eq!(st.sigma_alpha(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 1..=6usize {
            let frame: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ev = st.ingest(&model, &frame, None).unwrap();
            assert_eq!(st.committed(), i, "frame {i} should commit immediately");
            assert_eq!(ev.len(), 1);
            assert!(matches!(ev[0].payload, EventPayload::Commit { committed_frames, .. } if committed_frames == i));
        }
    }

    #[test]
    fn committed_outputs_equal_offline_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (layers, e_la) in [(1, 1), (2, 2)] {
            let cfg = cfg_with(Modality::Audio, e_la, 0, layers, 0);
            let model = TarisModel::init(cfg.clone(), 5).unwrap();
            let n = 12;
            let audio = rand_arr(&mut rng, n, 4);
            let mut st = StreamState::new(&cfg).unwrap();
            for i in 0..n {
                st.ingest(&model, &audio.values()[i * 4..(i + 1) * 4], None).unwrap();
                assert_eq!(st.committed(), i.saturating_sub(layers * e_la - 1));
            }
            let _ = st.finalize(&model, DecodeMode::Final).unwrap();
            assert_eq!(st.committed(), n);
            let offline = {
                let mut tape = Tape::new();
                let (_, mem, _) = model.memory(&mut tape, &audio, None).unwrap();
                tape.value(mem).values().to_vec()
            };
            let streamed = st.committed_memory();
            for (a, b) in streamed.values().iter().zip(&offline) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn lagging_video_stalls_commitment_without_error() {
        let cfg = cfg_with(Modality::Av, 0, 0, 1, 0);
        let model = TarisModel::init(cfg.clone(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let audio = rand_arr(&mut rng, n, 4);
        let video = rand_arr(&mut rng, 4, 3);
        let mut st = StreamState::new(&cfg).unwrap();
        // All audio first, no video: nothing can fuse, nothing commits.
        for i in 0..n {
            st.ingest(&model, &audio.values()[i * 4..(i + 1) * 4], None).unwrap();
        }
        assert_eq!(st.committed(), 0);
        // Video catches up; commitment resumes.
        for j in 0..4 {
            st.ingest_video(&model, &video.values()[j * 3..(j + 1) * 3]).unwrap();
        }
        assert!(st.committed() > 0);
        let fin = st.finalize(&model, DecodeMode::Final).unwrap();
        let offline = model.greedy_decode_offline(&audio, Some(&video)).unwrap();
        assert_eq!(fin.transcript, offline.text);
    }

    #[test]
    fn streamed_final_transcripts_equal_offline_sweep() {
        // The module's central oracle: for random models, inputs, and mask
        // settings, streaming in final mode reproduces the offline result —
        // transcripts exactly, committed outputs within 1e-9.
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for iter in 0..100 {
            let av = iter % 2 == 1;
            let layers = if iter % 5 == 0 { 2 } else { 1 };
            let e_la = rng.gen_range(0..=2);
            let d_la = rng.gen_range(0..=2);
            let b = rng.gen_range(0..=2);
            let mut cfg = cfg_with(
                if av { Modality::Av } else { Modality::Audio },
                e_la,
                d_la,
                layers,
                b,
            );
            cfg.stack = StackConfig::new(layers, 4, 4, 0.1);
            if iter % 3 == 0 {
                cfg.fusion = Fusion::Concat;
            }
            let mut model = TarisModel::init(cfg.clone(), 1000 + iter).unwrap();
            if iter % 5 != 2 {
                // Bias toward short words so most runs terminate naturally;
                // the rest exercise the truncation path.
                model.decoder.out_b.values_mut()[SPACE as usize] += 3.0;
            }
            let n: usize = rng.gen_range(2..=14);
            let m = n.div_ceil(2);
            let audio = rand_arr(&mut rng, n, 4);
            let video = av.then(|| rand_arr(&mut rng, m, 3));

            let offline = model.greedy_decode_offline(&audio, video.as_ref()).unwrap();
            let (fin, snapshots, _) =
                stream_all(&model, &audio, video.as_ref(), DecodeMode::Final);
            assert_eq!(fin.transcript, offline.text, "iter {iter}");
            assert_eq!(fin.truncated, offline.truncated, "iter {iter}");
            assert!((fin.sigma_alpha - offline.sigma_alpha).abs() < 1e-12);
            // Prefix stability: the settled transcript only ever grows.
            for w in snapshots.windows(2) {
                assert!(w[1].starts_with(w[0].as_str()), "iter {iter}: settled text changed");
            }
            assert!(fin.transcript.starts_with(snapshots.last().unwrap().as_str()));
        }
    }

    #[test]
    fn eager_mode_matches_offline_and_bounds_revisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for iter in 0..25 {
            let av = iter % 2 == 0;
            let d_la = rng.gen_range(0..=2);
            let cfg = cfg_with(
                if av { Modality::Av } else { Modality::Audio },
                rng.gen_range(0..=1),
                d_la,
                1,
                1,
            );
            let mut model = TarisModel::init(cfg.clone(), 2000 + iter).unwrap();
            model.decoder.out_b.values_mut()[SPACE as usize] += 3.0;
            let n: usize = rng.gen_range(2..=12);
            let m = n.div_ceil(2);
            let audio = rand_arr(&mut rng, n, 4);
            let video = av.then(|| rand_arr(&mut rng, m, 3));

            let offline = model.greedy_decode_offline(&audio, video.as_ref()).unwrap();
            let (fin, snapshots, _) = stream_all(&model, &audio, video.as_ref(), DecodeMode::Eager);
            assert_eq!(fin.transcript, offline.text, "iter {iter}");
            for w in snapshots.windows(2) {
                assert!(w[1].starts_with(w[0].as_str()), "iter {iter}: settled text changed");
            }
            for wl in &fin.report.words {
                assert!(
                    wl.revisions <= d_la + 1,
                    "iter {iter}: word {} had {} versions (d_LA={d_la})",
                    wl.word,
                    wl.revisions
                );
                assert!(wl.delay_frames >= 0);
            }
        }
    }

    /// A model rigged for exact hand-tracing: α = 1/2 on every frame (zeroed
    /// gate) and a decoder that always emits SPACE (every word is empty).
    fn rigged_model(d_la: usize) -> TarisModel {
        let cfg = cfg_with(Modality::Audio, 0, d_la, 1, 0);
        let mut model = TarisModel::init(cfg, 42).unwrap();
        model.gate_w = DiffArray::zeros(vec![8, 1]);
        model.gate_b = DiffArray::zeros(vec![1]);
        model.decoder.out_b.values_mut()[SPACE as usize] = 1000.0;
        model
    }

    #[test]
    fn zero_lookahead_word_emits_at_first_crossing() {
        // α = 1/2: boundary k crosses at frame 2k+1. With no segment
        // look-ahead the word decodes the moment its crossing commits.
        let model = rigged_model(0);
        let mut st = StreamState::new(&model.cfg).unwrap();
        let frame = [0.25, -0.5, 0.75, -0.25];
        let mut emitted_at = Vec::new();
        for i in 0..8 {
            st.ingest(&model, &frame, None).unwrap();
            for e in st.try_decode(&model, DecodeMode::Final).unwrap() {
                if matches!(e.payload, EventPayload::Emit { .. }) {
                    emitted_at.push((e.frame_index, i));
                }
            }
        }
        assert_eq!(
            emitted_at.iter().map(|&(f, _)| f).collect::<Vec<_>>(),
            vec![1, 3, 5, 7],
            "word k emits exactly when floor(Σα) reaches k+1"
        );
        let fin = st.finalize(&model, DecodeMode::Final).unwrap();
        for wl in &fin.report.words {
            assert_eq!(wl.delay_frames, 0);
        }
    }

    #[test]
    fn latency_ledger_matches_hand_trace() {
        // α = 1/2, d_LA = 1, 10 frames, SPACE-only decoder. Boundary k
        // crosses at frame 2k+1; word k emits when boundary k+2 commits, at
        // frame 2k+3 — a 2-frame (60 ms) delay. Words 0..3 emit mid-stream;
        // word 4 completes at finalize (frame 9) right on its crossing.
        let model = rigged_model(1);
        let mut st = StreamState::new(&model.cfg).unwrap();
        let frame = [0.1, 0.2, -0.3, 0.4];
        for _ in 0..10 {
            st.ingest(&model, &frame, None).unwrap();
            st.try_decode(&model, DecodeMode::Final).unwrap();
        }
        let fin = st.finalize(&model, DecodeMode::Final).unwrap();
        assert_eq!(fin.sigma_alpha, 5.0);
        let delays: Vec<i64> = fin.report.words.iter().map(|w| w.delay_frames).collect();
        assert_eq!(delays, vec![2, 2, 2, 2, 0]);
        assert!((fin.report.mean_delay_frames() - 1.6).abs() < 1e-12);
        assert_eq!(fin.report.words[0].delay_ms, Some(60.0));
        // Latency lower bound: no word before its (d_LA+1)-th-next crossing.
        for wl in &fin.report.words {
            let gate_frame = 2 * wl.word + 3; // boundary k+2 crossing
            if wl.crossing_frame.is_some() && gate_frame < 10 {
                assert!(wl.emit_frame >= gate_frame, "word {} too early", wl.word);
            }
        }
    }

    #[test]
    fn eager_rigged_versions_follow_crossings() {
        // d_LA = 1: each word shows up provisionally at its own crossing and
        // settles one crossing later — exactly two versions.
        let model = rigged_model(1);
        let mut st = StreamState::new(&model.cfg).unwrap();
        let frame = [0.3, -0.1, 0.2, 0.5];
        let mut log = Vec::new();
        for _ in 0..8 {
            st.ingest(&model, &frame, None).unwrap();
            for e in st.try_decode(&model, DecodeMode::Eager).unwrap() {
                match e.payload {
                    EventPayload::Emit { word, .. } => log.push((e.frame_index, word, 0)),
                    EventPayload::Revise { word, version, .. } => {
                        log.push((e.frame_index, word, version))
                    }
                    EventPayload::Commit { .. } => {}
                }
            }
        }
        assert_eq!(
            log,
            vec![(1, 0, 0), (3, 0, 1), (3, 1, 0), (5, 1, 1), (5, 2, 0), (7, 2, 1), (7, 3, 0)]
        );
        let fin = st.finalize(&model, DecodeMode::Eager).unwrap();
        for wl in &fin.report.words {
            assert!(wl.revisions <= 2);
        }
        assert_eq!(fin.sigma_alpha, 4.0);
    }

    #[test]
    fn single_word_emits_only_at_finalize() {
        // A gate pinned near zero never crosses a boundary, so with any
        // look-ahead requirement the lone word waits for the stream end.
        let cfg = cfg_with(Modality::Audio, 0, 1, 1, 0);
        let mut model = TarisModel::init(cfg.clone(), 9).unwrap();
        model.gate_w = DiffArray::zeros(vec![8, 1]);
        model.gate_b = DiffArray::new(vec![1], vec![-30.0]).unwrap();
        model.decoder.out_b.values_mut()[0] = 1000.0; // always the letter 'a'
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let audio = rand_arr(&mut rng, 6, 4);
        let (fin, _, mid_events) = stream_all(&model, &audio, None, DecodeMode::Final);
        assert!(
            mid_events
                .iter()
                .all(|e| matches!(e.payload, EventPayload::Commit { .. })),
            "no word may emit before finalize"
        );
        let offline = model.greedy_decode_offline(&audio, None).unwrap();
        assert_eq!(fin.transcript, offline.text);
        assert!(fin.truncated && offline.truncated, "the letter loop hits the length cap");
        assert_eq!(fin.transcript, "a".repeat(15));
        assert!(fin
            .events
            .iter()
            .any(|e| matches!(e.payload, EventPayload::Emit { word: 0, .. })));
    }

    #[test]
    fn empty_stream_finalizes_empty() {
        let cfg = cfg_with(Modality::Audio, 1, 1, 1, 0);
        let model = TarisModel::init(cfg.clone(), 11).unwrap();
        let mut st = StreamState::new(&cfg).unwrap();
        let fin = st.finalize(&model, DecodeMode::Final).unwrap();
        assert_eq!(fin.transcript, "");
        assert!(fin.report.is_empty());
        assert!(fin.events.is_empty());
        assert_eq!(fin.report.mean_delay_frames(), 0.0);
    }

    #[test]
    fn mode_is_locked_and_state_guards_hold() {
        let cfg = cfg_with(Modality::Audio, 0, 0, 1, 0);
        let model = TarisModel::init(cfg.clone(), 12).unwrap();
        let mut st = StreamState::new(&cfg).unwrap();
        st.ingest(&model, &[0.1, 0.2, 0.3, 0.4], None).unwrap();
        st.try_decode(&model, DecodeMode::Final).unwrap();
        assert!(matches!(
            st.try_decode(&model, DecodeMode::Eager),
            Err(Error::Config(_))
        ));
        // Wrong frame widths are shape errors.
        assert!(matches!(st.ingest(&model, &[0.1], None), Err(Error::Shape(_))));
        assert!(matches!(st.ingest_video(&model, &[0.1, 0.2, 0.3]), Err(Error::Config(_))));
        let _ = st.finalize(&model, DecodeMode::Final).unwrap();
        assert!(st.ingest(&model, &[0.1, 0.2, 0.3, 0.4], None).is_err());
        assert!(st.try_decode(&model, DecodeMode::Final).is_err());
        assert!(st.finalize(&model, DecodeMode::Final).is_err());
    }

    #[test]
    fn stream_events_serialize_as_tagged_lines() {
        let e = StreamEvent {
            frame_index: 7,
            payload: EventPayload::Emit { word: 2, text: "hello".into() },
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(line, r#"{"frame_index":7,"event":"emit","word":2,"text":"hello"}"#);
        let back: StreamEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
    }
}
