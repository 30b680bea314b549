//! Connectivity windows, word/segment indices, the decoder validity mask,
//! the audio-video window mapping, and boundary-crossing detection.
//!
//! Everything here is index math: masks are realized as additive pre-softmax
//! biases (0 allowed, −1e9 disallowed) so that every connectivity variant of
//! the model is just a mask choice. All indices are 0-based internally;
//! user-facing reports convert to 1-based frame numbers.

use std::fmt;
use std::str::FromStr;

use crate::alphabet::SPACE;
use crate::diff::{DiffArray, NodeId};
use crate::{Error, Result};

/// Additive bias value for disallowed attention positions.
pub const NEG_BIAS: f64 = -1e9;

/// A frame/segment count bound that may be unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Finite(usize),
    Infinite,
}

impl Extent {
    pub fn is_infinite(self) -> bool {
        matches!(self, Extent::Infinite)
    }

    /// The bound as a count, or `None` when unbounded.
    pub fn as_finite(self) -> Option<usize> {
        match self {
            Extent::Finite(n) => Some(n),
            Extent::Infinite => None,
        }
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Finite(n) => write!(f, "{n}"),
            Extent::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Extent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(Extent::Infinite);
        }
        t.parse::<usize>()
            .map(Extent::Finite)
            .map_err(|_| Error::Config(format!("expected a count or \"inf\", got {s:?}")))
    }
}

impl serde::Serialize for Extent {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Extent::Finite(n) => ser.serialize_u64(*n as u64),
            Extent::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> serde::Deserialize<'de> for Extent {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Extent;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a non-negative integer or the string \"inf\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Extent, E> {
                Ok(Extent::Finite(v as usize))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Extent, E> {
                if v < 0 {
                    return Err(E::custom("extent must be non-negative"));
                }
                Ok(Extent::Finite(v as usize))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Extent, E> {
                Extent::from_str(v).map_err(|e| E::custom(e.to_string()))
            }
        }
        de.deserialize_any(V)
    }
}

/// Encoder self-attention window: how many frames of past and future context
/// each position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConnectivitySpec {
    pub look_back: Extent,
    pub look_ahead: Extent,
}

impl ConnectivitySpec {
    pub fn new(look_back: Extent, look_ahead: Extent) -> Self {
        ConnectivitySpec { look_back, look_ahead }
    }

    /// Unrestricted self-attention.
    pub fn full() -> Self {
        ConnectivitySpec { look_back: Extent::Infinite, look_ahead: Extent::Infinite }
    }
}

/// Decoder cross-attention window measured in segments: how many segments of
/// look-back and look-ahead around each grapheme's word are attendable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SegmentSpec {
    pub look_back: Extent,
    pub look_ahead: Extent,
}

impl SegmentSpec {
    pub fn new(look_back: Extent, look_ahead: Extent) -> Self {
        SegmentSpec { look_back, look_ahead }
    }

    /// Unrestricted cross-attention (recovers the unwindowed model).
    pub fn full() -> Self {
        SegmentSpec { look_back: Extent::Infinite, look_ahead: Extent::Infinite }
    }
}

/// Per-frame gate values with their running sum and derived segment indices.
///
/// `segment_ids[i] = floor(cumsum[i])` counts how many word boundaries the
/// gate believes it has heard by frame i. With a sigmoid gate the ids are
/// non-negative and non-decreasing; a tanh gate can make them decrease, which
/// is permitted but uncharted.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub alpha: Vec<f64>,
    pub cumsum: Vec<f64>,
    pub segment_ids: Vec<i64>,
    /// Tape handle for the per-frame alpha column, when recorded.
    pub alpha_node: Option<NodeId>,
    /// Tape handle for the scalar Σα, when recorded.
    pub alpha_sum_node: Option<NodeId>,
}

impl GateTrace {
    /// Derives cumulative sums and segment indices from raw gate values.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        for (i, a) in alpha.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numerical(format!("gate value {a} at frame {i}")));
            }
        }
        let mut cumsum = Vec::with_capacity(alpha.len());
        let mut run = 0.0;
        for a in &alpha {
            run += a;
            cumsum.push(run);
        }
        let segment_ids = cumsum.iter().map(|c| c.floor() as i64).collect();
        Ok(GateTrace { alpha, cumsum, segment_ids, alpha_node: None, alpha_sum_node: None })
    }

    /// Total Σα over all frames (0 for an empty trace).
    pub fn total(&self) -> f64 {
        self.cumsum.last().copied().unwrap_or(0.0)
    }
}

/// An additive pre-softmax attention bias: 0 where attention is allowed,
/// [`NEG_BIAS`] where it is not. Shape is `[rows × cols]`, or
/// `[batch × rows × cols]` when stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    data: DiffArray,
}

impl AttentionBias {
    /// Builds a 2D bias from an allow-predicate over (row, col).
    pub fn from_predicate(rows: usize, cols: usize, allow: impl Fn(usize, usize) -> bool) -> Self {
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                v.push(if allow(r, c) { 0.0 } else { NEG_BIAS });
            }
        }
        AttentionBias { data: DiffArray::new(vec![rows, cols], v).expect("bias values are finite") }
    }

    /// All-allowed bias.
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttentionBias { data: DiffArray::zeros(vec![rows, cols]) }
    }

    /// Stacks same-shape 2D biases into one `[batch × rows × cols]` bias.
    pub fn stack(masks: &[AttentionBias]) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::Shape("stack: no masks given".into()));
        };
        let shape = first.data.shape().to_vec();
        let mut v = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if m.data.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "stack: mask shapes differ ({:?} vs {:?})",
                    m.data.shape(),
                    shape
                )));
            }
            v.extend_from_slice(m.data.values());
        }
        let full = vec![masks.len(), shape[0], shape[1]];
        Ok(AttentionBias { data: DiffArray::new(full, v).expect("bias values are finite") })
    }

    /// The underlying bias values, for feeding into softmax.
    pub fn values(&self) -> &DiffArray {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.rows_cols().0
    }

    pub fn cols(&self) -> usize {
        self.data.rows_cols().1
    }

    /// Whether attention from `row` to `col` is allowed (2D biases).
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        let (_, cols) = self.data.rows_cols();
        self.data.values()[row * cols + col] == 0.0
    }

    /// Marks every position of `row` allowed (the empty-row fallback).
    pub fn allow_entire_row(&mut self, row: usize) {
        let (_, cols) = self.data.rows_cols();
        for c in 0..cols {
            self.data.values_mut()[row * cols + c] = 0.0;
        }
    }

    /// Renders each query row as a string of '1' (allowed) / '0' characters.
    pub fn render_rows(&self) -> Vec<String> {
        let (rows, cols) = self.data.rows_cols();
        (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| if self.allowed(r, c) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// Encoder self-attention mask: position i may attend to k iff
/// `i − look_back ≤ k ≤ i + look_ahead`.
pub fn encoder_window_mask(n: usize, spec: &ConnectivitySpec) -> Result<AttentionBias> {
    if n == 0 {
        return Err(Error::Shape("encoder_window_mask: frame count must be ≥ 1".into()));
    }
    let lb = spec.look_back.as_finite();
    let la = spec.look_ahead.as_finite();
    Ok(AttentionBias::from_predicate(n, n, |i, k| {
        let back_ok = match lb {
            None => true,
            Some(b) => k + b >= i,
        };
        let ahead_ok = match la {
            None => true,
            Some(a) => k <= i + a,
        };
        back_ok && ahead_ok
    }))
}

/// Decoder self-attention mask: position i may attend to k iff k ≤ i.
pub fn causal_mask(l: usize) -> Result<AttentionBias> {
    if l == 0 {
        return Err(Error::Shape("causal_mask: token count must be ≥ 1".into()));
    }
    Ok(AttentionBias::from_predicate(l, l, |i, k| k <= i))
}

/// Per-grapheme word index: `w[k]` counts the SPACE tokens at positions ≤ k.
pub fn word_indices(labels: &[u8]) -> Vec<i64> {
    let mut out = Vec::with_capacity(labels.len());
    let mut count = 0i64;
    for &y in labels {
        if y == SPACE {
            count += 1;
        }
        out.push(count);
    }
    out
}

/// Per-frame segment index: floor of the running sum of gate values.
pub fn segment_indices(alpha: &[f64]) -> Vec<i64> {
    let mut out = Vec::with_capacity(alpha.len());
    let mut run = 0.0;
    for a in alpha {
        run += a;
        out.push(run.floor() as i64);
    }
    out
}

/// A validity mask plus the grapheme rows that came out with no allowed
/// frames. The consumer decides what to do with those rows; training patches
/// them to allow-all so the model stays differentiable.
#[derive(Debug, Clone)]
pub struct SegmentMask {
    pub bias: AttentionBias,
    pub empty_rows: Vec<usize>,
}

/// Decoder-encoder validity mask via tiling: grapheme row k may attend to
/// frame column i iff `w[k] − look_back ≤ ŵ[i] ≤ w[k] + look_ahead`.
///
/// Built exactly as the tiling construction describes: `w` is repeated across
/// columns and `ŵ` down rows, then the two tiles are compared elementwise.
pub fn segment_mask(w: &[i64], w_hat: &[i64], spec: &SegmentSpec) -> SegmentMask {
    let l = w.len();
    let n = w_hat.len();
    // Tile the per-grapheme word indices over columns...
    let mut w_tile = vec![0i64; l * n];
    for (k, &wk) in w.iter().enumerate() {
        for i in 0..n {
            w_tile[k * n + i] = wk;
        }
    }
    // ...and the per-frame segment indices over rows.
    let mut hat_tile = vec![0i64; l * n];
    for k in 0..l {
        hat_tile[k * n..(k + 1) * n].copy_from_slice(w_hat);
    }
    let lb = spec.look_back.as_finite().map(|b| b as i64);
    let la = spec.look_ahead.as_finite().map(|a| a as i64);
    let bias = AttentionBias::from_predicate(l, n, |k, i| {
        let wk = w_tile[k * n + i];
        let wh = hat_tile[k * n + i];
        let back_ok = match lb {
            None => true,
            Some(b) => wh >= wk - b,
        };
        let ahead_ok = match la {
            None => true,
            Some(a) => wh <= wk + a,
        };
        back_ok && ahead_ok
    });
    let empty_rows = (0..l)
        .filter(|&k| (0..n).all(|i| !bias.allowed(k, i)))
        .collect();
    SegmentMask { bias, empty_rows }
}

/// The video frame aligned with audio frame `i`: `j = ⌊(i+1)·M/N⌋ − 1`,
/// clamped to `[0, M−1]`.
pub fn aligned_video_frame(i: usize, n: usize, m: usize) -> Result<usize> {
    if n == 0 || m == 0 {
        return Err(Error::Shape(format!("aligned_video_frame: N={n}, M={m} must be ≥ 1")));
    }
    if i >= n {
        return Err(Error::Shape(format!("aligned_video_frame: frame {i} out of range for N={n}")));
    }
    let j = ((i + 1) * m) / n;
    let j = j.saturating_sub(1);
    Ok(j.min(m - 1))
}

/// The inclusive video index range `[j−B, j+B]` (clamped) that audio frame
/// `i` may integrate over.
pub fn av_window(i: usize, n: usize, m: usize, b: usize) -> Result<(usize, usize)> {
    let j = aligned_video_frame(i, n, m)?;
    let lo = j.saturating_sub(b);
    let hi = (j + b).min(m - 1);
    Ok((lo, hi))
}

/// Frames where the running gate sum passed an integer, and the frame-count
/// lengths between consecutive crossings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crossings {
    pub boundary_frames: Vec<usize>,
    pub segment_lengths: Vec<usize>,
}

/// Detects every frame where `floor(cumsum(alpha))` increases.
pub fn crossings(alpha: &[f64]) -> Crossings {
    let ids = segment_indices(alpha);
    let mut boundary_frames = Vec::new();
    let mut prev = 0i64;
    for (i, &id) in ids.iter().enumerate() {
        if id > prev {
            boundary_frames.push(i);
        }
        prev = id;
    }
    let segment_lengths = boundary_frames.windows(2).map(|w| w[1] - w[0]).collect();
    Crossings { boundary_frames, segment_lengths }
}
