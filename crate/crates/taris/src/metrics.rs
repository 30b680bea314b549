//! Evaluation metrics: character error rate, word-count error, and the
//! segment-length histogram that compares gate-derived segments against
//! ground-truth word lengths.
//!
//! Corpus-level CER pools edit counts — total edits over total reference
//! length — rather than averaging per-sentence rates, so short sentences
//! aren't overweighted. Word-count error compares the gate's total mass Σα
//! against the transcript's SPACE count, i.e. the quantity the word loss
//! trains; MSE over a split therefore equals the mean per-sentence word
//! loss.

use serde::{Deserialize, Serialize};

use crate::mask::crossings;
use crate::synth::WordSpan;
use crate::{Error, Result};

/// Unit-cost Levenshtein distance (substitution/insertion/deletion) between
/// two grapheme sequences, via the classic two-row dynamic program.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of one hypothesis against one reference: edit
/// distance divided by reference length. The reference must be non-empty.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Config("cer: reference transcript is empty".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Pools edit counts across sentences: corpus CER = Σ edits / Σ reference
/// length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CerAccumulator {
    edits: usize,
    ref_len: usize,
    sentences: usize,
}

impl CerAccumulator {
    pub fn add(&mut self, hypothesis: &str, reference: &str) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::Config("cer: reference transcript is empty".into()));
        }
        let h: Vec<char> = hypothesis.chars().collect();
        let r: Vec<char> = reference.chars().collect();
        self.edits += edit_distance(&h, &r);
        self.ref_len += r.len();
        self.sentences += 1;
        Ok(())
    }

    pub fn value(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        self.edits as f64 / self.ref_len as f64
    }

    pub fn sentences(&self) -> usize {
        self.sentences
    }
}

/// Accumulates |Σα − SPACE count| and its square over sentences. The mean
/// square equals the split's average word loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordCountAccumulator {
    abs: f64,
    sq: f64,
    n: usize,
}

impl WordCountAccumulator {
    pub fn add(&mut self, sigma_alpha: f64, space_count: usize) {
        let diff = sigma_alpha - space_count as f64;
        self.abs += diff.abs();
        self.sq += diff * diff;
        self.n += 1;
    }

    pub fn mae(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.abs / self.n as f64
        }
    }

    pub fn mse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sq / self.n as f64
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

/// A duration histogram with one bin per frame: bin `i` covers durations of
/// exactly `i` frames, i.e. `[i·frame_ms, (i+1)·frame_ms)` milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub frame_ms: f64,
    /// Left bin edges in milliseconds (`i·frame_ms`).
    pub edges_ms: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub mean_frames: f64,
    pub mean_ms: f64,
}

impl Histogram {
    fn from_durations(frames: &[usize], frame_ms: f64) -> Result<Self> {
        if !(frame_ms > 0.0) {
            return Err(Error::Config(format!("frame duration {frame_ms} ms must be > 0")));
        }
        let max = frames.iter().copied().max().unwrap_or(0);
        let bins = if frames.is_empty() { 0 } else { max + 1 };
        let mut counts = vec![0usize; bins];
        for &g in frames {
            counts[g] += 1;
        }
        let total = frames.len();
        let mean_frames = if total == 0 {
            0.0
        } else {
            frames.iter().sum::<usize>() as f64 / total as f64
        };
        Ok(Histogram {
            frame_ms,
            edges_ms: (0..bins).map(|i| i as f64 * frame_ms).collect(),
            counts,
            total,
            mean_frames,
            mean_ms: mean_frames * frame_ms,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Plot-ready CSV: one `left_edge_ms,count` line per bin, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("left_edge_ms,count\n");
        for (e, c) in self.edges_ms.iter().zip(&self.counts) {
            out.push_str(&format!("{e},{c}\n"));
        }
        out
    }
}

/// Histogram of gate-derived segment lengths: per sentence, the differences
/// between consecutive boundary-crossing frames of `floor(cumsum(α))`. A
/// sentence with c crossings contributes c−1 gaps, so the histogram total
/// is Σ max(c−1, 0).
pub fn segment_histogram(alphas: &[Vec<f64>], frame_ms: f64) -> Result<Histogram> {
    let mut gaps: Vec<usize> = Vec::new();
    for alpha in alphas {
        gaps.extend(crossings(alpha).segment_lengths);
    }
    Histogram::from_durations(&gaps, frame_ms)
}

/// Reference histogram of ground-truth word lengths (frames per word span);
/// the total equals the word count.
pub fn word_length_histogram(spans: &[Vec<WordSpan>], frame_ms: f64) -> Result<Histogram> {
    let lengths: Vec<usize> =
        spans.iter().flatten().map(|s| s.end - s.start).collect();
    Histogram::from_durations(&lengths, frame_ms)
}

/// One evaluation pass's results. Latency fields are present for streaming
/// modes only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub cer: f64,
    pub word_count_mae: f64,
    pub word_count_mse: f64,
    pub segment_histogram: Histogram,
    pub word_histogram: Histogram,
    pub mean_latency_ms: Option<f64>,
    pub p90_latency_ms: Option<f64>,
    pub mean_revisions: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn edit_distance_hand_cases() {
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars(""), &chars("abc")), 3);
        assert_eq!(edit_distance(&chars("abc"), &chars("")), 3);
        assert_eq!(edit_distance(&chars("flaw"), &chars("lawn")), 2);
        assert_eq!(edit_distance(&chars("same"), &chars("same")), 0);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abc", "abd").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("", "ab").unwrap(), 1.0);
        assert!(cer("anything", "").is_err());
    }

    #[test]
    fn edit_distance_is_a_metric() {
        // Identity, symmetry, and the triangle inequality on random triples.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let alphabet = ['a', 'b', 'c', ' ', '\''];
        let word = |rng: &mut ChaCha8Rng| -> Vec<char> {
            let len = rng.gen_range(0..12);
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        for _ in 0..1000 {
            let a = word(&mut rng);
            let b = word(&mut rng);
            let c = word(&mut rng);
            let ab = edit_distance(&a, &b);
            let bc = edit_distance(&b, &c);
            let ac = edit_distance(&a, &c);
            assert_eq!(edit_distance(&a, &a), 0);
            assert_eq!(ab, edit_distance(&b, &a));
            assert!(ac <= ab + bc, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn corpus_cer_pools_edits_not_rates() {
        let mut acc = CerAccumulator::default();
        acc.add("abc", "abc").unwrap(); // 0 edits / 3
        acc.add("", "ab").unwrap(); // 2 edits / 2
        // Pooled: 2/5, not the mean of per-sentence rates (0.5).
        assert!((acc.value() - 0.4).abs() < 1e-15);
        assert_eq!(acc.sentences(), 2);
    }

    #[test]
    fn word_count_errors() {
        let mut acc = WordCountAccumulator::default();
        acc.add(2.5, 2);
        acc.add(3.0, 4);
        assert!((acc.mae() - 0.75).abs() < 1e-15);
        assert!((acc.mse() - 0.625).abs() < 1e-15);
        assert_eq!(acc.count(), 2);
        assert_eq!(WordCountAccumulator::default().mae(), 0.0);
    }

    #[test]
    fn constant_alpha_sentence_yields_one_gap() {
        // cumsum of [0.6; 4] = 0.6, 1.2, 1.8, 2.4: crossings at frames 1
        // and 3, one inter-crossing gap of 2 frames.
        let h = segment_histogram(&[vec![0.6, 0.6, 0.6, 0.6]], 30.0).unwrap();
        assert_eq!(h.total, 1);
        assert_eq!(h.counts, vec![0, 0, 1]);
        assert_eq!(h.edges_ms, vec![0.0, 30.0, 60.0]);
        assert_eq!(h.mean_frames, 2.0);
        assert_eq!(h.mean_ms, 60.0);
    }

    #[test]
    fn no_crossings_yields_empty_histogram() {
        let h = segment_histogram(&[vec![0.1, 0.1], vec![0.2]], 30.0).unwrap();
        assert!(h.is_empty());
        assert!(h.counts.is_empty());
        assert_eq!(h.mean_ms, 0.0);
        assert!(segment_histogram(&[], 0.0).is_err());
    }

    #[test]
    fn histogram_total_equals_crossings_minus_sentences_with_any() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alphas: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let n = rng.gen_range(1..30);
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
            })
            .collect();
        let h = segment_histogram(&alphas, 30.0).unwrap();
        let expected: usize = alphas
            .iter()
            .map(|a| crossings(a).boundary_frames.len().saturating_sub(1))
            .sum();
        assert_eq!(h.total, expected);
        assert_eq!(h.counts.iter().sum::<usize>(), h.total);
    }

    #[test]
    fn word_histogram_counts_every_word() {
        let spans = vec![
            vec![WordSpan { start: 0, end: 4 }, WordSpan { start: 4, end: 10 }],
            vec![WordSpan { start: 0, end: 5 }],
        ];
        let h = word_length_histogram(&spans, 30.0).unwrap();
        assert_eq!(h.total, 3);
        assert_eq!(h.counts[4], 1);
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.counts[6], 1);
        assert!((h.mean_frames - 5.0).abs() < 1e-15);
        let csv = h.to_csv();
        assert!(csv.starts_with("left_edge_ms,count\n"));
        assert_eq!(csv.lines().count(), 1 + h.counts.len());
    }
}
