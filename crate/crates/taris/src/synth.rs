//! Deterministic synthetic audio-visual corpus: a small lexicon of invented
//! words, each with a fixed audio "pronunciation" template and a half-rate
//! video template, composed into sentences with known transcripts and exact
//! per-word frame spans.
//!
//! The generator stands in for a real recorded corpus while keeping
//! everything a test can want: ground-truth word boundaries (no forced
//! aligner), controllable acoustic noise (for the staged SNR curriculum),
//! and controllable video informativeness (dial the visual channel from
//! word-correlated to pure noise). Every sample is a pure function of
//! `(parameters, seed)`, and corpus files written from the same inputs are
//! byte-identical. Audio:video frame rate is fixed at 2:1 — `M = ceil(N/2)`.
//!
//! Values are quantized to f32 before a corpus is returned or written, so
//! in-memory samples equal their disk round trip exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alphabet::{self, APOSTROPHE, SPACE};
use crate::diff::DiffArray;
use crate::{Error, Result};

/// Magic string opening every corpus file.
pub const CORPUS_MAGIC: &[u8; 8] = b"TARISDS1";

/// Standard deviation of the per-instance additive perturbation applied to
/// audio template frames when a sentence is assembled.
pub const PERTURB_SIGMA: f64 = 0.05;

/// Standard deviation of optional inter-word silence frames.
const SILENCE_SIGMA: f64 = 0.1;

/// One lexicon word: its grapheme string and its two modality templates.
#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    /// 3–8 graphemes over the letters (occasionally with an interior
    /// apostrophe), never SPACE.
    pub word: String,
    /// Audio template, `T_w × d_a`, unit-variance entries.
    pub audio: DiffArray,
    /// Video template on the half-rate grid, `ceil(T_w/2) × d_v`.
    pub video: DiffArray,
}

/// A fixed vocabulary with per-word templates, regenerable bit-exactly from
/// its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub seed: u64,
    pub d_a: usize,
    pub d_v: usize,
    /// Audio template length range (frames) words were drawn from.
    pub template_frames: (usize, usize),
    pub entries: Vec<LexEntry>,
}

/// Half-open frame span `[start, end)` of one word within a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

/// One synthesized sentence with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `N × d_a` audio frames.
    pub audio: DiffArray,
    /// `M × d_v` video frames, `M = ceil(N/2)`.
    pub video: DiffArray,
    /// Grapheme indices with single SPACE separators (no trailing SPACE).
    pub transcript: Vec<u8>,
    /// Per-word audio-frame spans partitioning `[0, N)`.
    pub spans: Vec<WordSpan>,
}

impl SyntheticSample {
    /// Transcript as text.
    pub fn text(&self) -> String {
        alphabet::decode(&self.transcript)
    }

    /// Number of audio frames.
    pub fn frames(&self) -> usize {
        self.audio.shape()[0]
    }

    /// SPACE count — the word-count training target for the gate.
    pub fn space_count(&self) -> usize {
        self.transcript.iter().filter(|&&t| t == SPACE).count()
    }

    /// Checks every structural invariant; used on file load so corrupted
    /// corpora fail loudly rather than training quietly on garbage.
    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.audio.rows_cols();
        let (m, _) = self.video.rows_cols();
        if m != n.div_ceil(2) {
            return Err(Error::Data(format!(
                "sample has {m} video frames for {n} audio frames, expected {}",
                n.div_ceil(2)
            )));
        }
        if self.transcript.is_empty() {
            return Err(Error::Data("sample has an empty transcript".into()));
        }
        for &t in &self.transcript {
            if t > APOSTROPHE {
                return Err(Error::Data(format!("transcript token {t} out of range")));
            }
        }
        let first_last_space =
            self.transcript[0] == SPACE || *self.transcript.last().unwrap() == SPACE;
        let double_space = self.transcript.windows(2).any(|w| w == [SPACE, SPACE]);
        if first_last_space || double_space {
            return Err(Error::Data("transcript SPACEs must be single separators".into()));
        }
        if self.space_count() + 1 != self.spans.len() {
            return Err(Error::Data(format!(
                "{} words in transcript but {} boundary spans",
                self.space_count() + 1,
                self.spans.len()
            )));
        }
        let mut cursor = 0usize;
        for (i, s) in self.spans.iter().enumerate() {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Data(format!(
                    "boundary spans do not partition the frames (span {i} is {}..{}, cursor {cursor})",
                    s.start, s.end
                )));
            }
            cursor = s.end;
        }
        if cursor != n {
            return Err(Error::Data(format!(
                "boundary spans cover {cursor} of {n} frames"
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer — used to derive independent per-sample seeds so
/// generation order (or parallelism) cannot change any sample's content.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of the stream identified by `(base, salt)`.
pub fn derive_seed(base: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ salt).wrapping_add(index))
}

const SALT_TRAIN: u64 = 0x5452_4149_4e53_504c; // train split sentences
const SALT_TEST: u64 = 0x5445_5354_5350_4c54; // test split sentences
const SALT_NOISE: u64 = 0x4e4f_4953_4553_4e52; // acoustic noise
const SALT_VIDEO: u64 = 0x5649_4445_4f4e_5345; // video informativeness noise

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws a 3–8 grapheme word, occasionally contracting with an interior
/// apostrophe.
fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=8usize);
    let mut chars: Vec<char> =
        (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
    if len >= 4 && rng.gen::<f64>() < 0.15 {
        let pos = rng.gen_range(1..len - 1);
        chars[pos] = '\'';
    }
    chars.into_iter().collect()
}

/// Builds a `vocab_size`-word lexicon with unit-variance templates. Audio
/// template lengths are drawn uniformly from `template_frames` (each ≥ 2 so
/// a timing-jittered instance keeps at least one frame); the video template
/// covers the same span at half rate.
pub fn build_lexicon(
    seed: u64,
    vocab_size: usize,
    d_a: usize,
    d_v: usize,
    template_frames: (usize, usize),
) -> Result<Lexicon> {
    if vocab_size < 2 {
        return Err(Error::Config(format!("lexicon needs ≥ 2 words, got {vocab_size}")));
    }
    if d_a == 0 || d_v == 0 {
        return Err(Error::Config("lexicon feature widths must be ≥ 1".into()));
    }
    let (lo, hi) = template_frames;
    if lo < 2 || hi > 40 || lo > hi {
        return Err(Error::Config(format!(
            "template frame range {lo}..={hi} outside the supported 2..=40"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(vocab_size);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0usize;
    while entries.len() < vocab_size {
        attempts += 1;
        if attempts > 1000 * vocab_size {
            return Err(Error::Config(format!(
                "could not draw {vocab_size} unique words"
            )));
        }
        let word = random_word(&mut rng);
        if !seen.insert(word.clone()) {
            continue;
        }
        let t_w = rng.gen_range(lo..=hi);
        let audio_v: Vec<f64> = (0..t_w * d_a).map(|_| gauss(&mut rng)).collect();
        let video_rows = t_w.div_ceil(2);
        let video_v: Vec<f64> = (0..video_rows * d_v).map(|_| gauss(&mut rng)).collect();
        entries.push(LexEntry {
            word,
            audio: DiffArray::new(vec![t_w, d_a], audio_v)?,
            video: DiffArray::new(vec![video_rows, d_v], video_v)?,
        });
    }
    Ok(Lexicon { seed, d_a, d_v, template_frames, entries })
}

/// Provenance of one assembled audio frame, kept so the video stream can be
/// laid out on the half-rate grid afterwards.
#[derive(Clone, Copy)]
enum FrameSrc {
    /// Frame belongs to lexicon entry `entry`; the word instance started at
    /// sentence frame `start` with `trim_head` template frames cut off.
    Word { entry: usize, start: usize, trim_head: usize },
    Silence,
}

/// Synthesizes one sentence: `word_count_range` words drawn uniformly from
/// the lexicon, audio templates concatenated with ±1-frame timing jitter and
/// N(0, 0.05) perturbation, video taken from the half-rate templates, plus
/// optional inter-word silence (`silence_rate` = probability of a 1–2 frame
/// low-energy gap after each word boundary; silence joins the preceding
/// word's span, so spans still partition the frames).
pub fn synthesize_sentence_opts(
    lexicon: &Lexicon,
    seed: u64,
    word_count_range: (usize, usize),
    silence_rate: f64,
) -> Result<SyntheticSample> {
    let (lo, hi) = word_count_range;
    if lo < 1 || lo > hi {
        return Err(Error::Config(format!("bad word count range {lo}..={hi}")));
    }
    if !(0.0..=1.0).contains(&silence_rate) {
        return Err(Error::Config(format!("silence rate {silence_rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(lo..=hi);
    let picks: Vec<usize> = (0..count).map(|_| rng.gen_range(0..lexicon.entries.len())).collect();

    let d_a = lexicon.d_a;
    let d_v = lexicon.d_v;
    let mut audio: Vec<f64> = Vec::new();
    let mut src: Vec<FrameSrc> = Vec::new();
    let mut spans: Vec<WordSpan> = Vec::new();
    let mut transcript: Vec<u8> = Vec::new();

    for (w, &pick) in picks.iter().enumerate() {
        if w > 0 {
            transcript.push(SPACE);
            if silence_rate > 0.0 && rng.gen::<f64>() < silence_rate {
                let gap = rng.gen_range(1..=2usize);
                for _ in 0..gap {
                    audio.extend((0..d_a).map(|_| SILENCE_SIGMA * gauss(&mut rng)));
                    src.push(FrameSrc::Silence);
                }
                spans.last_mut().expect("silence follows a word").end = src.len();
            }
        }
        let entry = &lexicon.entries[pick];
        transcript.extend_from_slice(&alphabet::encode(&entry.word)?);
        let t_w = entry.audio.shape()[0];
        // Timing jitter: drop the first or last template frame, or neither.
        let (trim_head, trim_tail) = match rng.gen_range(-1..=1i32) {
            -1 => (1usize, 0usize),
            1 => (0, 1),
            _ => (0, 0),
        };
        let start = src.len();
        for r in trim_head..t_w - trim_tail {
            let row = &entry.audio.values()[r * d_a..(r + 1) * d_a];
            audio.extend(row.iter().map(|x| x + PERTURB_SIGMA * gauss(&mut rng)));
            src.push(FrameSrc::Word { entry: pick, start, trim_head });
        }
        spans.push(WordSpan { start, end: src.len() });
    }

    let n = src.len();
    let m = n.div_ceil(2);
    let mut video: Vec<f64> = Vec::with_capacity(m * d_v);
    for j in 0..m {
        match src[2 * j] {
            FrameSrc::Word { entry, start, trim_head } => {
                let e = &lexicon.entries[entry];
                let rows = e.video.shape()[0];
                let vr = ((2 * j - start + trim_head) / 2).min(rows - 1);
                video.extend_from_slice(&e.video.values()[vr * d_v..(vr + 1) * d_v]);
            }
            FrameSrc::Silence => {
                video.extend((0..d_v).map(|_| SILENCE_SIGMA * gauss(&mut rng)));
            }
        }
    }

    let sample = SyntheticSample {
        audio: DiffArray::new(vec![n, d_a], audio)?,
        video: DiffArray::new(vec![m, d_v], video)?,
        transcript,
        spans,
    };
    debug_assert!(sample.validate().is_ok());
    Ok(sample)
}

/// [`synthesize_sentence_opts`] without inter-word silence.
pub fn synthesize_sentence(
    lexicon: &Lexicon,
    seed: u64,
    word_count_range: (usize, usize),
) -> Result<SyntheticSample> {
    synthesize_sentence_opts(lexicon, seed, word_count_range, 0.0)
}

/// Adds seed-deterministic Gaussian noise to the audio stream so that
/// `10·log10(signal_power/noise_power) = snr_db`. Video is untouched — the
/// visual channel is the noise-robust one. `snr_db = +∞` returns the sample
/// unchanged (clean stage).
pub fn mix_noise(sample: &SyntheticSample, snr_db: f64, seed: u64) -> Result<SyntheticSample> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(sample.clone());
    }
    let vals = sample.audio.values();
    let p_signal = vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64;
    let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = vals.iter().map(|x| x + sigma * gauss(&mut rng)).collect();
    Ok(SyntheticSample {
        audio: DiffArray::new(sample.audio.shape().to_vec(), noisy)?,
        video: sample.video.clone(),
        transcript: sample.transcript.clone(),
        spans: sample.spans.clone(),
    })
}

/// Replaces the video stream with `v·template + (1−v)·noise`. At `v = 0`
/// the video carries no word information at all; at `v = 1` it is returned
/// unchanged.
fn blend_video(sample: &SyntheticSample, v: f64, seed: u64) -> Result<SyntheticSample> {
    if v >= 1.0 {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blended: Vec<f64> = sample
        .video
        .values()
        .iter()
        .map(|x| v * x + (1.0 - v) * gauss(&mut rng))
        .collect();
    Ok(SyntheticSample {
        audio: sample.audio.clone(),
        video: DiffArray::new(sample.video.shape().to_vec(), blended)?,
        transcript: sample.transcript.clone(),
        spans: sample.spans.clone(),
    })
}

/// Quantizes every feature to its f32 representation so in-memory samples
/// match their disk round trip bit for bit.
pub fn quantize(sample: &mut SyntheticSample) {
    for x in sample.audio.values_mut() {
        *x = *x as f32 as f64;
    }
    for x in sample.video.values_mut() {
        *x = *x as f32 as f64;
    }
}

/// Corpus-level generation parameters (everything beyond the lexicon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub words_per_sentence: (usize, usize),
    /// Acoustic SNR in dB; `None` means clean audio.
    pub snr_db: Option<f64>,
    /// 1 = fully word-correlated video, 0 = word-independent noise.
    pub video_informativeness: f64,
    /// Probability of a short silence gap after each inter-word boundary.
    pub silence_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 2000,
            n_test: 200,
            words_per_sentence: (3, 8),
            snr_db: None,
            video_informativeness: 1.0,
            silence_rate: 0.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::Config("corpus needs ≥ 1 sample per split".into()));
        }
        let (lo, hi) = self.words_per_sentence;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("bad words-per-sentence range {lo}..={hi}")));
        }
        if let Some(db) = self.snr_db {
            if !db.is_finite() {
                return Err(Error::Config(format!("manifest SNR must be finite, got {db}")));
            }
        }
        if !(0.0..=1.0).contains(&self.video_informativeness) {
            return Err(Error::Config(format!(
                "video informativeness {} outside [0, 1]",
                self.video_informativeness
            )));
        }
        if !(0.0..=1.0).contains(&self.silence_rate) {
            return Err(Error::Config(format!(
                "silence rate {} outside [0, 1]",
                self.silence_rate
            )));
        }
        Ok(())
    }
}

/// Which half of the corpus a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generates one split fully in memory (the file-writing path and tests
/// share this). Per-sample seeds are derived, not sequential, so samples
/// are independent of generation order.
pub fn generate_split(lexicon: &Lexicon, spec: &CorpusSpec, split: Split) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let (count, salt) = match split {
        Split::Train => (spec.n_train, SALT_TRAIN),
        Split::Test => (spec.n_test, SALT_TEST),
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let mut s = synthesize_sentence_opts(
            lexicon,
            derive_seed(spec.seed, salt, i),
            spec.words_per_sentence,
            spec.silence_rate,
        )?;
        if let Some(db) = spec.snr_db {
            s = mix_noise(&s, db, derive_seed(spec.seed, salt ^ SALT_NOISE, i))?;
        }
        if spec.video_informativeness < 1.0 {
            s = blend_video(
                &s,
                spec.video_informativeness,
                derive_seed(spec.seed, salt ^ SALT_VIDEO, i),
            )?;
        }
        quantize(&mut s);
        out.push(s);
    }
    Ok(out)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes samples in the corpus binary format: the magic, then per sample
/// `u32 N, u32 M, u32 transcript_len, u16 d_a, u16 d_v`, row-major f32
/// audio and video, transcript bytes, `u32 word_count`, and per-word
/// `u32 start, u32 end`. Little-endian throughout; read back to EOF.
pub fn write_corpus(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    for s in samples {
        s.validate()?;
        let (n, d_a) = s.audio.rows_cols();
        let (m, d_v) = s.video.rows_cols();
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(m as u32).to_le_bytes());
        buf.extend_from_slice(&(s.transcript.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(d_a as u16).to_le_bytes());
        buf.extend_from_slice(&(d_v as u16).to_le_bytes());
        for &x in s.audio.values() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &x in s.video.values() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        buf.extend_from_slice(&s.transcript);
        buf.extend_from_slice(&(s.spans.len() as u32).to_le_bytes());
        for span in &s.spans {
            buf.extend_from_slice(&(span.start as u32).to_le_bytes());
            buf.extend_from_slice(&(span.end as u32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Little-endian reader over a corpus byte buffer with origin-tagged errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.origin, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Reads a corpus file, validating the magic, every sample's invariants,
/// and feature-width consistency across samples.
pub fn read_corpus(path: &Path) -> Result<Vec<SyntheticSample>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_corpus_bytes(&bytes, &path.display().to_string())
}

/// [`read_corpus`] over an in-memory buffer (e.g. frames piped on standard
/// input); `origin` tags error messages in place of a file path.
pub fn read_corpus_bytes(bytes: &[u8], origin: &str) -> Result<Vec<SyntheticSample>> {
    let mut r = Reader { buf: bytes, pos: 0, origin };
    if r.take(CORPUS_MAGIC.len())? != CORPUS_MAGIC {
        return Err(Error::Data(format!("{origin}: bad magic (not a corpus file)")));
    }
    let mut samples = Vec::new();
    let mut widths: Option<(usize, usize)> = None;
    while !r.done() {
        let n = r.u32()? as usize;
        let m = r.u32()? as usize;
        let t_len = r.u32()? as usize;
        let d_a = r.u16()? as usize;
        let d_v = r.u16()? as usize;
        match widths {
            None => widths = Some((d_a, d_v)),
            Some(w) if w != (d_a, d_v) => {
                return Err(Error::Data(format!(
                    "{origin}: sample {} has widths ({d_a},{d_v}), corpus started with ({},{})",
                    samples.len(),
                    w.0,
                    w.1
                )));
            }
            _ => {}
        }
        let audio = DiffArray::new(vec![n, d_a], r.f32s(n * d_a)?)?;
        let video = DiffArray::new(vec![m, d_v], r.f32s(m * d_v)?)?;
        let transcript = r.take(t_len)?.to_vec();
        let words = r.u32()? as usize;
        let mut spans = Vec::with_capacity(words);
        for _ in 0..words {
            spans.push(WordSpan { start: r.u32()? as usize, end: r.u32()? as usize });
        }
        let sample = SyntheticSample { audio, video, transcript, spans };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Generation record written next to the corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub lexicon_seed: u64,
    pub vocab_size: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub template_frames: (usize, usize),
    pub corpus: CorpusSpec,
    pub train_file: String,
    pub test_file: String,
}

/// Generates both splits and writes `train.bin`, `test.bin`, and
/// `manifest.json` into `dir`. Same lexicon + spec ⇒ byte-identical files.
pub fn make_corpus(dir: &Path, lexicon: &Lexicon, spec: &CorpusSpec) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let train = generate_split(lexicon, spec, Split::Train)?;
    let test = generate_split(lexicon, spec, Split::Test)?;
    write_corpus(&dir.join("train.bin"), &train)?;
    write_corpus(&dir.join("test.bin"), &test)?;
    let manifest = Manifest {
        format: String::from_utf8_lossy(CORPUS_MAGIC).into_owned(),
        lexicon_seed: lexicon.seed,
        vocab_size: lexicon.entries.len(),
        d_a: lexicon.d_a,
        d_v: lexicon.d_v,
        template_frames: lexicon.template_frames,
        corpus: spec.clone(),
        train_file: "train.bin".into(),
        test_file: "test.bin".into(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, json.as_bytes()).map_err(|e| io_err(&mpath, e))?;
    Ok(manifest)
}

/// Loads a manifest written by [`make_corpus`].
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
