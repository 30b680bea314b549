//! Synthesizes a small audio-visual corpus to disk (train split, test
//! split, JSON manifest), reads it back, and prints what one sample looks
//! like: frame counts, transcript, and the ground-truth word spans.
//!
//! Run with `cargo run --example make_corpus` (seconds).

use taris::synth::{build_lexicon, make_corpus, read_corpus, CorpusSpec};

fn main() -> taris::Result<()> {
    let dir = std::env::temp_dir().join("taris_corpus_example");
    std::fs::create_dir_all(&dir).map_err(|e| taris::Error::Data(format!("{}: {e}", dir.display())))?;

    // 10 lexicon words, 16-dim audio templates, 8-dim video templates,
    // 4-8 frames per word template.
    let lexicon = build_lexicon(0, 10, 16, 8, (4, 8))?;
    let spec = CorpusSpec {
        n_train: 100,
        n_test: 20,
        words_per_sentence: (2, 5),
        snr_db: Some(10.0),      // mix acoustic noise at 10 dB SNR
        video_informativeness: 1.0,
        silence_rate: 0.1,       // occasional inter-word silence
        seed: 42,
    };
    let manifest = make_corpus(&dir, &lexicon, &spec)?;
    println!("wrote {}", dir.display());
    for f in [&manifest.train_file, &manifest.test_file] {
        let bytes = std::fs::metadata(dir.join(f)).map(|m| m.len()).unwrap_or(0);
        println!("  {f}: {bytes} bytes");
    }
    println!("  manifest.json: vocab {}, d_a {}, d_v {}", manifest.vocab_size, manifest.d_a, manifest.d_v);

    // Round-trip: samples decode exactly as generated (values are stored
    // as f32, and generation quantizes through f32 to match).
    let test = read_corpus(&dir.join(&manifest.test_file))?;
    println!("\nread back {} test samples; first one:", test.len());
    let s = &test[0];
    println!("  transcript: {:?}", s.text());
    println!("  audio {}x{}, video {}x{}", s.audio.shape()[0], s.audio.shape()[1], s.video.shape()[0], s.video.shape()[1]);
    for (k, span) in s.spans.iter().enumerate() {
        println!("  word {k}: frames {}..{}", span.start, span.end);
    }
    Ok(())
}
