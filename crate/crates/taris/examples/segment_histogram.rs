//! Trains a small model, then compares the duration histogram of the
//! segments its gate discovers against the ground-truth word-length
//! histogram of the same test split. A well-trained gate reproduces the
//! word-duration statistics without ever seeing an alignment.
//!
//! Run with `cargo run --example segment_histogram` (seconds).

use taris::config::TrainConfig;
use taris::mask::{ConnectivitySpec, Extent, SegmentSpec};
use taris::metrics::Histogram;
use taris::model::{Fusion, GateActivation, Modality, ModelConfig};
use taris::synth::{build_lexicon, generate_split, CorpusSpec, Split};
use taris::train::{evaluate, EvalMode, Trainer};

fn print_pair(word: &Histogram, segment: &Histogram) {
    let bins = word.counts.len().max(segment.counts.len());
    println!("duration     words   segments");
    for i in 0..bins {
        let w = word.counts.get(i).copied().unwrap_or(0);
        let s = segment.counts.get(i).copied().unwrap_or(0);
        if w + s == 0 {
            continue;
        }
        println!(
            "{:>4.0}-{:<4.0}ms {:>6} {:>10}  {}{}",
            i as f64 * word.frame_ms,
            (i + 1) as f64 * word.frame_ms,
            w,
            s,
            "#".repeat(w.min(60)),
            "*".repeat(s.min(60)),
        );
    }
}

fn main() -> taris::Result<()> {
    let lexicon = build_lexicon(5, 6, 4, 3, (3, 6))?;
    let spec = CorpusSpec {
        n_train: 512,
        n_test: 48,
        words_per_sentence: (2, 4),
        snr_db: None,
        video_informativeness: 1.0,
        silence_rate: 0.0,
        seed: 5,
    };
    let train = generate_split(&lexicon, &spec, Split::Train)?;
    let test = generate_split(&lexicon, &spec, Split::Test)?;

    let mc = ModelConfig {
        modality: Modality::Audio,
        fusion: Fusion::Add,
        gate: GateActivation::Sigmoid,
        lambda: 0.01,
        window_b: 1,
        encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)),
        stack: taris::transformer::StackConfig::new(1, 16, 32, 0.1),
        d_a: 4,
        d_v: 3,
    };
    let tc = TrainConfig {
        epochs: 80,
        batch_size: 8,
        lr: 3e-3,
        lr_decayed: 3e-4,
        decay_epoch: 64,
        seed: 11,
        snr_stages: vec![None],
    };
    let mut trainer = Trainer::new(mc, tc)?;
    while !trainer.finished() {
        trainer.run_epoch(&train)?;
    }

    // Segment durations are the frame spans between consecutive unit
    // crossings of the gate's running sum; the evaluator collects both
    // histograms over the split at 30 ms per frame.
    let report = evaluate(&trainer.model, &test, EvalMode::Offline, 30.0)?;
    print_pair(&report.word_histogram, &report.segment_histogram);
    println!();
    println!(
        "mean word duration    {:.0} ms ({:.2} frames)",
        report.word_histogram.mean_ms, report.word_histogram.mean_frames
    );
    println!(
        "mean segment duration {:.0} ms ({:.2} frames)",
        report.segment_histogram.mean_ms, report.segment_histogram.mean_frames
    );
    let gap = (report.segment_histogram.mean_frames - report.word_histogram.mean_frames).abs()
        / report.word_histogram.mean_frames;
    println!("relative mean gap     {:.1}%", 100.0 * gap);
    // Complete segments are the spans between consecutive unit crossings of
    // the running gate sum; the gate is trained on separator counts, so a
    // k-word sentence contributes at most k-2 of them (sentence edges are
    // open-ended). The histogram therefore has fewer entries than words -
    // the claim under test is that the duration *distributions* agree.
    println!(
        "word-count MAE        {:.2} over {} sentences ({} words, {} complete gate segments)",
        report.word_count_mae,
        report.sentences,
        report.word_histogram.total,
        report.segment_histogram.total
    );
    Ok(())
}
