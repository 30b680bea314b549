//! Feeds one synthesized sentence to a quickly trained model frame by
//! frame, printing commit/emit/revise events as they fire, then the final
//! transcript with per-word emission latency.
//!
//! Run with `cargo run --example stream_live` (about half a minute).

use taris::config::TrainConfig;
use taris::mask::{ConnectivitySpec, Extent, SegmentSpec};
use taris::model::{Fusion, GateActivation, Modality, ModelConfig};
use taris::streaming::{DecodeMode, EventPayload, StreamEvent, StreamState};
use taris::synth::{build_lexicon, generate_split, CorpusSpec, Split};
use taris::train::Trainer;

fn print_events(events: &[StreamEvent]) {
    for e in events {
        match &e.payload {
            EventPayload::Commit { committed_frames, sigma_alpha, boundaries } => println!(
                "  frame {:>3}  commit   {} frames settled, gate mass {:.2}, {} boundaries",
                e.frame_index, committed_frames, sigma_alpha, boundaries
            ),
            EventPayload::Emit { word, text } => {
                println!("  frame {:>3}  emit     word {word}: {text:?}", e.frame_index)
            }
            EventPayload::Revise { word, text, version } => println!(
                "  frame {:>3}  revise   word {word} v{version}: {text:?}",
                e.frame_index
            ),
        }
    }
}

fn main() -> taris::Result<()> {
    // Train a small audio model for a handful of epochs - enough for the
    // stream to produce recognizable words rather than noise.
    let lexicon = build_lexicon(5, 6, 4, 3, (3, 6))?;
    let spec = CorpusSpec {
        n_train: 256,
        n_test: 16,
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
        // Finite look-ahead bounds how far behind the commit frontier runs.
        encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)),
        stack: taris::transformer::StackConfig::new(1, 16, 32, 0.1),
        d_a: 4,
        d_v: 3,
    };
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 8,
        lr: 3e-3,
        lr_decayed: 3e-4,
        decay_epoch: 48,
        seed: 11,
        snr_stages: vec![None],
    };
    let mut trainer = Trainer::new(mc, tc)?;
    while !trainer.finished() {
        trainer.run_epoch(&train)?;
    }
    let model = &trainer.model;

    let sample = &test[0];
    let n = sample.audio.shape()[0];
    let d_a = sample.audio.shape()[1];
    println!("streaming {n} audio frames, reference: {:?}", sample.text());

    let mut st = StreamState::new(&model.cfg)?;
    for i in 0..n {
        let frame = &sample.audio.values()[i * d_a..(i + 1) * d_a];
        print_events(&st.ingest(model, frame, None)?);
        // Eager mode re-decodes the settled prefix as it grows, emitting
        // provisional words early and revising them if they change.
        print_events(&st.try_decode(model, DecodeMode::Eager)?);
    }
    let fin = st.finalize(model, DecodeMode::Eager)?;
    print_events(&fin.events);

    println!();
    println!("final transcript: {:?}", fin.transcript);
    println!("gate mass {:.2} over {n} frames", fin.sigma_alpha);
    if let Some(ms) = fin.report.mean_delay_ms() {
        println!(
            "mean word emission delay {ms:.0} ms ({:.1} frames past the word's gate boundary)",
            fin.report.mean_delay_frames()
        );
    }
    for w in &fin.report.words {
        println!(
            "  word {} emitted at frame {} (boundary {:?}, {} version{})",
            w.word,
            w.emit_frame,
            w.crossing_frame,
            w.revisions,
            if w.revisions == 1 { "" } else { "s" }
        );
    }
    Ok(())
}
