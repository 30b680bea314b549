//! Trains a minute-scale model on a freshly synthesized in-memory corpus,
//! watching the composite loss fall, then evaluates it offline and decodes
//! a few test sentences next to their references.
//!
//! Run with `cargo run --example train_tiny` (seconds, fully deterministic).

use taris::config::TrainConfig;
use taris::mask::{ConnectivitySpec, Extent, SegmentSpec};
use taris::model::{Fusion, GateActivation, Modality, ModelConfig};
use taris::synth::{build_lexicon, generate_split, CorpusSpec, Split};
use taris::train::{evaluate, EvalMode, Trainer};

fn main() -> taris::Result<()> {
    // A 6-word lexicon of short 4-dimensional audio templates keeps every
    // epoch well under a second.
    let lexicon = build_lexicon(5, 6, 4, 3, (2, 4))?;
    let spec = CorpusSpec {
        n_train: 256,
        n_test: 32,
        words_per_sentence: (1, 2),
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
        epochs: 60,
        batch_size: 8,
        lr: 3e-3,
        lr_decayed: 3e-4,
        decay_epoch: 48,
        seed: 11,
        snr_stages: vec![None],
    };
    let mut trainer = Trainer::new(mc, tc)?;

    println!("epoch    lr      loss      CE        word");
    while !trainer.finished() {
        let s = trainer.run_epoch(&train)?;
        if s.epoch % 10 == 0 || trainer.finished() {
            println!(
                "{:>5} {:>7.0e}  {:<9.4} {:<9.4} {:<9.4}",
                s.epoch, s.lr, s.loss, s.cross_entropy, s.word_loss
            );
        }
    }

    let report = evaluate(&trainer.model, &test, EvalMode::Offline, 30.0)?;
    println!();
    println!("test sentences      {}", report.sentences);
    println!("character error     {:.1}%", 100.0 * report.cer);
    println!("word-count MAE      {:.3}", report.word_count_mae);
    println!();
    for sample in test.iter().take(4) {
        let decoded = trainer.model.greedy_decode_offline(&sample.audio, None)?;
        println!("ref: {:<24} hyp: {}", sample.text(), decoded.text);
    }
    Ok(())
}
