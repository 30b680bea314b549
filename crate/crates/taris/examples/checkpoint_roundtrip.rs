//! Exercises run persistence end to end: save a mid-training checkpoint,
//! reload it into a fresh trainer, and show that the resumed run reproduces
//! the uninterrupted one bit for bit - parameters, optimizer moments, and
//! the data-order RNG all travel through the file.
//!
//! Run with `cargo run --example checkpoint_roundtrip` (seconds).

use taris::config::TrainConfig;
use taris::mask::{ConnectivitySpec, Extent, SegmentSpec};
use taris::model::{Fusion, GateActivation, Modality, ModelConfig, TarisModel};
use taris::synth::{build_lexicon, generate_split, CorpusSpec, Split};
use taris::train::Trainer;

fn tensors(model: &TarisModel) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, arr| out.push((name, arr.values().to_vec())));
    out
}

fn main() -> taris::Result<()> {
    let lexicon = build_lexicon(5, 6, 4, 3, (2, 4))?;
    let spec = CorpusSpec {
        n_train: 32,
        n_test: 8,
        words_per_sentence: (1, 2),
        snr_db: None,
        video_informativeness: 1.0,
        silence_rate: 0.0,
        seed: 5,
    };
    let train = generate_split(&lexicon, &spec, Split::Train)?;

    let mc = ModelConfig {
        modality: Modality::Audio,
        fusion: Fusion::Add,
        gate: GateActivation::Sigmoid,
        lambda: 0.01,
        window_b: 1,
        encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(3)),
        segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)),
        stack: taris::transformer::StackConfig::new(1, 8, 16, 0.1),
        d_a: 4,
        d_v: 3,
    };
    let tc = TrainConfig {
        epochs: 6,
        batch_size: 8,
        lr: 1e-3,
        lr_decayed: 1e-4,
        decay_epoch: 6,
        seed: 11,
        snr_stages: vec![None],
    };

    // Run A: all six epochs in one process.
    let mut straight = Trainer::new(mc.clone(), tc.clone())?;
    while !straight.finished() {
        straight.run_epoch(&train)?;
    }

    // Run B: three epochs, checkpoint to disk, resume, three more.
    let dir = std::env::temp_dir().join("taris_roundtrip_example");
    std::fs::create_dir_all(&dir).map_err(|e| taris::Error::Data(format!("{}: {e}", dir.display())))?;
    let ck = dir.join("mid.ck");
    let mut first = Trainer::new(mc, tc.clone())?;
    for _ in 0..3 {
        first.run_epoch(&train)?;
    }
    first.save(&ck)?;
    println!("checkpoint written: {} ({} bytes)", ck.display(), std::fs::metadata(&ck).map(|m| m.len()).unwrap_or(0));
    drop(first);

    let mut resumed = Trainer::resume(&ck, tc)?;
    println!("resumed at stage {}, epoch {}", resumed.stage, resumed.epoch);
    while !resumed.finished() {
        resumed.run_epoch(&train)?;
    }

    // Bit-exact equality, tensor by tensor.
    let a = tensors(&straight.model);
    let b = tensors(&resumed.model);
    let mut worst = 0.0f64;
    for ((name_a, va), (name_b, vb)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(va, vb, "{name_a} differs after resume");
        for (x, y) in va.iter().zip(vb) {
            worst = worst.max((x - y).abs());
        }
    }
    println!("{} tensors compared, largest difference {worst:.1e}", a.len());
    assert_eq!(straight.optimizer.t, resumed.optimizer.t, "optimizer step count differs");
    println!("split-and-resume run is bit-identical to the uninterrupted run");
    Ok(())
}
