//! Verifies the reverse-mode gradients of the full loss (cross-entropy plus
//! the word-count penalty) against central finite differences on a small
//! audio-visual model, probing a few scalars of every parameter tensor.
//!
//! Run with `cargo run --example gradient_check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taris::alphabet;
use taris::diff::{DiffArray, Tape};
use taris::mask::{ConnectivitySpec, Extent, SegmentSpec};
use taris::model::{total_loss, Fusion, GateActivation, Modality, ModelConfig, TarisModel};

fn main() -> taris::Result<()> {
    let cfg = ModelConfig {
        modality: Modality::Av,
        fusion: Fusion::Concat,
        gate: GateActivation::Sigmoid,
        lambda: 0.01,
        window_b: 1,
        encoder: ConnectivitySpec::new(Extent::Finite(2), Extent::Finite(1)),
        video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(1)),
        segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)),
        stack: taris::transformer::StackConfig::new(1, 8, 8, 0.0),
        d_a: 4,
        d_v: 3,
    };
    let mut model = TarisModel::init(cfg, 3)?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, m) = (6, 3);
    let audio = DiffArray::new(vec![n, 4], (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let video = DiffArray::new(vec![m, 3], (0..m * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let transcript = alphabet::encode("ab c")?;

    // Analytic gradients from one taped forward/backward pass, flattened in
    // parameter-registry order.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (bound, trace) = model.forward(&mut tape, &audio, Some(&video), &transcript, None)?;
        let losses = total_loss(&mut tape, &trace, &transcript, model.cfg.lambda)?;
        let grads = tape.backward(losses.total)?;
        bound.gradients(&tape, &grads).into_iter().map(|t| t.values().to_vec()).collect()
    };

    let names = model.param_names();
    let loss_of = |m: &TarisModel| -> taris::Result<f64> {
        let mut tape = Tape::new();
        let (_, trace) = m.forward(&mut tape, &audio, Some(&video), &transcript, None)?;
        let losses = total_loss(&mut tape, &trace, &transcript, m.cfg.lambda)?;
        tape.value(losses.total).item()
    };

    // Central differences on up to four scalars per tensor.
    const H: f64 = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0usize;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let probes = len.min(4);
        for k in 0..probes {
            let j = k * len / probes;
            let bump = |m: &mut TarisModel, delta: f64| {
                m.visit_mut(&mut |n, t| {
                    if n == *name {
                        t.values_mut()[j] += delta;
                    }
                });
            };
            bump(&mut model, H);
            let up = loss_of(&model)?;
            bump(&mut model, -2.0 * H);
            let down = loss_of(&model)?;
            bump(&mut model, H);
            let fd = (up - down) / (2.0 * H);
            let an = analytic[ti][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}]"));
            }
            checked += 1;
        }
    }
    println!("checked {checked} scalars across {} parameter tensors", names.len());
    println!("worst relative error {:.3e} at {}", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "finite differences disagree with the tape");
    println!("reverse-mode gradients match finite differences");
    Ok(())
}
