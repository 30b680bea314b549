//! Renders every attention connectivity pattern the model uses as a 0/1
//! grid: causal decoder self-attention, windowed encoder self-attention,
//! the audio→video cross-modal window, and the word↔segment mask that a
//! gate activation induces over the encoder memory.
//!
//! Run with `cargo run --example connectivity_masks`.

use taris::alphabet;
use taris::mask::{
    av_window, causal_mask, encoder_window_mask, segment_indices, segment_mask, word_indices,
    AttentionBias, ConnectivitySpec, Extent, SegmentSpec,
};

fn show(title: &str, bias: &AttentionBias) {
    println!("{title}  ({} queries x {} keys)", bias.rows(), bias.cols());
    for row in bias.render_rows() {
        println!("  {row}");
    }
    println!();
}

fn main() -> taris::Result<()> {
    // Decoder self-attention: each output position sees itself and the past.
    show("causal self-attention, 8 steps", &causal_mask(8)?);

    // Encoder self-attention with a finite window on both sides. Frame i
    // attends to [i - look_back, i + look_ahead], clipped to the sequence.
    let narrow = ConnectivitySpec::new(Extent::Finite(3), Extent::Finite(2));
    show("encoder window, look-back 3 / look-ahead 2", &encoder_window_mask(12, &narrow)?);

    // Unlimited look-back with a small look-ahead is the online profile:
    // the whole past is visible but only a bounded slice of the future,
    // which is what makes incremental encoding possible.
    let online = ConnectivitySpec::new(Extent::Infinite, Extent::Finite(2));
    show("encoder window, infinite look-back / look-ahead 2", &encoder_window_mask(12, &online)?);

    // Audio→video attention: audio frame i (of n) looks at video frames
    // within ±b of its aligned half-rate position.
    let (n, m, b) = (12, 6, 1);
    let av = AttentionBias::from_predicate(n, m, |i, j| {
        let (lo, hi) = av_window(i, n, m, b).expect("in range");
        (lo..=hi).contains(&j)
    });
    show("audio->video window, n=12 audio x m=6 video, b=1", &av);

    // Segment mask: the gate's running sum assigns each encoder frame a
    // segment id; decoder queries for word k may read segments k-1..=k+1
    // (look-back 1 / look-ahead 1 around their own segment).
    let alpha = vec![0.2, 0.3, 0.6, 0.4, 0.2, 0.4, 0.5, 0.3, 0.2, 0.1];
    let w_hat = segment_indices(&alpha);
    println!("gate activations: {alpha:?}");
    println!("running sum segments per frame: {w_hat:?}");
    let labels = alphabet::encode("hi there you")?;
    let w = word_indices(&labels);
    let seg = segment_mask(&w, &w_hat, &SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)));
    println!("query word index per transcript position: {w:?}");
    show("segment mask, queries = transcript positions", &seg.bias);
    println!("queries with an empty window (fall back to full memory): {:?}", seg.empty_rows);
    Ok(())
}
