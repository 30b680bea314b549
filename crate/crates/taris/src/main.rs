//! Command-line front end: corpus generation, training, evaluation,
//! frame-by-frame streaming, mask dumps, and histogram export.
//!
//! Exit codes: 0 success, 2 configuration error (including usage errors),
//! 3 data error, 4 numerical error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use taris::checkpoint::load_checkpoint;
use taris::config::{resolve, PartialConfig, Preset, TrainConfig};
use taris::mask::{
    av_window, causal_mask, encoder_window_mask, AttentionBias, Extent, GateTrace,
};
use taris::model::{cross_bias_for, query_word_rows, Fusion, GateActivation, Modality, ModelConfig};
use taris::streaming::{DecodeMode, StreamState};
use taris::synth::{
    build_lexicon, make_corpus, read_corpus, read_corpus_bytes, read_manifest, CorpusSpec,
    SyntheticSample,
};
use taris::train::{evaluate, train_full, EvalMode, Trainer};
use taris::{alphabet, Error, Result};

#[derive(Parser)]
#[command(
    name = "taris",
    version,
    about = "Online speech recognition by learning to count words"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic audio-visual corpus (train/test splits + manifest).
    GenData(GenDataArgs),
    /// Train a model on a generated corpus, writing checkpoints per epoch.
    Train(TrainArgs),
    /// Score a checkpoint over a corpus split and emit an evaluation report.
    Eval(EvalArgs),
    /// Feed corpus samples frame by frame and print incremental emission events.
    Stream(StreamArgs),
    /// Print attention masks as rows of '0'/'1' characters.
    Masks(MasksArgs),
    /// Export duration histograms (word lengths, and gate segments given a model).
    Hist(HistArgs),
}

/// Flags shared by every subcommand; each one overrides the config file,
/// which overrides the preset.
#[derive(Args, Debug)]
struct SharedCfg {
    /// Built-in starting configuration.
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// JSON file of overrides (same field names as the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for model init, training order, and data generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Input modality: audio | av.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<Modality>,
    /// Audio-visual fusion: add | concat.
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    /// Gate activation: sigmoid | scaled-sigmoid | tanh.
    #[arg(long, value_parser = parse_gate)]
    gate: Option<GateActivation>,
    /// Encoder look-ahead in frames, or "inf".
    #[arg(long, value_parser = parse_extent)]
    e_la: Option<Extent>,
    /// Encoder look-back in frames, or "inf".
    #[arg(long, value_parser = parse_extent)]
    e_lb: Option<Extent>,
    /// Decoder look-ahead in segments, or "inf".
    #[arg(long, value_parser = parse_extent)]
    d_la: Option<Extent>,
    /// Decoder look-back in segments, or "inf".
    #[arg(long, value_parser = parse_extent)]
    d_lb: Option<Extent>,
    /// Cross-modal half-window B (each audio frame sees 2B+1 video frames).
    #[arg(long)]
    window_b: Option<usize>,
    /// Word-loss weight in the composite objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Encoder/decoder layers per stack.
    #[arg(long)]
    layers: Option<usize>,
    /// Model width h.
    #[arg(long)]
    hidden: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    dff: Option<usize>,
    /// Epochs per curriculum stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Acoustic SNR in dB. gen-data bakes it into the corpus; train replaces
    /// the curriculum with this single noisy stage.
    #[arg(long)]
    snr: Option<f64>,
}

impl SharedCfg {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            modality: self.modality,
            fusion: self.fusion,
            gate: self.gate,
            lambda: self.lambda,
            window_b: self.window_b,
            e_lb: self.e_lb,
            e_la: self.e_la,
            d_lb: self.d_lb,
            d_la: self.d_la,
            layers: self.layers,
            hidden: self.hidden,
            dff: self.dff,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            snr_stages: self.snr.map(|db| vec![Some(db)]),
            ..PartialConfig::default()
        }
    }

    fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        let file = match &self.config {
            Some(p) => Some(PartialConfig::from_json_file(p)?),
            None => None,
        };
        resolve(self.preset, file.as_ref(), &self.partial())
    }
}

fn parse_preset(s: &str) -> Result<Preset> {
    s.parse()
}
fn parse_modality(s: &str) -> Result<Modality> {
    s.parse()
}
fn parse_fusion(s: &str) -> Result<Fusion> {
    s.parse()
}
fn parse_gate(s: &str) -> Result<GateActivation> {
    s.parse()
}
fn parse_extent(s: &str) -> Result<Extent> {
    s.parse()
}
fn parse_eval_mode(s: &str) -> Result<EvalMode> {
    s.parse()
}
fn parse_decode_mode(s: &str) -> Result<DecodeMode> {
    s.parse()
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    shared: SharedCfg,
    /// Output directory for train.bin, test.bin, manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Minimum words per sentence.
    #[arg(long, default_value_t = 3)]
    words_min: usize,
    /// Maximum words per sentence.
    #[arg(long, default_value_t = 8)]
    words_max: usize,
    /// Lexicon size.
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    /// Minimum audio frames per word template.
    #[arg(long, default_value_t = 4)]
    word_frames_min: usize,
    /// Maximum audio frames per word template.
    #[arg(long, default_value_t = 8)]
    word_frames_max: usize,
    /// Probability of a short silence after each word.
    #[arg(long, default_value_t = 0.0)]
    silence_rate: f64,
    /// 1.0 = video tracks the speech, 0.0 = uninformative noise.
    #[arg(long, default_value_t = 1.0)]
    video_informativeness: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: SharedCfg,
    /// Corpus directory (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: SharedCfg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// offline | stream-final | stream-eager.
    #[arg(long, default_value = "offline", value_parser = parse_eval_mode)]
    mode: EvalMode,
    /// Corpus split to score: train | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Frame duration for millisecond reporting.
    #[arg(long, default_value_t = 30.0)]
    frame_ms: f64,
    /// Also write report.json and histogram CSVs here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    shared: SharedCfg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus-format file of frames, or "-" for standard input.
    #[arg(long)]
    input: String,
    /// final | eager.
    #[arg(long, default_value = "final", value_parser = parse_decode_mode)]
    mode: DecodeMode,
    /// Which sample of the input to stream.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 30.0)]
    frame_ms: f64,
}

#[derive(Args)]
struct MasksArgs {
    #[command(flatten)]
    shared: SharedCfg,
    /// encoder | video | causal | av | segments.
    #[arg(long, default_value = "encoder")]
    kind: String,
    /// Query rows (frames, or tokens for "causal"/"segments").
    #[arg(long, default_value_t = 12)]
    rows: usize,
    /// Key columns for "av" (video frames; default ceil(rows/2)).
    #[arg(long)]
    cols: Option<usize>,
    /// Comma-separated per-frame gate values (for "segments").
    #[arg(long)]
    alphas: Option<String>,
    /// Transcript text supplying query word indices (for "segments").
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args)]
struct HistArgs {
    #[command(flatten)]
    shared: SharedCfg,
    #[arg(long)]
    data: PathBuf,
    /// Corpus split: train | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Model whose gate produces the segment histogram; omit for
    /// ground-truth word lengths only.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    frame_ms: f64,
    /// Write CSVs here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Stream(a) => stream(a),
        Cmd::Masks(a) => masks(a),
        Cmd::Hist(a) => hist(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mc, tc) = a.shared.resolve()?;
    let lex = build_lexicon(
        tc.seed,
        a.vocab,
        mc.d_a,
        mc.d_v,
        (a.word_frames_min, a.word_frames_max),
    )?;
    let spec = CorpusSpec {
        n_train: a.n_train,
        n_test: a.n_test,
        words_per_sentence: (a.words_min, a.words_max),
        snr_db: a.shared.snr,
        video_informativeness: a.video_informativeness,
        silence_rate: a.silence_rate,
        seed: tc.seed,
    };
    let manifest = make_corpus(&a.out, &lex, &spec)?;
    println!("{}", json_pretty(&manifest)?);
    Ok(())
}

/// Loads a split and checks its feature widths against the model.
fn load_split(data: &Path, split: &str, mc: Option<&ModelConfig>) -> Result<Vec<SyntheticSample>> {
    let manifest = read_manifest(&data.join("manifest.json"))?;
    let file = match split {
        "train" => &manifest.train_file,
        "test" => &manifest.test_file,
        other => return Err(Error::Config(format!("unknown split {other:?} (train|test)"))),
    };
    if let Some(mc) = mc {
        if (manifest.d_a, manifest.d_v) != (mc.d_a, mc.d_v) {
            return Err(Error::Config(format!(
                "corpus features are {}×{} (audio×video) but the model expects {}×{}",
                manifest.d_a, manifest.d_v, mc.d_a, mc.d_v
            )));
        }
    }
    read_corpus(&data.join(file))
}

fn train(a: TrainArgs) -> Result<()> {
    let (mc, tc) = a.shared.resolve()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::resume(path, tc)?;
            if t.finished() {
                eprintln!(
                    "note: {} already completed the configured schedule; nothing left to train",
                    path.display()
                );
            }
            t
        }
        None => Trainer::new(mc, tc)?,
    };
    // Validate the corpus against the model actually being trained (on
    // resume that is the checkpoint's config, not the CLI-resolved one).
    let clean = load_split(&a.data, "train", Some(&trainer.model.cfg))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    train_full(&mut trainer, &clean, Some(&a.out), |_, stats| {
        println!("{}", serde_json::to_string(stats).expect("stats serialize"));
        true
    })?;
    let final_path = a.out.join("final.ck");
    trainer.save(&final_path)?;
    println!("{}", serde_json::json!({ "final_checkpoint": final_path }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.restore_model()?;
    let data = load_split(&a.data, &a.split, Some(&model.cfg))?;
    let report = evaluate(&model, &data, a.mode, a.frame_ms)?;
    println!("{}", json_pretty(&report)?);
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
        write_text(&out.join("report.json"), &json_pretty(&report)?)?;
        write_text(&out.join("segment_histogram.csv"), &report.segment_histogram.to_csv())?;
        write_text(&out.join("word_histogram.csv"), &report.word_histogram.to_csv())?;
    }
    Ok(())
}

fn stream(a: StreamArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.restore_model()?;
    let samples = if a.input == "-" {
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut std::io::stdin().lock(), &mut bytes)
            .map_err(|e| Error::Data(format!("stdin: {e}")))?;
        read_corpus_bytes(&bytes, "stdin")?
    } else {
        read_corpus(Path::new(&a.input))?
    };
    let s = samples.get(a.sample).ok_or_else(|| {
        Error::Config(format!("sample {} out of range (input has {})", a.sample, samples.len()))
    })?;
    if s.audio.shape()[1] != model.cfg.d_a {
        return Err(Error::Config(format!(
            "input frames are {}-dimensional but the model expects {}",
            s.audio.shape()[1],
            model.cfg.d_a
        )));
    }

    let av = model.cfg.modality == Modality::Av;
    let (d_a, d_v) = (model.cfg.d_a, model.cfg.d_v);
    let mut st = StreamState::new(&model.cfg)?;
    st.set_frame_ms(Some(a.frame_ms));
    let n = s.audio.shape()[0];
    let m = s.video.shape()[0];
    let print_events = |events: Vec<taris::StreamEvent>| -> Result<()> {
        for e in events {
            println!("{}", serde_json::to_string(&e).expect("event serialize"));
        }
        Ok(())
    };
    for i in 0..n {
        let arow = &s.audio.values()[i * d_a..(i + 1) * d_a];
        let vrow = (av && i % 2 == 0 && i / 2 < m)
            .then(|| &s.video.values()[(i / 2) * d_v..(i / 2 + 1) * d_v]);
        print_events(st.ingest(&model, arow, vrow)?)?;
        print_events(st.try_decode(&model, a.mode)?)?;
    }
    let fin = st.finalize(&model, a.mode)?;
    print_events(fin.events.clone())?;
    println!(
        "{}",
        serde_json::json!({
            "transcript": fin.transcript,
            "truncated": fin.truncated,
            "sigma_alpha": fin.sigma_alpha,
            "latency": fin.report,
        })
    );
    Ok(())
}

fn masks(a: MasksArgs) -> Result<()> {
    let (mc, _) = a.shared.resolve()?;
    let n = a.rows;
    let bias: AttentionBias = match a.kind.as_str() {
        "encoder" => encoder_window_mask(n, &mc.encoder)?,
        "video" => encoder_window_mask(n, &mc.video_encoder)?,
        "causal" => causal_mask(n)?,
        "av" => {
            let m = a.cols.unwrap_or(n.div_ceil(2));
            AttentionBias::from_predicate(n, m, |i, j| {
                av_window(i, n, m, mc.window_b).map(|(lo, hi)| lo <= j && j <= hi).unwrap_or(false)
            })
        }
        "segments" => {
            let alphas = a
                .alphas
                .as_deref()
                .ok_or_else(|| Error::Config("--alphas is required for kind=segments".into()))?;
            let text = a
                .text
                .as_deref()
                .ok_or_else(|| Error::Config("--text is required for kind=segments".into()))?;
            let alpha: Vec<f64> = alphas
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad gate value {t:?} in --alphas")))
                })
                .collect::<Result<_>>()?;
            let gate = GateTrace::from_alpha(alpha)?;
            let transcript = alphabet::encode(text)?;
            let w_rows = query_word_rows(&transcript);
            let (bias, _) = cross_bias_for(&w_rows, &gate.segment_ids, &mc.segments);
            bias
        }
        other => {
            return Err(Error::Config(format!(
                "unknown mask kind {other:?} (encoder|video|causal|av|segments)"
            )))
        }
    };
    for row in bias.render_rows() {
        println!("{row}");
    }
    Ok(())
}

fn hist(a: HistArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p)?.restore_model()?),
        None => None,
    };
    let data = load_split(&a.data, &a.split, model.as_ref().map(|m| &m.cfg))?;

    let spans: Vec<_> = data.iter().map(|s| s.spans.clone()).collect();
    let word_hist = taris::metrics::word_length_histogram(&spans, a.frame_ms)?;
    let seg_hist = match &model {
        Some(model) => {
            let av = model.cfg.modality == Modality::Av;
            let mut alphas = Vec::with_capacity(data.len());
            for s in &data {
                let mut tape = taris::Tape::new();
                let video = av.then_some(&s.video);
                let (_, _, gate) = model.memory(&mut tape, &s.audio, video)?;
                alphas.push(gate.alpha);
            }
            Some(taris::metrics::segment_histogram(&alphas, a.frame_ms)?)
        }
        None => None,
    };

    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
            write_text(&dir.join("word_histogram.csv"), &word_hist.to_csv())?;
            if let Some(h) = &seg_hist {
                write_text(&dir.join("segment_histogram.csv"), &h.to_csv())?;
            }
        }
        None => {
            println!("# word_histogram");
            print!("{}", word_hist.to_csv());
            if let Some(h) = &seg_hist {
                println!("# segment_histogram");
                print!("{}", h.to_csv());
            }
        }
    }
    Ok(())
}

fn json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(format!("serialize: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
