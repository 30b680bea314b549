//! Configuration plumbing: the two built-in presets (`desk` for laptop-core
//! experiments, `paper` for the full-scale architecture), training
//! hyperparameters, and layered overrides with the precedence
//! CLI flag > config file > preset default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mask::{ConnectivitySpec, Extent, SegmentSpec};
use crate::model::{Fusion, GateActivation, Modality, ModelConfig};
use crate::transformer::StackConfig;
use crate::{Error, Result};

/// Built-in starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small model and schedule sized for minutes on one CPU core.
    Desk,
    /// The full-scale architecture (6×256 stacks, 120-epoch schedule,
    /// 4-stage noise curriculum). Selectable, but not sized for a laptop.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk|paper)"))),
        }
    }
}

/// Optimization schedule and curriculum, separate from model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs per curriculum stage.
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Rate after `decay_epoch` completed epochs (late-stage fine-tuning).
    pub lr_decayed: f64,
    pub decay_epoch: usize,
    pub seed: u64,
    /// Acoustic noise per curriculum stage, in order; `None` = clean. Noise
    /// is applied to the training split on the fly, so one clean corpus
    /// serves the whole curriculum.
    pub snr_stages: Vec<Option<f64>>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decayed > 0.0 && self.lr_decayed.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must be positive and finite, got {} / {}",
                self.lr, self.lr_decayed
            )));
        }
        if self.snr_stages.is_empty() {
            return Err(Error::Config("at least one curriculum stage is required".into()));
        }
        for s in &self.snr_stages {
            if let Some(db) = s {
                if !db.is_finite() {
                    return Err(Error::Config(format!("stage SNR must be finite, got {db}")));
                }
            }
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed epochs of the current stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

/// The desk model: 2-layer 64-wide stacks, 11-frame encoder look-ahead with
/// infinite look-back, one segment of decoder context each way.
pub fn model_preset(preset: Preset) -> ModelConfig {
    let (layers, h, d_ff, d_a, d_v) = match preset {
        Preset::Desk => (2, 64, 64, 16, 8),
        Preset::Paper => (6, 256, 256, 240, 128),
    };
    ModelConfig {
        modality: Modality::Audio,
        fusion: Fusion::Add,
        gate: GateActivation::Sigmoid,
        lambda: 0.01,
        window_b: 2,
        encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(11)),
        video_encoder: ConnectivitySpec::new(Extent::Infinite, Extent::Finite(11)),
        segments: SegmentSpec::new(Extent::Finite(1), Extent::Finite(1)),
        stack: StackConfig::new(layers, h, d_ff, 0.1),
        d_a,
        d_v,
    }
}

/// Matching schedules: the desk run decays late (80% through) like the full
/// schedule's 100-of-120; the full schedule adds the 4-stage noise
/// curriculum.
pub fn train_preset(preset: Preset) -> TrainConfig {
    match preset {
        Preset::Desk => TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            lr_decayed: 1e-4,
            decay_epoch: 40,
            seed: 0,
            snr_stages: vec![None],
        },
        Preset::Paper => TrainConfig {
            epochs: 120,
            batch_size: 32,
            lr: 1e-3,
            lr_decayed: 1e-4,
            decay_epoch: 100,
            seed: 0,
            snr_stages: vec![None, Some(10.0), Some(0.0), Some(-5.0)],
        },
    }
}

/// A sparse override set: every field optional, unknown fields rejected.
/// The same shape serves JSON config files and collected CLI flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub modality: Option<Modality>,
    pub fusion: Option<Fusion>,
    pub gate: Option<GateActivation>,
    pub lambda: Option<f64>,
    pub window_b: Option<usize>,
    pub e_lb: Option<Extent>,
    pub e_la: Option<Extent>,
    pub video_e_lb: Option<Extent>,
    pub video_e_la: Option<Extent>,
    pub d_lb: Option<Extent>,
    pub d_la: Option<Extent>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub dff: Option<usize>,
    pub dropout: Option<f64>,
    pub d_a: Option<usize>,
    pub d_v: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decayed: Option<f64>,
    pub decay_epoch: Option<usize>,
    pub seed: Option<u64>,
    pub snr_stages: Option<Vec<Option<f64>>>,
}

impl PartialConfig {
    /// Loads overrides from a JSON file.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Writes this override set onto a model and training config.
    pub fn apply(&self, m: &mut ModelConfig, t: &mut TrainConfig) {
        macro_rules! set {
            ($target:expr, $field:expr) => {
                if let Some(v) = $field.clone() {
                    $target = v;
                }
            };
        }
        set!(m.modality, self.modality);
        set!(m.fusion, self.fusion);
        set!(m.gate, self.gate);
        set!(m.lambda, self.lambda);
        set!(m.window_b, self.window_b);
        set!(m.encoder.look_back, self.e_lb);
        set!(m.encoder.look_ahead, self.e_la);
        set!(m.video_encoder.look_back, self.video_e_lb);
        set!(m.video_encoder.look_ahead, self.video_e_la);
        set!(m.segments.look_back, self.d_lb);
        set!(m.segments.look_ahead, self.d_la);
        set!(m.stack.layers, self.layers);
        set!(m.stack.h, self.hidden);
        set!(m.stack.d_ff, self.dff);
        set!(m.stack.dropout, self.dropout);
        set!(m.d_a, self.d_a);
        set!(m.d_v, self.d_v);
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.lr, self.lr);
        set!(t.lr_decayed, self.lr_decayed);
        set!(t.decay_epoch, self.decay_epoch);
        set!(t.seed, self.seed);
        set!(t.snr_stages, self.snr_stages);
    }
}

/// Builds the final configuration: preset defaults, then file overrides,
/// then CLI overrides, validated as a whole.
pub fn resolve(
    preset: Preset,
    file: Option<&PartialConfig>,
    cli: &PartialConfig,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut m = model_preset(preset);
    let mut t = train_preset(preset);
    if let Some(f) = file {
        f.apply(&mut m, &mut t);
    }
    cli.apply(&mut m, &mut t);
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_cleanly() {
        let (m, t) = resolve(Preset::Desk, None, &PartialConfig::default()).unwrap();
        assert_eq!(m.stack.layers, 2);
        assert_eq!(m.stack.h, 64);
        assert_eq!(m.encoder.look_ahead, Extent::Finite(11));
        assert_eq!(m.encoder.look_back, Extent::Infinite);
        assert_eq!(m.lambda, 0.01);
        assert_eq!(t.epochs, 50);
        assert_eq!(t.snr_stages, vec![None]);
        let (m, t) = resolve(Preset::Paper, None, &PartialConfig::default()).unwrap();
        assert_eq!((m.stack.layers, m.stack.h, m.stack.d_ff), (6, 256, 256));
        assert_eq!(m.stack.dropout, 0.1);
        assert_eq!(t.epochs, 120);
        assert_eq!(t.snr_stages, vec![None, Some(10.0), Some(0.0), Some(-5.0)]);
        assert_eq!("desk".parse::<Preset>().unwrap(), Preset::Desk);
        assert!("giant".parse::<Preset>().is_err());
    }

    #[test]
    fn cli_beats_file_beats_preset() {
        let file = PartialConfig {
            layers: Some(3),
            lambda: Some(0.5),
            epochs: Some(9),
            ..PartialConfig::default()
        };
        let cli = PartialConfig { layers: Some(4), ..PartialConfig::default() };
        let (m, t) = resolve(Preset::Desk, Some(&file), &cli).unwrap();
        assert_eq!(m.stack.layers, 4, "CLI wins over file");
        assert_eq!(m.lambda, 0.5, "file wins over preset");
        assert_eq!(t.epochs, 9);
        assert_eq!(m.stack.h, 64, "untouched fields keep preset values");
    }

    #[test]
    fn json_round_trip_with_infinite_extents() {
        let text = r#"{
            "modality": "av",
            "e_la": 4,
            "e_lb": "inf",
            "snr_stages": [null, 10.0],
            "seed": 7
        }"#;
        let p: PartialConfig = serde_json::from_str(text).unwrap();
        assert_eq!(p.e_la, Some(Extent::Finite(4)));
        assert_eq!(p.e_lb, Some(Extent::Infinite));
        assert_eq!(p.snr_stages, Some(vec![None, Some(10.0)]));
        let (m, t) = resolve(Preset::Desk, Some(&p), &PartialConfig::default()).unwrap();
        assert_eq!(m.modality, Modality::Av);
        assert_eq!(m.encoder.look_ahead, Extent::Finite(4));
        assert_eq!(t.snr_stages, vec![None, Some(10.0)]);
        assert_eq!(t.seed, 7);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        let bad: std::result::Result<PartialConfig, _> =
            serde_json::from_str(r#"{"lerning_rate": 0.1}"#);
        assert!(bad.is_err(), "typoed fields must not pass silently");

        let cli = PartialConfig { dropout: Some(1.5), ..PartialConfig::default() };
        assert!(matches!(
            resolve(Preset::Desk, None, &cli),
            Err(Error::Config(_))
        ));
        let cli = PartialConfig { epochs: Some(0), ..PartialConfig::default() };
        assert!(resolve(Preset::Desk, None, &cli).is_err());
        let cli = PartialConfig { snr_stages: Some(vec![]), ..PartialConfig::default() };
        assert!(resolve(Preset::Desk, None, &cli).is_err());
    }

    #[test]
    fn lr_schedule_steps_down_at_decay_epoch() {
        let t = train_preset(Preset::Desk);
        assert_eq!(t.lr_at(0), 1e-3);
        assert_eq!(t.lr_at(39), 1e-3);
        assert_eq!(t.lr_at(40), 1e-4);
        assert_eq!(t.lr_at(49), 1e-4);
    }
}
