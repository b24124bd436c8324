//! Flat `key=value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! malformed values are rejected with their line number; overrides given on
//! the command line report line 0.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{
    load_idx, synth_blobs_split, synth_digits, with_label_noise, BlobParams, CorruptionParams, Dataset, SEVERITIES,
};
use crate::decoder::TieBreak;
use crate::encoder::{EncodeMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::lif::LifConfig;
use crate::loss::LossKind;
use crate::network::{ModelSpec, Preset};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Digits,
    Idx,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Digits => "digits",
            DataSource::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Keep only the first `n` samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub label_noise: f64,
    pub blobs_classes: usize,
    pub blobs_size: usize,
    pub blobs_train_per_class: usize,
    pub blobs_test_per_class: usize,
    pub blobs_spread: f64,
    pub digits_train: usize,
    pub digits_test: usize,
    pub digits_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            train_limit: 0,
            test_limit: 0,
            label_noise: 0.0,
            blobs_classes: 3,
            blobs_size: 4,
            blobs_train_per_class: 100,
            blobs_test_per_class: 50,
            blobs_spread: 0.15,
            digits_train: 10000,
            digits_test: 2000,
            digits_size: 28,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds model initialisation and batch shuffling.
    pub seed: u64,
    pub out_dir: String,
    /// Run directory name; empty picks `<timestamp>-seed<seed>`.
    pub run_name: String,
    pub data: DataConfig,
    pub preset: Preset,
    pub hidden: usize,
    pub channels: [usize; 2],
    pub timesteps: usize,
    pub encoder: EncoderConfig,
    pub lif: LifConfig,
    pub output_override: bool,
    pub output_lif: LifConfig,
    pub train: TrainConfig,
    pub corruption: CorruptionParams,
    pub robustness_seed: u64,
    /// Declared baseline for normalized energy; 0 uses the evaluated run.
    pub energy_baseline_timesteps: f64,
    pub energy_baseline_spikes: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            run_name: String::new(),
            data: DataConfig::default(),
            preset: Preset::MlpMini,
            hidden: 256,
            channels: [16, 32],
            timesteps: 4,
            encoder: EncoderConfig::default(),
            lif: LifConfig::default(),
            output_override: false,
            output_lif: LifConfig::default(),
            train: TrainConfig::default(),
            corruption: CorruptionParams::default(),
            robustness_seed: 0,
            energy_baseline_timesteps: 0.0,
            energy_baseline_spikes: 0.0,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse '{value}': {e}"))
}

fn parse_list<T: FromStr, const N: usize>(value: &str) -> std::result::Result<[T; N], String>
where
    T::Err: Display,
{
    let items = value
        .split(',')
        .map(|s| parse::<T>(s.trim()))
        .collect::<std::result::Result<Vec<T>, String>>()?;
    let got = items.len();
    items
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {got}"))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn choice<T>(value: &str, parsed: Option<T>, options: &str) -> std::result::Result<T, String> {
    parsed.ok_or_else(|| format!("'{value}' is not one of {options}"))
}

fn source(value: &str) -> Option<DataSource> {
    [DataSource::Blobs, DataSource::Digits, DataSource::Idx]
        .into_iter()
        .find(|s| s.name() == value)
}

fn encode_mode(value: &str) -> Option<EncodeMode> {
    match value {
        "features" => Some(EncodeMode::Features),
        "raw" => Some(EncodeMode::Raw),
        _ => None,
    }
}

fn loss_kind(value: &str) -> Option<LossKind> {
    match value {
        "tad" => Some(LossKind::Tad),
        "vanilla" => Some(LossKind::Vanilla),
        _ => None,
    }
}

impl RunConfig {
    /// Every key with its current value, in snapshot order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let c = &self.corruption;
        let mode = match self.encoder.mode {
            EncodeMode::Features => "features",
            EncodeMode::Raw => "raw",
        };
        let loss = match t.loss {
            LossKind::Tad => "tad",
            LossKind::Vanilla => "vanilla",
        };
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out_dir", self.out_dir.clone()),
            ("run.name", self.run_name.clone()),
            ("data.source", d.source.name().into()),
            ("data.train_images", d.train_images.clone()),
            ("data.train_labels", d.train_labels.clone()),
            ("data.test_images", d.test_images.clone()),
            ("data.test_labels", d.test_labels.clone()),
            ("data.train_limit", d.train_limit.to_string()),
            ("data.test_limit", d.test_limit.to_string()),
            ("data.label_noise", d.label_noise.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.blobs.classes", d.blobs_classes.to_string()),
            ("data.blobs.size", d.blobs_size.to_string()),
            ("data.blobs.train_per_class", d.blobs_train_per_class.to_string()),
            ("data.blobs.test_per_class", d.blobs_test_per_class.to_string()),
            ("data.blobs.spread", d.blobs_spread.to_string()),
            ("data.digits.train", d.digits_train.to_string()),
            ("data.digits.test", d.digits_test.to_string()),
            ("data.digits.size", d.digits_size.to_string()),
            ("model.preset", self.preset.name().into()),
            ("model.hidden", self.hidden.to_string()),
            ("model.channels", join(&self.channels)),
            ("model.timesteps", self.timesteps.to_string()),
            ("encoder.channels", self.encoder.channels.to_string()),
            ("encoder.kernel", self.encoder.kernel.to_string()),
            ("encoder.stride", self.encoder.stride.to_string()),
            ("encoder.pad", self.encoder.pad.to_string()),
            ("encoder.mode", mode.into()),
            ("lif.tau_leak", self.lif.tau_leak.to_string()),
            ("lif.v_th", self.lif.v_th.to_string()),
            ("lif.surrogate_width", self.lif.surrogate_width.to_string()),
            ("lif.detach_reset", self.lif.detach_reset.to_string()),
            ("output.override", self.output_override.to_string()),
            ("output.tau_leak", self.output_lif.tau_leak.to_string()),
            ("output.v_th", self.output_lif.v_th.to_string()),
            ("output.surrogate_width", self.output_lif.surrogate_width.to_string()),
            ("output.detach_reset", self.output_lif.detach_reset.to_string()),
            ("loss.kind", loss.into()),
            ("loss.temperature", t.tad.temperature.to_string()),
            ("loss.detach_weights", t.tad.detach_weights.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.target_accuracy", t.target_accuracy.to_string()),
            ("decode.tiebreak", t.tiebreak.name().into()),
            ("robustness.seed", self.robustness_seed.to_string()),
            ("robustness.gaussian_sigma", join(&c.gaussian_sigma)),
            ("robustness.shot_lambda", join(&c.shot_lambda)),
            ("robustness.brightness_shift", join(&c.brightness_shift)),
            ("robustness.contrast_factor", join(&c.contrast_factor)),
            ("robustness.pixelate_block", join(&c.pixelate_block)),
            ("energy.baseline_timesteps", self.energy_baseline_timesteps.to_string()),
            ("energy.baseline_spikes", self.energy_baseline_spikes.to_string()),
        ]
    }

    fn assign(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        let t = &mut self.train;
        let c = &mut self.corruption;
        match key {
            "run.seed" => self.seed = parse(v)?,
            "run.out_dir" => self.out_dir = v.into(),
            "run.name" => self.run_name = v.into(),
            "data.source" => d.source = choice(v, source(v), "blobs, digits, idx")?,
            "data.train_images" => d.train_images = v.into(),
            "data.train_labels" => d.train_labels = v.into(),
            "data.test_images" => d.test_images = v.into(),
            "data.test_labels" => d.test_labels = v.into(),
            "data.train_limit" => d.train_limit = parse(v)?,
            "data.test_limit" => d.test_limit = parse(v)?,
            "data.label_noise" => d.label_noise = parse(v)?,
            "data.seed" => d.seed = parse(v)?,
            "data.blobs.classes" => d.blobs_classes = parse(v)?,
            "data.blobs.size" => d.blobs_size = parse(v)?,
            "data.blobs.train_per_class" => d.blobs_train_per_class = parse(v)?,
            "data.blobs.test_per_class" => d.blobs_test_per_class = parse(v)?,
            "data.blobs.spread" => d.blobs_spread = parse(v)?,
            "data.digits.train" => d.digits_train = parse(v)?,
            "data.digits.test" => d.digits_test = parse(v)?,
            "data.digits.size" => d.digits_size = parse(v)?,
            "model.preset" => self.preset = choice(v, Preset::parse(v), "mlp-mini, vgg-mini, sew-mini")?,
            "model.hidden" => self.hidden = parse(v)?,
            "model.channels" => self.channels = parse_list(v)?,
            "model.timesteps" => self.timesteps = parse(v)?,
            "encoder.channels" => self.encoder.channels = parse(v)?,
            "encoder.kernel" => self.encoder.kernel = parse(v)?,
            "encoder.stride" => self.encoder.stride = parse(v)?,
            "encoder.pad" => self.encoder.pad = parse(v)?,
            "encoder.mode" => self.encoder.mode = choice(v, encode_mode(v), "features, raw")?,
            "lif.tau_leak" => self.lif.tau_leak = parse(v)?,
            "lif.v_th" => self.lif.v_th = parse(v)?,
            "lif.surrogate_width" => self.lif.surrogate_width = parse(v)?,
            "lif.detach_reset" => self.lif.detach_reset = parse(v)?,
            "output.override" => self.output_override = parse(v)?,
            "output.tau_leak" => self.output_lif.tau_leak = parse(v)?,
            "output.v_th" => self.output_lif.v_th = parse(v)?,
            "output.surrogate_width" => self.output_lif.surrogate_width = parse(v)?,
            "output.detach_reset" => self.output_lif.detach_reset = parse(v)?,
            "loss.kind" => t.loss = choice(v, loss_kind(v), "tad, vanilla")?,
            "loss.temperature" => t.tad.temperature = parse(v)?,
            "loss.detach_weights" => t.tad.detach_weights = parse(v)?,
            "train.lr0" => t.lr0 = parse(v)?,
            "train.weight_decay" => t.weight_decay = parse(v)?,
            "train.beta1" => t.beta1 = parse(v)?,
            "train.beta2" => t.beta2 = parse(v)?,
            "train.eps" => t.eps = parse(v)?,
            "train.epochs" => t.epochs = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.clip_norm" => t.clip_norm = parse(v)?,
            "train.target_accuracy" => t.target_accuracy = parse(v)?,
            "decode.tiebreak" => t.tiebreak = choice(v, TieBreak::parse(v), "spikers, all")?,
            "robustness.seed" => self.robustness_seed = parse(v)?,
            "robustness.gaussian_sigma" => c.gaussian_sigma = parse_list::<f64, SEVERITIES>(v)?,
            "robustness.shot_lambda" => c.shot_lambda = parse_list::<f64, SEVERITIES>(v)?,
            "robustness.brightness_shift" => c.brightness_shift = parse_list::<f64, SEVERITIES>(v)?,
            "robustness.contrast_factor" => c.contrast_factor = parse_list::<f64, SEVERITIES>(v)?,
            "robustness.pixelate_block" => c.pixelate_block = parse_list::<usize, SEVERITIES>(v)?,
            "energy.baseline_timesteps" => self.energy_baseline_timesteps = parse(v)?,
            "energy.baseline_spikes" => self.energy_baseline_spikes = parse(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Sets one key; `line` is used for error reporting.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        self.assign(key.trim(), value.trim())
            .map_err(|message| Error::Config { line, message: format!("{}: {message}", key.trim()) })
    }

    /// Applies one `key=value` override from the command line.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            message: format!("override '{assignment}' is not key=value"),
        })?;
        self.set(k, v, 0)
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(k, v, i + 1)?;
        }
        Ok(cfg)
    }

    /// The resolved configuration, one `key=value` per line; parsing it
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Cross-field checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.lif.validate()?;
        self.output_lif.validate()?;
        self.encoder.validate()?;
        self.corruption.validate()?;
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            return Err(Error::contract("data.label_noise must lie in [0, 1]"));
        }
        if self.energy_baseline_timesteps < 0.0 || self.energy_baseline_spikes < 0.0 {
            return Err(Error::contract("energy baselines must be >= 0"));
        }
        Ok(())
    }

    pub fn model_spec(&self, input_shape: [usize; 3], num_classes: usize) -> ModelSpec {
        let mut spec = ModelSpec::preset_with(
            self.preset,
            input_shape,
            num_classes,
            self.timesteps,
            self.hidden,
            self.channels,
        );
        spec.encoder = EncoderConfig {
            timesteps: self.timesteps,
            ..self.encoder.clone()
        };
        spec.lif = self.lif;
        spec.output_lif = self.output_override.then_some(self.output_lif);
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Loads or generates `(train, test)`, applying limits and label noise
    /// (train split only).
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.source {
            DataSource::Blobs => {
                let p = BlobParams {
                    classes: d.blobs_classes,
                    size: d.blobs_size,
                    spread: d.blobs_spread,
                    seed: d.seed,
                };
                synth_blobs_split(d.blobs_train_per_class, d.blobs_test_per_class, &p)?
            }
            DataSource::Digits => {
                let mut train = synth_digits(d.digits_train, d.digits_size, d.seed)?;
                let mut test = synth_digits(d.digits_test, d.digits_size, d.seed.wrapping_add(1_000_003))?;
                train.split = "train".into();
                test.split = "test".into();
                (train, test)
            }
            DataSource::Idx => {
                let paths = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
                if paths.iter().any(|p| p.is_empty()) {
                    return Err(Error::contract(
                        "data.source=idx needs data.train_images, data.train_labels, data.test_images, data.test_labels",
                    ));
                }
                let mut train = load_idx(PathBuf::from(&d.train_images), PathBuf::from(&d.train_labels))?;
                let mut test = load_idx(PathBuf::from(&d.test_images), PathBuf::from(&d.test_labels))?;
                let classes = train.classes.max(test.classes);
                train.classes = classes;
                test.classes = classes;
                train.split = "train".into();
                test.split = "test".into();
                (train, test)
            }
        };
        let limit = |ds: Dataset, n: usize| if n == 0 { ds } else { ds.take(n) };
        let mut train = limit(train, d.train_limit);
        let test = limit(test, d.test_limit);
        if d.label_noise > 0.0 {
            train = with_label_noise(&train, d.label_noise, d.seed.wrapping_add(17));
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_override("lif.tau_leak=0.25").unwrap();
        cfg.set_override("model.channels=8,12").unwrap();
        cfg.set_override("robustness.pixelate_block=1,2,3,4,5").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v, 1).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("# comment\n\nlif.v_th=1\nlif.bogus=2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, .. }), "{err}");
        let err = RunConfig::parse("train.epochs=ten").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("model.channels=1,2,3").is_err());
        assert!(RunConfig::default().set_override("loss.kind=hinge").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("train.epochs=5").unwrap();
        cfg.set_override("train.epochs=1").unwrap();
        assert_eq!(cfg.train.epochs, 1);
    }

    #[test]
    fn spec_reflects_keys() {
        let mut cfg = RunConfig::default();
        cfg.set_override("model.timesteps=6").unwrap();
        cfg.set_override("output.override=true").unwrap();
        cfg.set_override("output.v_th=0.5").unwrap();
        let spec = cfg.model_spec([1, 4, 4], 3);
        assert_eq!(spec.timesteps, 6);
        assert_eq!(spec.encoder.timesteps, 6);
        assert_eq!(spec.output_lif().v_th, 0.5);
        assert_eq!(spec.lif.v_th, 1.0);
        spec.validate().unwrap();
    }

    #[test]
    fn blobs_load_with_limits_and_noise() {
        let mut cfg = RunConfig::default();
        cfg.set_override("data.train_limit=30").unwrap();
        let (tr, te) = cfg.load_datasets().unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(te.len(), 150);
        cfg.set_override("data.source=idx").unwrap();
        assert!(cfg.load_datasets().is_err());
    }
}
