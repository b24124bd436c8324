use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use spikelat::analysis::{
    energy_report, robustness_eval, similarity_from_records, write_energy_csv, write_robustness_csv,
    write_similarity_csv, write_similarity_gnuplot,
};
use spikelat::checkpoint::{load_checkpoint, save_checkpoint};
use spikelat::config::RunConfig;
use spikelat::data::Dataset;
use spikelat::decoder::{mean_exit_time, write_decisions_csv};
use spikelat::trainer::{decisions, evaluate, forward_records, train_with, write_metrics_csv, Decode};
use spikelat::{build_model, Metrics, Model, ModelSpec};

use crate::{Analysis, DecodeArg, SplitArg, Source};

const SIMILARITY_DEFAULT_LIMIT: usize = 256;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait ExitClass<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> ExitClass<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::usage(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::runtime(e.into()))
    }
}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    for o in overrides {
        cfg.set_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn spec_for(cfg: &RunConfig, ds: &Dataset) -> anyhow::Result<ModelSpec> {
    let spec = cfg.model_spec(ds.sample_shape(), ds.classes);
    spec.validate()?;
    Ok(spec)
}

/// `<out_dir>/<name>`, where an empty name becomes `<timestamp>-seed<seed>`;
/// an existing directory gets a numeric suffix instead of being reused.
fn create_run_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let base = if cfg.run_name.is_empty() {
        format!("{}-seed{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), cfg.seed)
    } else {
        cfg.run_name.clone()
    };
    let root = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    for k in 1.. {
        let name = if k == 1 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    body(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn train(config: &Path, overrides: &[String]) -> Outcome {
    let cfg = load_config(config, overrides).usage()?;
    let (train_ds, test_ds) = cfg.load_datasets().usage()?;
    let spec = spec_for(&cfg, &train_ds).usage()?;
    let mut model = build_model(&spec, cfg.seed).usage()?;
    let dir = create_run_dir(&cfg).usage()?;
    fs::write(dir.join("config.txt"), cfg.to_text()).usage()?;
    println!("run directory {}", dir.display());
    println!(
        "{} train / {} test samples, {} parameters",
        train_ds.len(),
        test_ds.len(),
        model.param_count()
    );

    let metrics_path = dir.join("metrics.csv");
    let mut history: Vec<Metrics> = Vec::new();
    let mut write_error = None;
    let result = train_with(&mut model, &train_ds, &test_ds, &cfg.train_config(), |m| {
        println!(
            "epoch {:>3}  loss {:.4}  test_acc {:.4}  exit {:.3}  sparsity {:.4}",
            m.epoch, m.train_loss, m.test_accuracy, m.mean_exit_time, m.sparsity
        );
        history.push(*m);
        match write_file(&metrics_path, |w| Ok(write_metrics_csv(w, &history)?)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_error = Some(e);
                ControlFlow::Break(())
            }
        }
    });
    if let Some(e) = write_error {
        return Err(Failure::runtime(e));
    }
    result.context("training aborted").runtime()?;
    save_checkpoint(&model, dir.join("model.ckpt")).runtime()?;
    println!("wrote {}", dir.display());
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    model: Model,
    data: Dataset,
    dir: PathBuf,
}

fn load(source: &Source, default_limit: Option<usize>) -> Outcome<Loaded> {
    let dir = source
        .checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let config = source.config.clone().unwrap_or_else(|| dir.join("config.txt"));
    let cfg = load_config(&config, &source.overrides).usage()?;
    let (train_ds, test_ds) = cfg.load_datasets().usage()?;
    let spec = spec_for(&cfg, &train_ds).usage()?;
    let model = load_checkpoint(&source.checkpoint, &spec)
        .with_context(|| format!("loading {}", source.checkpoint.display()))
        .usage()?;
    let data = if source.split == SplitArg::Train { train_ds } else { test_ds };
    let data = match source.limit.or(default_limit) {
        Some(n) if n < data.len() => data.take(n),
        _ => data,
    };
    if data.is_empty() {
        return Err(Failure::usage(anyhow!("selected split is empty")));
    }
    Ok(Loaded { cfg, model, data, dir })
}

pub fn eval(source: &Source, decode: DecodeArg, decisions_out: Option<&Path>) -> Outcome {
    let Loaded { cfg, model, data, .. } = load(source, None)?;
    let decode = match decode {
        DecodeArg::Latency => Decode::Latency,
        DecodeArg::Rate => Decode::Rate,
    };
    let report = evaluate(&model, &data, decode, cfg.train.tiebreak).runtime()?;
    let fallbacks = report.decisions.iter().filter(|d| d.no_spike_fallback).count();
    println!("samples {}", data.len());
    println!("accuracy {}", report.accuracy);
    println!("mean_exit_time {}", report.mean_exit_time);
    println!("sparsity {}", report.sparsity);
    println!("no_spike_fallbacks {fallbacks}");
    if let Some(path) = decisions_out {
        write_file(path, |w| Ok(write_decisions_csv(w, &report.decisions, &data.labels)?)).usage()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn analyze(which: Analysis, source: &Source, layer: usize, out: Option<&Path>) -> Outcome {
    let default_limit = matches!(which, Analysis::Similarity).then_some(SIMILARITY_DEFAULT_LIMIT);
    let Loaded { cfg, model, data, dir } = load(source, default_limit)?;
    let out = out.map(Path::to_path_buf).unwrap_or(dir);
    fs::create_dir_all(&out).usage()?;
    match which {
        Analysis::Energy => {
            let records = forward_records(&model, &data, false).runtime()?;
            let decided = decisions(&records, Decode::Latency, cfg.train.tiebreak).runtime()?;
            let timesteps = mean_exit_time(&decided);
            let baseline = (cfg.energy_baseline_timesteps > 0.0 && cfg.energy_baseline_spikes > 0.0)
                .then_some((cfg.energy_baseline_timesteps, cfg.energy_baseline_spikes));
            let report = energy_report(&model, &records, timesteps, baseline).runtime()?;
            let path = out.join("energy.csv");
            write_file(&path, |w| Ok(write_energy_csv(w, &report)?)).runtime()?;
            println!("e_ann_pj {}", report.e_ann);
            println!("e_snn_pj {}", report.e_snn);
            println!("timesteps {}", report.timesteps);
            println!("spikes_per_sample {}", report.spikes);
            for (p, e) in &report.normalized {
                println!("normalized_{} {e}", p.name());
            }
            println!("wrote {}", path.display());
        }
        Analysis::Similarity => {
            let records = forward_records(&model, &data, true).runtime()?;
            let sim = similarity_from_records(&records, layer).usage()?;
            let csv = out.join(format!("similarity_l{layer}.csv"));
            let gp = out.join(format!("similarity_l{layer}.gp"));
            write_file(&csv, |w| Ok(write_similarity_csv(w, &sim)?)).runtime()?;
            write_file(&gp, |w| Ok(write_similarity_gnuplot(w, &sim)?)).runtime()?;
            println!("layer {layer}, {} samples, T = {}", sim.samples, sim.m.shape()[0]);
            println!("wrote {} and {}", csv.display(), gp.display());
        }
        Analysis::Robustness => {
            let table =
                robustness_eval(&model, &data, &cfg.corruption, cfg.robustness_seed, cfg.train.tiebreak).runtime()?;
            let path = out.join("robustness.csv");
            write_file(&path, |w| Ok(write_robustness_csv(w, &table)?)).runtime()?;
            println!("clean_error {}", table.clean_error);
            println!("mce {}", table.mce);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn encode_demo(
    config: &Path,
    checkpoint: Option<&Path>,
    overrides: &[String],
    split: SplitArg,
    sample: usize,
    out: Option<&Path>,
) -> Outcome {
    let cfg = load_config(config, overrides).usage()?;
    let (train_ds, test_ds) = cfg.load_datasets().usage()?;
    let spec = spec_for(&cfg, &train_ds).usage()?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p, &spec)
            .with_context(|| format!("loading {}", p.display()))
            .usage()?,
        None => build_model(&spec, cfg.seed).usage()?,
    };
    let data = if split == SplitArg::Train { train_ds } else { test_ds };
    if sample >= data.len() {
        return Err(Failure::usage(anyhow!("sample {sample} out of range for {} samples", data.len())));
    }
    let (image, labels) = data.batch(&[sample]);
    let enc = model.encode(&image).runtime()?;
    let steps = enc.spikes.shape()[0];
    let neurons = enc.features.len();
    let write = |w: &mut dyn Write| -> anyhow::Result<()> {
        writeln!(w, "# sample {sample}, label {}, T = {steps}", labels[0])?;
        let times: Vec<String> = (1..=steps).map(|t| format!("t{t}")).collect();
        writeln!(w, "neuron,feature,{}", times.join(","))?;
        for j in 0..neurons {
            let bits: Vec<String> = (0..steps)
                .map(|t| format!("{}", enc.spikes.data()[t * neurons + j]))
                .collect();
            writeln!(w, "{j},{},{}", enc.features.data()[j], bits.join(","))?;
        }
        Ok(())
    };
    match out {
        Some(path) => write_file(path, |w| write(w)).usage(),
        None => write(&mut io::stdout().lock()).runtime(),
    }
}
