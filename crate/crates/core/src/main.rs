use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use relic::analysis::{emit_report, AnalysisReport, EmbeddingSet};
use relic::augmentation::{heuristic_saliency, write_masks};
use relic::harness::{
    embed_dataset, linear_probe, load_checkpoint, load_cifar10_binary, pretrain, raw_probe, Dataset, PretrainOptions,
    RunConfig,
};
use relic::{Error, Result};

#[derive(Parser)]
#[command(name = "relic", version, about = "Self-supervised pretraining, probing and latent-space analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set loss.beta=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Linear probe on the frozen encoder of a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Also probe the raw inputs.
        #[arg(long)]
        raw: bool,
    },
    /// Nearest-neighbour and discriminant-ratio report for a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Also write a report for the raw inputs into `<out>/raw`.
        #[arg(long)]
        raw: bool,
    },
    /// Estimate saliency masks for a CIFAR-10 binary file.
    GenMasks {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 binary file, or `synth[:seed]` for the synthetic clusters.
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// Config whose probe settings are used; defaults to the matching preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Leading share of items used as the probe training split.
    #[arg(long)]
    train_fraction: Option<f64>,
}

impl DataArgs {
    fn resolve(&self) -> Result<(RunConfig, Dataset)> {
        let synth_seed = match self.dataset.as_str() {
            "synth" => Some(None),
            s => s.strip_prefix("synth:").map(Some),
        };
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if synth_seed.is_some() => RunConfig::synth(),
            None => RunConfig::cifar_small(),
        };
        if let Some(f) = self.train_fraction {
            cfg.set("dataset.train_fraction", &f.to_string())?;
        }
        let data = match synth_seed {
            Some(seed) => {
                if let Some(seed) = seed {
                    cfg.set("synth.seed", seed)?;
                }
                relic::harness::synth_clusters(&cfg.synth)?.dataset
            }
            None => load_cifar10_binary(Path::new(&self.dataset))?,
        };
        Ok((cfg, data))
    }
}

fn run_pretrain(config: &Path, resume: Option<&Path>, overrides: &[String], stop_at: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    if cfg.checkpoint_path.is_none() {
        warn!("output.checkpoint is not set; trained weights will not be saved");
    }
    let data = cfg.load_dataset()?;
    let (train, _) = data.train_val(cfg.train_fraction)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let out = pretrain(&cfg, &train.unlabeled(), PretrainOptions { resume, stop_at })?;
    match out.metrics.last() {
        Some(last) => println!(
            "step {} loss {} contrastive {} invariance {}",
            out.state.step, last.loss, last.contrastive, last.invariance
        ),
        None => println!("step {} (no steps run)", out.state.step),
    }
    Ok(())
}

fn run_probe(ckpt: &Path, data: &DataArgs, raw: bool) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (cfg, dataset) = data.resolve()?;
    let (train, val) = dataset.train_val(cfg.train_fraction)?;
    info!("probing on {} train / {} val items", train.len(), val.len());
    if raw {
        println!("raw_accuracy {}", raw_probe(&train, &val, &cfg.probe)?);
    }
    println!("probe_accuracy {}", linear_probe(&ck.net, &train, &val, &cfg.probe)?);
    Ok(())
}

fn embedding_set(vectors: relic::tensor::Tensor, data: &Dataset, source: String) -> Result<EmbeddingSet> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Contract("analysis needs labels".into()))?
        .to_vec();
    EmbeddingSet::new(vectors, labels, source)
}

fn print_summary(name: &str, r: &AnalysisReport) {
    println!(
        "{name}: neighbor_purity@{} {} median_ratio {} median_centroid_ratio {}",
        r.k,
        r.purity_at_k(),
        r.per_point.median,
        r.centroid.median
    );
}

fn run_analyze(ckpt: &Path, out: &Path, data: &DataArgs, k: usize, raw: bool) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (cfg, dataset) = data.resolve()?;
    let (_, val) = dataset.train_val(cfg.train_fraction)?;
    let emb = embedding_set(embed_dataset(&ck.net, &val)?, &val, ckpt.display().to_string())?;
    let report = AnalysisReport::compute(&emb, k)?;
    let files = emit_report(&report, out)?;
    print_summary("embedding", &report);
    info!("wrote {}", files.summary_csv.display());
    if raw {
        let raw_set = embedding_set(val.flat_matrix()?, &val, format!("raw:{}", data.dataset))?;
        let raw_report = AnalysisReport::compute(&raw_set, k)?;
        emit_report(&raw_report, &out.join("raw"))?;
        print_summary("raw", &raw_report);
    }
    Ok(())
}

fn run_gen_masks(dataset: &Path, out: &Path) -> Result<()> {
    let data = load_cifar10_binary(dataset)?;
    let masks: Vec<_> = data.images().iter().map(heuristic_saliency).collect();
    write_masks(out, &masks)?;
    let mean = masks.iter().map(|m| m.foreground_fraction()).sum::<f64>() / masks.len().max(1) as f64;
    println!("wrote {} masks, mean foreground fraction {mean:.4}", masks.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain {
            config,
            resume,
            overrides,
            stop_at,
        } => run_pretrain(config, resume.as_deref(), overrides, *stop_at),
        Command::Probe { ckpt, data, raw } => run_probe(ckpt, data, *raw),
        Command::Analyze { ckpt, out, data, k, raw } => run_analyze(ckpt, out, data, *k, *raw),
        Command::GenMasks { dataset, out } => run_gen_masks(dataset, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
