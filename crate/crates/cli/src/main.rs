mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::MissingArtifact;
use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "toksum",
    version,
    about = "Retrieval-augmented code summarization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic train/val/test corpus.
    GenCorpus,
    /// Train the base model and write a checkpoint.
    Train,
    /// Build the token datastore from the training split.
    BuildDatastore,
    /// Summarize a split, optionally writing retrieval traces.
    Summarize,
    /// Score a split with BLEU, ROUGE-L and METEOR-s.
    Evaluate,
    /// Grid over fusion weight and temperature.
    Sweep,
    /// Evaluate under datastore value noise.
    Perturb,
    /// Count correct tokens by training-set frequency.
    AnalyzeFreq,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::BuildDatastore => "build-datastore",
            Command::Summarize => "summarize",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Perturb => "perturb",
            Command::AnalyzeFreq => "analyze-freq",
        }
    }
}

#[derive(Args, Debug)]
struct Flags {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    datastore: Option<PathBuf>,
    /// Split to summarize or evaluate.
    #[arg(long, global = true, value_parser = ["train", "val", "test"])]
    split: Option<String>,
    #[arg(long = "train", global = true)]
    train_size: Option<usize>,
    #[arg(long = "val", global = true)]
    val_size: Option<usize>,
    #[arg(long = "test", global = true)]
    test_size: Option<usize>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Layers for every encoder and the decoder.
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    temp: Option<f64>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[arg(long, global = true, value_parser = ["token", "token+sentence"])]
    mode: Option<String>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Key the datastore on the decoder state only.
    #[arg(long, global = true)]
    no_hr: bool,
    /// Datastore scoring function.
    #[arg(long, global = true, value_parser = ["cosine", "l2"])]
    similarity: Option<String>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    /// Decode with the base model alone.
    #[arg(long, global = true)]
    no_retrieval: bool,
    /// Noise fractions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    fraction: Option<Vec<f64>>,
    /// Number of noise seeds per fraction.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    temps: Option<Vec<f64>>,
    /// Write per-sample retrieval traces as JSONL.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl Flags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", path(&self.out));
        put("corpus", path(&self.corpus));
        put("checkpoint", path(&self.checkpoint));
        put("datastore", path(&self.datastore));
        put("split", self.split.clone());
        put("train_size", self.train_size.map(|v| v.to_string()));
        put("val_size", self.val_size.map(|v| v.to_string()));
        put("test_size", self.test_size.map(|v| v.to_string()));
        put("d_model", self.d_model.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("layers", self.layers.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("temp", self.temp.map(|v| v.to_string()));
        put("topk", self.topk.map(|v| v.to_string()));
        put("mode", self.mode.clone());
        put("lambda1", self.lambda1.map(|v| v.to_string()));
        put("lambda2", self.lambda2.map(|v| v.to_string()));
        put("no_hr", self.no_hr.then(|| "true".to_string()));
        put("similarity", self.similarity.clone());
        put("beam", self.beam.map(|v| v.to_string()));
        put("max_len", self.max_len.map(|v| v.to_string()));
        put("retrieval", self.no_retrieval.then(|| "false".to_string()));
        put("fraction", self.fraction.as_deref().map(list));
        put("noise_seeds", self.seeds.map(|v| v.to_string()));
        put("lambdas", self.lambdas.as_deref().map(list));
        put("temps", self.temps.as_deref().map(list));
        out
    }
}

fn resolve(flags: &Flags) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|_| MissingArtifact(path.clone()))?;
        cfg.apply_file(&text)?;
    }
    for (k, v) in flags.overrides() {
        cfg.set(&k, &v)?;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set {kv}: expected KEY=VALUE")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.flags)?;
    commands::run(cli.command.name(), &cfg, cli.flags.trace.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code, path) = if let Some(m) = err.downcast_ref::<MissingArtifact>() {
                ("missing_artifact", 3, Some(m.0.display().to_string()))
            } else if err
                .chain()
                .any(|e| e.downcast_ref::<ConfigError>().is_some())
            {
                ("usage", 2, None)
            } else {
                ("failure", 1, None)
            };
            let line = serde_json::json!({
                "error": kind,
                "command": cli.command.name(),
                "message": format!("{err:#}"),
                "path": path,
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
