//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use toksum::fusion::FusionConfig;
use toksum::model::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub out: PathBuf,
    pub split: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub retrieval: bool,
    pub fractions: Vec<f64>,
    pub noise_seeds: usize,
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data"),
            checkpoint: None,
            datastore: None,
            out: PathBuf::from("out"),
            split: "test".into(),
            seed: 0,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            min_freq: 1,
            max_vocab: 50_000,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            retrieval: true,
            fractions: vec![0.0, 0.05, 0.10, 0.20],
            noise_seeds: 5,
            lambdas: vec![0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0],
            temperatures: vec![1.0, 5.0, 10.0, 20.0, 50.0],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("invalid value {value:?} for {key}: {e}")).into())
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Unknown key or malformed value; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "corpus" => self.corpus = v.into(),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "datastore" => self.datastore = Some(v.into()),
            "out" => self.out = v.into(),
            "split" => self.split = v.into(),
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "train_size" => self.n_train = parse(key, v)?,
            "val_size" => self.n_val = parse(key, v)?,
            "test_size" => self.n_test = parse(key, v)?,
            "min_freq" => self.min_freq = parse(key, v)?,
            "max_vocab" => self.max_vocab = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "heads" => self.model.n_heads = parse(key, v)?,
            "layers" => {
                let n = parse(key, v)?;
                self.model.n_enc_layers = n;
                self.model.n_dec_layers = n;
                self.model.n_gat_layers = n;
            }
            "enc_layers" => self.model.n_enc_layers = parse(key, v)?,
            "dec_layers" => self.model.n_dec_layers = parse(key, v)?,
            "gat_layers" => self.model.n_gat_layers = parse(key, v)?,
            "ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "k_clip" => self.model.k_clip = parse(key, v)?,
            "dropout" => self.model.dropout = parse(key, v)?,
            "max_code_len" => self.model.max_code_len = parse(key, v)?,
            "max_summary_len" => self.model.max_summary_len = parse(key, v)?,
            "lr" => self.train.learning_rate = parse(key, v)?,
            "batch" => self.train.batch_size = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "epochs" => self.train.max_epochs = parse(key, v)?,
            "lambda" => self.fusion.lambda = parse(key, v)?,
            "temp" => self.fusion.temperature = parse(key, v)?,
            "topk" => self.fusion.top_k = parse(key, v)?,
            "mode" => self.fusion.mode = parse(key, v)?,
            "lambda1" => self.fusion.lambda1 = parse(key, v)?,
            "lambda2" => self.fusion.lambda2 = parse(key, v)?,
            "no_hr" => self.fusion.no_hr = parse(key, v)?,
            "similarity" => self.fusion.similarity = parse(key, v)?,
            "beam" => self.fusion.beam = parse(key, v)?,
            "max_len" => self.fusion.max_len = parse(key, v)?,
            "retrieval" => self.retrieval = parse(key, v)?,
            "fraction" => self.fractions = parse_list(key, v)?,
            "noise_seeds" => self.noise_seeds = parse(key, v)?,
            "lambdas" => self.lambdas = parse_list(key, v)?,
            "temps" => self.temperatures = parse_list(key, v)?,
            other => return Err(ConfigError(format!("unknown configuration key {other:?}")).into()),
        }
        Ok(())
    }

    /// Apply a config file: `key = value` lines, `#` comments, blank lines.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(
                    ConfigError(format!("config line {}: expected `key = value`", i + 1)).into(),
                );
            };
            self.set(k, v)
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn datastore_path(&self) -> PathBuf {
        self.datastore
            .clone()
            .unwrap_or_else(|| self.out.join("datastore.bin"))
    }

    /// Effective configuration in the same format `apply_file` reads.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let f = &self.fusion;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("corpus", self.corpus.display().to_string());
        put("checkpoint", self.checkpoint_path().display().to_string());
        put("datastore", self.datastore_path().display().to_string());
        put("out", self.out.display().to_string());
        put("split", self.split.clone());
        put("seed", self.seed.to_string());
        put("train_size", self.n_train.to_string());
        put("val_size", self.n_val.to_string());
        put("test_size", self.n_test.to_string());
        put("min_freq", self.min_freq.to_string());
        put("max_vocab", self.max_vocab.to_string());
        put("d_model", m.d_model.to_string());
        put("heads", m.n_heads.to_string());
        put("enc_layers", m.n_enc_layers.to_string());
        put("dec_layers", m.n_dec_layers.to_string());
        put("gat_layers", m.n_gat_layers.to_string());
        put("ffn_dim", m.ffn_dim.to_string());
        put("k_clip", m.k_clip.to_string());
        put("dropout", m.dropout.to_string());
        put("max_code_len", m.max_code_len.to_string());
        put("max_summary_len", m.max_summary_len.to_string());
        put("lr", t.learning_rate.to_string());
        put("batch", t.batch_size.to_string());
        put("patience", t.patience.to_string());
        put("epochs", t.max_epochs.to_string());
        put("lambda", f.lambda.to_string());
        put("temp", f.temperature.to_string());
        put("topk", f.top_k.to_string());
        put("mode", f.mode.to_string());
        put("lambda1", f.lambda1.to_string());
        put("lambda2", f.lambda2.to_string());
        put("no_hr", f.no_hr.to_string());
        put("similarity", f.similarity.to_string());
        put("beam", f.beam.to_string());
        put("max_len", f.max_len.to_string());
        put("retrieval", self.retrieval.to_string());
        put("fraction", join(&self.fractions));
        put("noise_seeds", self.noise_seeds.to_string());
        put("lambdas", join(&self.lambdas));
        put("temps", join(&self.temperatures));
        out
    }
}
