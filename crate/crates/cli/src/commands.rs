use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use toksum::analysis::{
    evaluate, generate_all, noise_csv, references, run_noise_experiment, run_sweep,
    summary_token_frequencies, sweep_csv, token_freq_analysis, Decoder,
};
use toksum::corpus::{build_vocab, gen_toy_corpus, load_dataset, CodeSample};
use toksum::datastore::{build_datastore, load_datastore, save_datastore, Datastore};
use toksum::fusion::{FusionMode, SentenceIndex, Tram};
use toksum::model::{load_checkpoint, save_checkpoint, train_model_with, EncodedSample, Model};

use crate::config::RunConfig;

/// A file an earlier pipeline stage should have produced.
#[derive(Debug)]
pub struct MissingArtifact(pub PathBuf);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifact {}", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(MissingArtifact(path.to_path_buf()).into());
    }
    Ok(())
}

/// Write via a sibling temp file and rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path.file_name().context("output path has no file name")?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(contents)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<CodeSample>> {
    let path = cfg.corpus.join(format!("{split}.jsonl"));
    require(&path)?;
    Ok(load_dataset(&path)?)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.checkpoint_path();
    require(&path)?;
    Ok(load_checkpoint(&path)?)
}

fn load_store(cfg: &RunConfig) -> Result<Datastore> {
    let path = cfg.datastore_path();
    require(&path)?;
    Ok(load_datastore(&path)?)
}

fn encode_all(model: &Model, samples: &[CodeSample]) -> Vec<EncodedSample> {
    samples.iter().map(|s| model.encode_sample(s)).collect()
}

/// Retrieval resources for decoding: the datastore and, in three-way mode,
/// the sentence index over the training split.
struct Retrieval {
    datastore: Datastore,
    sentences: Option<SentenceIndex>,
}

impl Retrieval {
    fn load(cfg: &RunConfig, model: &Model) -> Result<Self> {
        let datastore = load_store(cfg)?;
        let sentences = match cfg.fusion.mode {
            FusionMode::TokenSentence => {
                let train = encode_all(model, &load_split(cfg, "train")?);
                Some(SentenceIndex::build(model, &train)?)
            }
            FusionMode::Token => None,
        };
        Ok(Self {
            datastore,
            sentences,
        })
    }

    fn tram<'a>(&'a self, model: &'a Model, cfg: &RunConfig) -> Result<Tram<'a>> {
        Ok(Tram::new(
            model,
            &self.datastore,
            cfg.fusion.clone(),
            self.sentences.as_ref(),
        )?)
    }
}

fn base_decoder(cfg: &RunConfig) -> Decoder<'static> {
    Decoder::Base {
        beam: cfg.fusion.beam,
        max_len: cfg.fusion.max_len,
    }
}

pub fn run(command: &str, cfg: &RunConfig, trace: Option<&Path>) -> Result<()> {
    cfg.model.validate()?;
    cfg.fusion.validate()?;
    match command {
        "gen-corpus" => gen_corpus(cfg)?,
        "train" => train(cfg)?,
        "build-datastore" => datastore(cfg)?,
        "summarize" => summarize(cfg, trace)?,
        "evaluate" => evaluate_cmd(cfg)?,
        "sweep" => sweep(cfg)?,
        "perturb" => perturb(cfg)?,
        "analyze-freq" => analyze_freq(cfg)?,
        other => bail!("unknown command {other}"),
    }
    write_atomic(
        &cfg.out.join(format!("{command}.config")),
        cfg.dump().as_bytes(),
    )
}

fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    gen_toy_corpus(cfg.seed, cfg.n_train, cfg.n_val, cfg.n_test, &cfg.out)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let val = load_split(cfg, "val")?;
    let (cv, sv) = build_vocab(&train, cfg.min_freq, cfg.max_vocab)?;
    let mut model = Model::new(cfg.model.clone(), cv, sv, cfg.seed)?;
    let tr = encode_all(&model, &train);
    let va = encode_all(&model, &val);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let log = train_model_with(&mut model, &tr, &va, &train_cfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val BLEU {:.2}",
            e.epoch,
            e.train_loss,
            e.val_bleu * 100.0
        );
    })?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &ckpt)?;
    write_atomic(&cfg.out.join("train_log.csv"), log.to_csv().as_bytes())?;
    println!(
        "best epoch {} (val BLEU {:.2}), checkpoint {}",
        log.best_epoch,
        log.best_val_bleu * 100.0,
        ckpt.display()
    );
    Ok(())
}

fn datastore(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let train = encode_all(&model, &load_split(cfg, "train")?);
    let ds = build_datastore(&model, &train, cfg.fusion.key_mode())?;
    let path = cfg.datastore_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_datastore(&ds, &path)?;
    println!(
        "{} entries of dimension {} in {}",
        ds.len(),
        ds.dim(),
        path.display()
    );
    Ok(())
}

fn summarize(cfg: &RunConfig, trace: Option<&Path>) -> Result<()> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, &cfg.split)?;
    let mut summaries = String::new();
    let mut traces = String::new();
    let mut emit = |id: &str, tokens: &[String]| {
        let line = json!({ "id": id, "summary": tokens.join(" ") });
        summaries.push_str(&format!("{line}\n"));
        println!("{id}\t{}", tokens.join(" "));
    };
    if cfg.retrieval {
        let retrieval = Retrieval::load(cfg, &model)?;
        let tram = retrieval.tram(&model, cfg)?;
        // Trace lines run back to back; each sample restarts the step count.
        for s in &samples {
            let generation = tram.generate(&model.encode_sample(s))?;
            let tokens = model.summary_vocab.decode(&generation.tokens)?;
            emit(&s.id, &tokens);
            for step in &generation.trace {
                traces.push_str(&serde_json::to_string(step)?);
                traces.push('\n');
            }
        }
    } else {
        if trace.is_some() {
            bail!("--trace needs retrieval; drop --no-retrieval");
        }
        for (s, tokens) in samples
            .iter()
            .zip(generate_all(&model, &samples, &base_decoder(cfg))?)
        {
            emit(&s.id, &tokens);
        }
    }
    write_atomic(&cfg.out.join("summaries.jsonl"), summaries.as_bytes())?;
    if let Some(path) = trace {
        write_atomic(path, traces.as_bytes())?;
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, &cfg.split)?;
    let report = if cfg.retrieval {
        let retrieval = Retrieval::load(cfg, &model)?;
        let tram = retrieval.tram(&model, cfg)?;
        evaluate(&model, &samples, &Decoder::Tram(&tram))?
    } else {
        evaluate(&model, &samples, &base_decoder(cfg))?
    };
    write_atomic(
        &cfg.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    println!("{}", report.summary_line());
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, &cfg.split)?;
    let retrieval = Retrieval::load(cfg, &model)?;
    let rows = run_sweep(
        &model,
        &retrieval.datastore,
        &cfg.fusion,
        &cfg.lambdas,
        &cfg.temperatures,
        &samples,
        retrieval.sentences.as_ref(),
    )?;
    let csv = sweep_csv(&rows);
    write_atomic(&cfg.out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn perturb(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let samples = load_split(cfg, &cfg.split)?;
    let retrieval = Retrieval::load(cfg, &model)?;
    let seeds: Vec<u64> = (0..cfg.noise_seeds as u64).map(|i| cfg.seed + i).collect();
    let rows = run_noise_experiment(
        &model,
        &retrieval.datastore,
        &cfg.fusion,
        &cfg.fractions,
        &seeds,
        &samples,
        retrieval.sentences.as_ref(),
    )?;
    let csv = noise_csv(&rows);
    write_atomic(&cfg.out.join("noise.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn analyze_freq(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let train = load_split(cfg, "train")?;
    let samples = load_split(cfg, &cfg.split)?;
    let mut systems = vec![(
        "Base".to_string(),
        generate_all(&model, &samples, &base_decoder(cfg))?,
    )];
    if cfg.retrieval {
        let retrieval = Retrieval::load(cfg, &model)?;
        let tram = retrieval.tram(&model, cfg)?;
        systems.push((
            "Tram".to_string(),
            generate_all(&model, &samples, &Decoder::Tram(&tram))?,
        ));
    }
    let report = token_freq_analysis(
        &systems,
        &references(&samples),
        &summary_token_frequencies(&train),
    )?;
    let table = report.to_table();
    write_atomic(&cfg.out.join("freq.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
