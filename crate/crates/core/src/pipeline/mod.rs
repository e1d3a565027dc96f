//! Stage runners behind the command-line tool. Every stage reads its inputs
//! from, and writes its artifacts under, the run directory, echoes the
//! resolved config next to them and records input and output hashes in
//! `manifest.json`.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, load_jsonl, load_tsv, split_examples, write_jsonl, BehaviorType, InteractionSequence, Splits,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_ablations, AblationTable, EvalReport};
use crate::model::Model;
use crate::rng;
use crate::tokenizer::{ItemEmbeddingTable, ItemId, SemanticCodebooks};
use crate::train::{pretrain, sft, Metrics, PretrainOutcome, SftOutcome, Stage, TrainCheckpoint};

pub use config::{DataConfig, ModelSection, RunConfig, TokenizerConfig};

pub const SEQUENCES: &str = "data/sequences.jsonl";
pub const ITEMS: &str = "data/items.json";
pub const CODEBOOKS: &str = "tokenizer/codebooks.json";
pub const THETA0: &str = "pretrain/theta0.ckpt";
pub const THETA: &str = "sft/theta.ckpt";
pub const REPORT: &str = "eval/report.json";
pub const MANIFEST: &str = "manifest.json";

const ITEMS_FORMAT: &str = "rclrec-items";
const MANIFEST_FORMAT: &str = "rclrec-manifest";

#[derive(Serialize, Deserialize)]
struct ItemsFile {
    format: String,
    version: u32,
    items: Vec<(ItemId, Vec<f64>)>,
}

pub fn write_items(path: &Path, table: &ItemEmbeddingTable) -> Result<()> {
    let file = ItemsFile {
        format: ITEMS_FORMAT.into(),
        version: 1,
        items: table.items().to_vec(),
    };
    std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

pub fn load_items(path: &Path) -> Result<ItemEmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ItemsFile = serde_json::from_str(&text)?;
    if file.format != ITEMS_FORMAT || file.version != 1 {
        return Err(Error::Format(format!("{} is not an {ITEMS_FORMAT} v1 file", path.display())));
    }
    ItemEmbeddingTable::new(file.items)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    /// Path → SHA-256. Paths inside the run directory are relative to it.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(Error::Format(format!("{} is not an {MANIFEST_FORMAT} v1 file", path.display())));
        }
        Ok(m)
    }

    fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Bookkeeping for one stage run.
struct StageRun<'a> {
    name: &'static str,
    config: &'a RunConfig,
    started: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> StageRun<'a> {
    fn start(name: &'static str, config: &'a RunConfig) -> Result<Self> {
        let dir = config.out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            name,
            config,
            started: now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    /// Checks that an upstream artifact exists and records its hash.
    fn require(&mut self, rel: &str, producer: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::Pipeline(format!(
                "{} needs {}, which is missing; run `rclrec {producer}` first",
                self.name,
                path.display()
            )));
        }
        self.inputs.insert(rel.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    fn external(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, rel: &str) -> PathBuf {
        self.outputs.push(rel.to_string());
        self.path(rel)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.output(rel);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn finish(mut self) -> Result<StageRecord> {
        let echo = format!("{}/config.toml", self.name);
        self.write(&echo, &self.config.to_toml()?)?;
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let record = StageRecord {
            config_hash: self.config.hash()?,
            seed: self.config.seed,
            started: self.started,
            finished: now(),
            inputs: self.inputs,
            outputs,
        };
        let mut manifest = Manifest::load(&self.config.out)?;
        manifest.stages.insert(self.name.to_string(), record.clone());
        manifest.save(&self.config.out)?;
        Ok(record)
    }
}

/// Train/validation/test examples for both training stages.
#[derive(Clone, Debug)]
pub struct ExperimentSplits {
    /// Targets of any behavior, for pretraining.
    pub mixed: Splits,
    /// Pay targets, for fine-tuning and evaluation.
    pub pay: Splits,
    pub num_users: usize,
}

pub fn make_splits(sequences: &[InteractionSequence], max_history: usize) -> Result<ExperimentSplits> {
    let num_users = sequences.iter().map(|s| s.user.0 as usize + 1).max().unwrap_or(0);
    Ok(ExperimentSplits {
        mixed: split_examples(sequences, None, max_history)?,
        pay: split_examples(sequences, Some(BehaviorType::Pay), max_history)?,
        num_users,
    })
}

/// Generates synthetic data, or normalizes the configured input files, into
/// the run directory.
pub fn gen_data(config: &RunConfig) -> Result<StageRecord> {
    let mut run = StageRun::start("data", config)?;
    let (sequences, items) = match (&config.data.sequences, &config.data.items) {
        (Some(seqs), Some(items)) => {
            run.external(seqs)?;
            run.external(items)?;
            let sequences = match seqs.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => load_jsonl(seqs)?,
                _ => load_tsv(seqs)?,
            };
            (sequences, load_items(items)?)
        }
        _ => {
            let (catalog, sequences) = generate_synthetic(&config.data.synthetic, config.seed)?;
            (sequences, catalog.embedding_table()?)
        }
    };
    if sequences.is_empty() || items.is_empty() {
        return Err(Error::Input("the dataset has no sequences or no items".into()));
    }
    write_jsonl(&run.output(SEQUENCES), &sequences)?;
    write_items(&run.output(ITEMS), &items)?;
    run.finish()
}

pub fn load_dataset(out: &Path) -> Result<(Vec<InteractionSequence>, ItemEmbeddingTable)> {
    Ok((load_jsonl(&out.join(SEQUENCES))?, load_items(&out.join(ITEMS))?))
}

pub fn fit_tokenizer(config: &RunConfig) -> Result<StageRecord> {
    let mut run = StageRun::start("tokenizer", config)?;
    let items = load_items(&run.require(ITEMS, "gen-data")?)?;
    let tok = SemanticCodebooks::fit(&items, config.tokenizer.levels, config.tokenizer.codebook_size, config.seed)?;
    let mse = tok.residual_mse(&items)?;
    tok.save(&run.output(CODEBOOKS))?;
    let summary = serde_json::json!({ "vocab_sizes": tok.vocab_sizes(), "residual_mse": mse });
    run.write("tokenizer/summary.json", &serde_json::to_string_pretty(&summary)?)?;
    run.finish()
}

fn load_inputs(run: &mut StageRun) -> Result<(SemanticCodebooks, ExperimentSplits)> {
    let seqs = run.require(SEQUENCES, "gen-data")?;
    run.require(ITEMS, "gen-data")?;
    let tok = SemanticCodebooks::load(&run.require(CODEBOOKS, "fit-tokenizer")?)?;
    let splits = make_splits(&load_jsonl(&seqs)?, run.config.model.max_history)?;
    Ok((tok, splits))
}

/// Builds θ0 from the config and pretrains it on mixed-behavior targets.
pub fn pretrain_model(
    config: &RunConfig,
    tok: &SemanticCodebooks,
    splits: &ExperimentSplits,
    metrics: &mut Metrics,
) -> Result<PretrainOutcome> {
    let model_config = config.model.resolve(tok, splits.num_users);
    let model = Model::new(model_config, &mut rng::named_rng(config.seed, "init"))?;
    pretrain(model, tok, &splits.mixed.train, &splits.mixed.valid, &config.pretrain, config.seed, metrics)
}

pub fn run_pretrain(config: &RunConfig) -> Result<StageRecord> {
    let mut run = StageRun::start("pretrain", config)?;
    let (tok, splits) = load_inputs(&mut run)?;
    let mut metrics = Metrics::to_file(&run.output("pretrain/metrics.jsonl"))?;
    let outcome = pretrain_model(config, &tok, &splits, &mut metrics)?;
    metrics.flush()?;
    outcome.checkpoint.save(&run.output(THETA0))?;
    run.finish()
}

fn load_theta0(run: &mut StageRun) -> Result<TrainCheckpoint> {
    let ckpt = TrainCheckpoint::load(&run.require(THETA0, "pretrain")?)?;
    if ckpt.stage != Stage::Pretrained {
        return Err(Error::Pipeline(format!("{THETA0} is not a pretrained checkpoint")));
    }
    Ok(ckpt)
}

pub fn finetune(
    config: &RunConfig,
    theta0: &TrainCheckpoint,
    tok: &SemanticCodebooks,
    splits: &ExperimentSplits,
    metrics: &mut Metrics,
) -> Result<SftOutcome> {
    sft(theta0, tok, &splits.pay.train, &splits.pay.valid, &config.sft, config.seed, metrics)
}

pub fn run_sft(config: &RunConfig) -> Result<StageRecord> {
    let mut run = StageRun::start("sft", config)?;
    let (tok, splits) = load_inputs(&mut run)?;
    let theta0 = load_theta0(&mut run)?;
    let mut metrics = Metrics::to_file(&run.output("sft/metrics.jsonl"))?;
    let outcome = finetune(config, &theta0, &tok, &splits, &mut metrics)?;
    metrics.flush()?;
    outcome.checkpoint.save(&run.output(THETA))?;
    run.finish()
}

/// Identifies the evaluated model, tokenizer and settings.
pub fn eval_fingerprint(config: &RunConfig, model: &Model, tok: &SemanticCodebooks) -> Result<String> {
    let mut h = Sha256::new();
    h.update(model.digest().as_bytes());
    h.update(tok.to_json()?.as_bytes());
    h.update(serde_json::to_vec(&config.eval)?);
    h.update(serde_json::to_vec(&config.sft.prefix_spec())?);
    Ok(hex::encode(&h.finalize()[..8]))
}

pub fn evaluate_model(
    config: &RunConfig,
    model: &Model,
    tok: &SemanticCodebooks,
    splits: &ExperimentSplits,
) -> Result<EvalReport> {
    let fp = eval_fingerprint(config, model, tok)?;
    evaluate(model, tok, &splits.pay.test, config.sft.prefix_spec(), &config.eval, fp)
}

pub fn run_eval(config: &RunConfig) -> Result<(StageRecord, EvalReport)> {
    let mut run = StageRun::start("eval", config)?;
    let (tok, splits) = load_inputs(&mut run)?;
    let ckpt = TrainCheckpoint::load(&run.require(THETA, "sft")?)?;
    let report = evaluate_model(config, &ckpt.model, &tok, &splits)?;
    run.write(REPORT, &report.to_json()?)?;
    run.write("eval/summary.csv", &report.summary_csv())?;
    run.write("eval/ranks.csv", &report.ranks_csv())?;
    Ok((run.finish()?, report))
}

pub fn run_ablate(config: &RunConfig) -> Result<(StageRecord, AblationTable)> {
    let mut run = StageRun::start("ablate", config)?;
    let (tok, splits) = load_inputs(&mut run)?;
    let theta0 = load_theta0(&mut run)?;
    let mut metrics = Metrics::to_file(&run.output("ablate/metrics.jsonl"))?;
    let table = run_ablations(
        &theta0,
        &tok,
        &splits.pay.train,
        &splits.pay.valid,
        &splits.pay.test,
        &config.sft,
        &config.eval,
        &config.ablation,
        &mut metrics,
    )?;
    metrics.flush()?;
    run.write("ablate/table.csv", &table.to_csv())?;
    run.write("ablate/table.json", &table.to_json()?)?;
    run.write("ablate/k_sweep.csv", &table.k_sweep_csv())?;
    Ok((run.finish()?, table))
}

/// Re-hashes every recorded artifact and checks that each stage consumed
/// exactly what its upstream stage produced. Returns one line per problem.
pub fn verify(out: &Path) -> Result<Vec<String>> {
    let manifest = Manifest::load(out)?;
    if manifest.stages.is_empty() {
        return Err(Error::Pipeline(format!("no manifest in {}", out.display())));
    }
    let mut problems = Vec::new();
    let mut produced: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for (stage, rec) in &manifest.stages {
        for (rel, hash) in &rec.outputs {
            produced.insert(rel, (stage, hash));
        }
    }
    let resolve = |p: &str| {
        let path = Path::new(p);
        if path.is_absolute() { path.to_path_buf() } else { out.join(path) }
    };
    let current = |p: &str| sha256_file(&resolve(p)).ok();
    for (stage, rec) in &manifest.stages {
        for (rel, hash) in &rec.outputs {
            match current(rel) {
                None => problems.push(format!("{stage}: output {rel} is missing")),
                Some(h) if &h != hash => problems.push(format!("{stage}: output {rel} changed since it was written")),
                _ => {}
            }
        }
        let echo = format!("{stage}/config.toml");
        match std::fs::read_to_string(out.join(&echo)) {
            Ok(text) if hex::encode(Sha256::digest(text.as_bytes())) == rec.config_hash => {}
            _ => problems.push(format!("{stage}: {echo} does not match the recorded config hash")),
        }
        for (rel, hash) in &rec.inputs {
            match produced.get(rel.as_str()) {
                Some((up, h)) if h != hash => {
                    problems.push(format!("{stage}: input {rel} differs from what {up} produced; rerun {stage}"))
                }
                None if current(rel).as_deref() != Some(hash.as_str()) => {
                    problems.push(format!("{stage}: input {rel} is missing or changed"))
                }
                _ => {}
            }
        }
    }
    Ok(problems)
}
