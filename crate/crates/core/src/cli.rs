//! The `cmkt` command-line front end.
//!
//! Every command reads its inputs, writes its outputs under `--out`, and
//! records a `manifest.json` there with the effective configuration, the
//! SHA-256 of every input, the output paths, the seed and a timestamp.
//! Relative input paths are resolved against `CMKT_DATA_DIR` when it is set.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, ModelState};
use crate::corpus::{format_pairs, load_pairs, Split, Vocab};
use crate::distillation::{distill, train_teacher, DistillSpec, TeacherObjective, TeacherSpec};
use crate::encoders::{index_path, FeatureBank};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, finetune, low_resource_protocol, parse_report_csv, plot_svg, report, subsample, supervised_protocol,
    EvalRun, FinetuneConfig, GridResult, Layout, McqaDataset, TrainSize,
};
use crate::perturbation::{
    format_records, EncoderOracle, Lexicon, MaskedLmOracle, PerturbConfig, PerturbationIndex, Perturber,
    PosTagger, TableOracle, load_records,
};
use crate::synth::{SynthConfig, SynthWorld};
use crate::training::{
    format_similarity, parse_similarity, pretrain, select_checkpoint, Method, PretrainConfig, PretrainInputs,
    PretrainOutput,
};

#[derive(Debug, Parser)]
#[command(name = "cmkt", version, about = "Cross-modal knowledge transfer toolkit")]
pub struct Cli {
    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with optional [pretrain], [finetune] and [perturb] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "cmkt-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: pairs, features, lexicon, tagger, oracle,
    /// downstream dataset and similarity set.
    Synth(SynthArgs),
    /// Rewrite captions with a masked-LM oracle and classify each rewrite.
    Perturb(PerturbArgs),
    /// Intermediate pre-training with a named method.
    Pretrain(PretrainArgs),
    /// Train a cross-modal teacher.
    Teacher(TeacherArgs),
    /// Distil a teacher into a text student.
    Distill(DistillArgs),
    /// Fine-tune one task model and report dev/test accuracy.
    Finetune(FinetuneArgs),
    /// Run an evaluation protocol and write an EvalRun file.
    Eval(EvalArgs),
    /// Render EvalRun files as a table, CSV and plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 32)]
    pub heldout: usize,
    #[arg(long, default_value_t = 400)]
    pub mcqa_train: usize,
    #[arg(long, default_value_t = 200)]
    pub mcqa_dev: usize,
    #[arg(long, default_value_t = 1000)]
    pub mcqa_test: usize,
    #[arg(long, default_value_t = 4)]
    pub choices: usize,
    #[arg(long, default_value_t = 200)]
    pub similarity: usize,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Part-of-speech table (`word<TAB>noun|verb|other`).
    #[arg(long)]
    pub pos: PathBuf,
    /// `table:PATH` (or a bare path) for a prediction table, or
    /// `checkpoint:PATH` for a trained encoder (needs `--vocab`).
    #[arg(long)]
    pub oracle: String,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub perturbations: Option<PathBuf>,
    /// Plain-text corpus, one caption per line; defaults to the pair captions.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Similarity set (`a<TAB>b<TAB>score`) for checkpoint selection.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct TeacherArgs {
    #[arg(long, default_value = "cmcl")]
    pub objective: String,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Plain-text corpus, one caption per line.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub mlm_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub nst_weight: f64,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Train-subset size; the whole train split when absent.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// `low64`, `low128` or `full`.
    #[arg(long)]
    pub protocol: String,
    /// Row label in reports; defaults to the checkpoint's method.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `low_resource` or `full`.
    #[arg(long, default_value = "low_resource")]
    pub layout: String,
    /// Also render plot data as SVG.
    #[arg(long)]
    pub svg: bool,
    /// EvalRun JSON files or report CSV files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    pretrain: Option<PretrainConfig>,
    #[serde(default)]
    finetune: Option<FinetuneConfig>,
    #[serde(default)]
    perturb: Option<PerturbFileConfig>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PerturbFileConfig {
    positions: Option<usize>,
    top_k: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub timestamp: String,
}

struct Session {
    out: PathBuf,
    data_dir: Option<PathBuf>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Session {
    fn new(out: PathBuf) -> Self {
        Self {
            out,
            data_dir: std::env::var_os("CMKT_DATA_DIR").map(PathBuf::from),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if path.is_relative() && !path.exists() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Resolve an input, check it exists and record its hash.
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        let p = self.resolve(path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.inputs.insert(p.display().to_string(), sha256_hex(&bytes));
        Ok(p)
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.ensure_out()?;
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.display().to_string());
        Ok(path)
    }

    fn record(&mut self, path: PathBuf) {
        self.outputs.push(path.display().to_string());
    }

    fn finish(self, command: &str, config: serde_json::Value, seed: u64) -> Result<()> {
        self.ensure_out()?;
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_config(session: &mut Session, path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let p = session.input(p)?;
            toml::from_str(&read_text(&p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn pretrain_config(file: &ConfigFile, seed: Option<u64>, o: &TrainOverrides) -> Result<PretrainConfig> {
    let mut cfg = file.pretrain.clone().unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finetune_config(file: &ConfigFile, seed: Option<u64>) -> Result<FinetuneConfig> {
    let mut cfg = file.finetune.clone().unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(session: &mut Session, path: &Path) -> Result<ModelState> {
    let p = session.input(path)?;
    ModelState::from_checkpoint(&Checkpoint::load(&p)?)
}

fn load_bank(session: &mut Session, path: &Path) -> Result<FeatureBank> {
    let p = session.input(path)?;
    session.input(&index_path(&p))?;
    FeatureBank::load(&p)
}

fn load_captions(session: &mut Session, path: &Path) -> Result<Vec<String>> {
    let p = session.input(path)?;
    Ok(read_text(&p)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_training_outputs(session: &mut Session, out: &PretrainOutput, final_name: &str) -> Result<()> {
    for (i, ckpt) in out.epochs.iter().enumerate() {
        session.write(&format!("epoch{}.ckpt.json", i + 1), &ckpt.to_bytes())?;
    }
    session.write(final_name, &out.final_checkpoint.to_bytes())?;
    session.write("loss_log.csv", out.log.to_csv().as_bytes())?;
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs, session: &mut Session) -> Result<serde_json::Value> {
    let config = SynthConfig {
        seed: cli.seed.unwrap_or(0),
        train_pairs: args.pairs,
        heldout_pairs: args.heldout,
        ..Default::default()
    };
    let world = SynthWorld::new(config);
    let corpus = world.pair_corpus();
    session.write("pairs.tsv", format_pairs(&corpus.pairs).as_bytes())?;
    let captions: String = corpus
        .pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| format!("{}\n", p.caption))
        .collect();
    session.write("captions.txt", captions.as_bytes())?;
    let bank_path = session.out.join("features.bin");
    session.ensure_out()?;
    corpus.bank.save(&bank_path)?;
    session.record(bank_path.clone());
    session.record(index_path(&bank_path));
    session.write("vocab.txt", world.vocab().to_text().as_bytes())?;
    session.write("lexicon.tsv", world.lexicon().to_text().as_bytes())?;
    session.write("pos.tsv", world.tagger().to_text().as_bytes())?;
    session.write("oracle.tsv", world.oracle().to_text().as_bytes())?;
    let dataset = world.mcqa(args.mcqa_train, args.mcqa_dev, args.mcqa_test, args.choices);
    session.write("mcqa.jsonl", dataset.to_jsonl().as_bytes())?;
    session.write("similarity.tsv", format_similarity(&world.similarity_set(args.similarity)).as_bytes())?;
    Ok(serde_json::json!({ "synth": config, "mcqa": [args.mcqa_train, args.mcqa_dev, args.mcqa_test, args.choices] }))
}

fn cmd_perturb(cli: &Cli, args: &PerturbArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let pairs = load_pairs(&session.input(&args.pairs)?)?;
    let lexicon = Lexicon::load(&session.input(&args.lexicon)?)?;
    let tagger = PosTagger::load(&session.input(&args.pos)?)?;
    let file_cfg = file.perturb.unwrap_or_default();
    let defaults = PerturbConfig::default();
    let config = PerturbConfig {
        n_positions: args.positions.or(file_cfg.positions).unwrap_or(defaults.n_positions),
        top_k: args.top_k.or(file_cfg.top_k).unwrap_or(defaults.top_k),
    };
    let seed = cli.seed.unwrap_or(0);
    let (kind, path) = match args.oracle.split_once(':') {
        Some((k @ ("table" | "checkpoint"), p)) => (k, PathBuf::from(p)),
        _ => ("table", PathBuf::from(&args.oracle)),
    };
    let table;
    let model;
    let vocab;
    let oracle: &dyn MaskedLmOracle = if kind == "table" {
        table = TableOracle::load(&session.input(&path)?)?;
        &table
    } else {
        let vocab_path = args
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Config("a checkpoint oracle needs --vocab".into()))?;
        vocab = Vocab::load(&session.input(vocab_path)?)?;
        model = load_model(session, &path)?;
        &EncoderOracle {
            encoder: &model.text,
            vocab: &vocab,
        }
    };
    let perturber = Perturber {
        oracle,
        lexicon: &lexicon,
        tagger: &tagger,
        config,
    };
    let records = perturber.perturb_corpus(pairs.iter().map(|p| p.caption.as_str()), seed)?;
    session.write("perturbations.tsv", format_records(&records).as_bytes())?;
    Ok(serde_json::json!({
        "oracle": args.oracle,
        "positions": config.n_positions,
        "top_k": config.top_k,
        "records": records.len(),
    }))
}

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let method: Method = args.method.parse()?;
    let config = pretrain_config(file, cli.seed, &args.train)?;
    let vocab = Vocab::load(&session.input(&args.vocab)?)?;
    let mut inputs = PretrainInputs::new(vocab);
    if let Some(p) = &args.pairs {
        let pairs: Vec<_> = load_pairs(&session.input(p)?)?
            .into_iter()
            .filter(|p| p.split == Split::Train)
            .collect();
        inputs.captions = pairs.iter().map(|p| p.caption.clone()).collect();
        inputs.pairs = pairs;
    }
    if let Some(c) = &args.captions {
        inputs.captions = load_captions(session, c)?;
    }
    if let Some(f) = &args.features {
        inputs.bank = Some(load_bank(session, f)?);
    }
    if let Some(r) = &args.perturbations {
        inputs.perturbations = Some(PerturbationIndex::new(&load_records(&session.input(r)?)?));
    }
    if let Some(t) = &args.teacher {
        inputs.teacher = Some(load_model(session, t)?);
    }
    if let Some(i) = &args.init {
        inputs.init = Some(load_model(session, i)?);
    }
    let out = pretrain(method.spec(), &inputs, config.clone())?;
    write_training_outputs(session, &out, "final.ckpt.json")?;
    let mut selection = serde_json::Value::Null;
    if let Some(h) = &args.heldout {
        let heldout = parse_similarity(&read_text(&session.input(h)?)?, &h.display().to_string())?;
        if !out.epochs.is_empty() {
            let sel = select_checkpoint(&out.epochs, &heldout, &inputs.vocab)?;
            session.write("best.ckpt.json", &out.epochs[sel.index].to_bytes())?;
            selection = serde_json::json!({ "best_epoch": sel.index + 1, "scores": sel.scores });
            session.write(
                "selection.json",
                (serde_json::to_string_pretty(&selection).expect("json") + "\n").as_bytes(),
            )?;
        }
    }
    Ok(serde_json::json!({ "method": method.name(), "pretrain": config, "selection": selection }))
}

fn cmd_teacher(cli: &Cli, args: &TeacherArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let objective: TeacherObjective = args.objective.parse()?;
    let config = pretrain_config(file, cli.seed, &args.train)?;
    let vocab = Vocab::load(&session.input(&args.vocab)?)?;
    let pairs: Vec<_> = load_pairs(&session.input(&args.pairs)?)?
        .into_iter()
        .filter(|p| p.split == Split::Train)
        .collect();
    let bank = load_bank(session, &args.features)?;
    let inputs = PretrainInputs::from_pairs(vocab, pairs, Some(bank));
    let spec = TeacherSpec {
        objective,
        config: config.clone(),
    };
    let out = train_teacher(&spec, &inputs)?;
    write_training_outputs(session, &out, "teacher.ckpt.json")?;
    Ok(serde_json::json!({ "objective": objective.to_string(), "pretrain": config }))
}

fn cmd_distill(cli: &Cli, args: &DistillArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let config = pretrain_config(file, cli.seed, &args.train)?;
    let vocab = Vocab::load(&session.input(&args.vocab)?)?;
    let mut inputs = PretrainInputs::new(vocab);
    inputs.captions = load_captions(session, &args.captions)?;
    inputs.teacher = Some(load_model(session, &args.teacher)?);
    if let Some(i) = &args.init {
        inputs.init = Some(load_model(session, i)?);
    }
    let spec = DistillSpec {
        mlm_weight: args.mlm_weight,
        nst_weight: args.nst_weight,
        config: config.clone(),
    };
    let out = distill(&spec, &inputs)?;
    write_training_outputs(session, &out, "student.ckpt.json")?;
    Ok(serde_json::json!({ "mlm_weight": args.mlm_weight, "nst_weight": args.nst_weight, "pretrain": config }))
}

fn checkpoint_method(ckpt: &Checkpoint) -> Option<String> {
    ckpt.config.get("method")?.get("label")?.as_str().map(String::from)
}

fn cmd_finetune(cli: &Cli, args: &FinetuneArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let config = finetune_config(file, cli.seed)?;
    let model = load_model(session, &args.checkpoint)?;
    let vocab = Vocab::load(&session.input(&args.vocab)?)?;
    let dataset = McqaDataset::load(&session.input(&args.dataset)?)?;
    let subset = match args.size {
        Some(n) => subsample(&dataset, n, crate::seed::derive(config.seed, &[crate::seed::stream::SUBSAMPLE, n as u64, 0]))?,
        None => dataset.split_indices(Split::Train),
    };
    let lr = args.lr.unwrap_or(config.learning_rate);
    let epochs = args.epochs.unwrap_or(if args.size.is_some() {
        config.max_epochs_low_resource
    } else {
        config.max_epochs_full
    });
    let run_seed = crate::seed::derive(config.seed, &[crate::seed::stream::FINETUNE]);
    let run = finetune(&model.text, &vocab, &dataset, &subset, &config, lr, epochs, run_seed)?;
    let accuracy = |split: Split| -> Result<Option<f64>> {
        if dataset.split_indices(split).is_empty() {
            Ok(None)
        } else {
            evaluate(&run.model, &vocab, &dataset, split).map(Some)
        }
    };
    let summary = serde_json::json!({
        "train_items": subset.len(),
        "learning_rate": lr,
        "epochs": epochs,
        "dev_accuracy": accuracy(Split::Dev)?,
        "test_accuracy": accuracy(Split::Test)?,
        "losses": run.losses,
    });
    session.write("finetune.json", (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    let mut state = ModelState::text_only(run.model.encoder.clone());
    state.extra = run.model.head.clone();
    let ckpt = state.to_checkpoint(run.losses.len() as u64, epochs, serde_json::json!({ "finetune": config }));
    session.write("finetuned.ckpt.json", &ckpt.to_bytes())?;
    Ok(serde_json::json!({ "finetune": config, "learning_rate": lr, "epochs": epochs, "size": args.size }))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs, file: &ConfigFile, session: &mut Session) -> Result<serde_json::Value> {
    let config = finetune_config(file, cli.seed)?;
    let ckpt_path = session.input(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ModelState::from_checkpoint(&ckpt)?;
    let vocab = Vocab::load(&session.input(&args.vocab)?)?;
    let dataset = McqaDataset::load(&session.input(&args.dataset)?)?;
    let method = args
        .method
        .clone()
        .or_else(|| checkpoint_method(&ckpt))
        .unwrap_or_else(|| "model".to_string());
    let result = match args.protocol.as_str() {
        "low64" => low_resource_protocol(&method, &model.text, &vocab, &dataset, &[64], &config)?,
        "low128" => low_resource_protocol(&method, &model.text, &vocab, &dataset, &[128], &config)?,
        "full" => supervised_protocol(&method, &model.text, &vocab, &dataset, &config)?,
        other => {
            return Err(Error::Config(format!(
                "unknown protocol `{other}`; expected low64, low128 or full"
            )))
        }
    };
    let run = &result.runs[0];
    run.save(&session.out.join("eval_run.json")).or_else(|_| {
        session.ensure_out()?;
        run.save(&session.out.join("eval_run.json"))
    })?;
    session.record(session.out.join("eval_run.json"));
    let grids: Vec<(TrainSize, GridResult)> = result.grids.clone();
    let grid_json: Vec<_> = grids
        .iter()
        .map(|(s, g)| serde_json::json!({ "train_size": s.to_string(), "table": g.table, "best_lr": g.best_lr }))
        .collect();
    session.write("grid.json", (serde_json::to_string_pretty(&grid_json).expect("json") + "\n").as_bytes())?;
    let splits: BTreeMap<String, usize> = dataset.split_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(serde_json::json!({ "protocol": args.protocol, "method": method, "finetune": config, "splits": splits }))
}

fn load_runs(session: &mut Session, path: &Path) -> Result<Vec<EvalRun>> {
    let p = session.input(path)?;
    let text = read_text(&p)?;
    if p.extension().is_some_and(|e| e == "csv") {
        parse_report_csv(&text)
    } else {
        serde_json::from_str::<EvalRun>(&text)
            .map(|r| vec![r])
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }
}

fn cmd_report(args: &ReportArgs, session: &mut Session) -> Result<serde_json::Value> {
    let layout: Layout = args.layout.parse()?;
    let mut runs = Vec::new();
    for p in &args.runs {
        runs.extend(load_runs(session, p)?);
    }
    let rendered = report(&runs, layout)?;
    session.write("report.txt", rendered.text.as_bytes())?;
    session.write("report.csv", rendered.csv.as_bytes())?;
    session.write("plot.csv", rendered.plot_csv.as_bytes())?;
    if args.svg {
        session.write("plot.svg", plot_svg(&rendered.plot_csv)?.as_bytes())?;
    }
    print!("{}", rendered.text);
    Ok(serde_json::json!({ "layout": args.layout, "svg": args.svg, "runs": runs.len() }))
}

fn execute(cli: &Cli) -> Result<()> {
    let mut session = Session::new(cli.out.clone());
    let file = load_config(&mut session, cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    let (name, config) = match &cli.command {
        Command::Synth(a) => ("synth", cmd_synth(cli, a, &mut session)?),
        Command::Perturb(a) => ("perturb", cmd_perturb(cli, a, &file, &mut session)?),
        Command::Pretrain(a) => ("pretrain", cmd_pretrain(cli, a, &file, &mut session)?),
        Command::Teacher(a) => ("teacher", cmd_teacher(cli, a, &file, &mut session)?),
        Command::Distill(a) => ("distill", cmd_distill(cli, a, &file, &mut session)?),
        Command::Finetune(a) => ("finetune", cmd_finetune(cli, a, &file, &mut session)?),
        Command::Eval(a) => ("eval", cmd_eval(cli, a, &file, &mut session)?),
        Command::Report(a) => ("report", cmd_report(a, &mut session)?),
    };
    session.finish(name, config, seed)
}

/// Exit code of an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_runtime() {
        3
    } else {
        2
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
