//! Multiple-choice fine-tuning, the low-resource and fully supervised
//! protocols, learning-rate grid search and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{tokenize, Split, TokenId, Vocab, SEP};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::objectives::softmax_cross_entropy;
use crate::params::{normal_matrix, Optimizer, OptimizerKind, ParamStore};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqaItem {
    pub question: String,
    pub choices: Vec<String>,
    pub gold: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McqaDataset {
    name: String,
    n_choices: usize,
    items: Vec<McqaItem>,
}

impl McqaDataset {
    pub fn new(name: impl Into<String>, items: Vec<McqaItem>) -> Result<Self> {
        let name = name.into();
        let first = items
            .first()
            .ok_or_else(|| Error::Validation(format!("dataset `{name}` has no items")))?;
        let n_choices = first.choices.len();
        if n_choices < 2 {
            return Err(Error::Validation(format!("dataset `{name}` needs at least two choices")));
        }
        for (i, item) in items.iter().enumerate() {
            if item.choices.len() != n_choices {
                return Err(Error::Validation(format!(
                    "item {i} has {} choices, dataset has {n_choices}",
                    item.choices.len()
                )));
            }
            if item.gold >= n_choices {
                return Err(Error::Validation(format!("item {i}: gold {} >= {n_choices} choices", item.gold)));
            }
        }
        Ok(Self { name, n_choices, items })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_choices(&self) -> usize {
        self.n_choices
    }

    pub fn items(&self) -> &[McqaItem] {
        &self.items
    }

    /// Indices of the items in `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry(item.split).or_insert(0) += 1;
        }
        counts
    }

    /// One JSON object per line: `question`, `choices`, `gold`, `split`.
    pub fn parse_jsonl(text: &str, origin: &str, name: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: McqaItem = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(name, items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        Self::parse_jsonl(&text, &path.display().to_string(), name)
    }

    pub fn to_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|i| serde_json::to_string(i).expect("item serialises") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr_grid: Vec<f64>,
    /// Learning rate when no grid search is run.
    pub learning_rate: f64,
    pub max_epochs_low_resource: usize,
    pub max_epochs_full: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Pick the learning rate by grid search on the first subsample.
    pub grid_search: bool,
    pub n_subsamples: usize,
    pub n_seeds: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![5e-5, 1e-4, 3e-4, 4e-4, 5e-4, 6e-4],
            learning_rate: 3e-4,
            max_epochs_low_resource: 30,
            max_epochs_full: 15,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            grid_search: true,
            n_subsamples: 5,
            n_seeds: 3,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(Error::Config("learning-rate grid is empty".into()));
        }
        if self.lr_grid.iter().chain([&self.learning_rate]).any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 || self.n_subsamples == 0 || self.n_seeds == 0 {
            return Err(Error::Config("batch_size, n_subsamples and n_seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("finetune config: {e}")))
    }
}

/// Encoder plus a scalar scoring head over `(question [sep] choice)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub encoder: TextEncoder,
    pub head: ParamStore,
}

/// Token sequences of every choice of an item.
fn item_sequences(item: &McqaItem, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    let question = if item.question.trim().is_empty() {
        Vec::new()
    } else {
        tokenize(&item.question, vocab, max_len)?
    };
    item.choices
        .iter()
        .map(|c| {
            let mut seq = question.clone();
            if !seq.is_empty() {
                seq.push(SEP);
            }
            seq.extend(tokenize(c, vocab, max_len)?);
            seq.truncate(max_len);
            Ok(seq)
        })
        .collect()
}

impl TaskModel {
    pub fn new(encoder: TextEncoder, init_seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(init_seed, &[stream::FINETUNE, stream::INIT]));
        let mut head = ParamStore::new();
        head.insert("score_w", normal_matrix(&mut rng, encoder.dim(), 1, 0.02));
        head.insert("score_b", Array2::zeros((1, 1)));
        Self { encoder, head }
    }

    /// Scores of every choice of every item, `items × choices`.
    pub fn scores(&self, items: &[&McqaItem], vocab: &Vocab) -> Result<Array2<f64>> {
        let c = items.first().map_or(0, |i| i.choices.len());
        let mut seqs = Vec::with_capacity(items.len() * c);
        for item in items {
            seqs.extend(item_sequences(item, vocab, self.encoder.config().max_len)?);
        }
        let pooled = self.encoder.encode_text(&seqs, None)?.into_vectors();
        let s = pooled.dot(self.head.require("score_w")?) + self.head.require("score_b")?;
        Ok(s.into_shape_with_order((items.len(), c)).expect("score count"))
    }

    /// Mean cross-entropy of the gold choices (inference mode).
    pub fn loss(&self, items: &[&McqaItem], vocab: &Vocab) -> Result<f64> {
        let golds: Vec<usize> = items.iter().map(|i| i.gold).collect();
        Ok(softmax_cross_entropy(&self.scores(items, vocab)?, &golds)?.0.total)
    }

    /// Predicted choice per item; ties go to the lowest index.
    pub fn predict(&self, items: &[&McqaItem], vocab: &Vocab) -> Result<Vec<usize>> {
        let scores = self.scores(items, vocab)?;
        Ok(scores.rows().into_iter().map(|r| argmax_first(r.as_slice().expect("contiguous"))).collect())
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trained task model plus the loss of every step.
#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: TaskModel,
    pub losses: Vec<f64>,
}

/// Fine-tune `encoder` with a fresh scoring head on the `subset` item indices
/// (all from the train split).
pub fn finetune(
    encoder: &TextEncoder,
    vocab: &Vocab,
    dataset: &McqaDataset,
    subset: &[usize],
    config: &FinetuneConfig,
    learning_rate: f64,
    epochs: usize,
    run_seed: u64,
) -> Result<FinetuneRun> {
    config.validate()?;
    if subset.is_empty() {
        return Err(Error::Config("fine-tuning subset is empty".into()));
    }
    for &i in subset {
        let item = dataset
            .items
            .get(i)
            .ok_or_else(|| Error::Index(format!("item {i} outside dataset of {}", dataset.items.len())))?;
        if item.split != Split::Train {
            return Err(Error::Config(format!("item {i} is in the {} split, not train", item.split)));
        }
    }
    let max_len = encoder.config().max_len;
    let seqs: Vec<Vec<Vec<TokenId>>> = subset
        .iter()
        .map(|&i| item_sequences(&dataset.items[i], vocab, max_len))
        .collect::<Result<_>>()?;
    let c = dataset.n_choices;
    let mut model = TaskModel::new(encoder.clone(), run_seed);
    let mut enc_opt = Optimizer::new(config.optimizer, learning_rate);
    let mut head_opt = Optimizer::new(config.optimizer, learning_rate);
    let mut losses = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(run_seed, &[stream::SHUFFLE, epoch as u64])));
        for batch in order.chunks(config.batch_size) {
            let flat: Vec<Vec<TokenId>> = batch.iter().flat_map(|&b| seqs[b].iter().cloned()).collect();
            let golds: Vec<usize> = batch.iter().map(|&b| dataset.items[subset[b]].gold).collect();
            let mut tape = Tape::new();
            let dropout = seed::derive(run_seed, &[stream::DROPOUT, step]);
            let fwd = model.encoder.forward(&mut tape, &flat, Some(dropout))?;
            let head = model.head.bind(&mut tape);
            let s = tape.matmul(fwd.pooled, head.var("score_w"));
            let s = tape.add_row(s, head.var("score_b"));
            let logits = tape
                .value(s)
                .clone()
                .into_shape_with_order((batch.len(), c))
                .expect("score count");
            let (res, g) = softmax_cross_entropy(&logits, &golds)?;
            if !res.total.is_finite() {
                return Err(Error::Training {
                    step: step as usize,
                    message: format!("non-finite fine-tuning loss {}", res.total),
                });
            }
            losses.push(res.total);
            let grads = tape.backward(&[(s, g.into_shape_with_order((batch.len() * c, 1)).expect("grad count"))]);
            enc_opt.step(model.encoder.params_mut(), &fwd.params.collect(&grads));
            head_opt.step(&mut model.head, &head.collect(&grads));
            step += 1;
        }
    }
    Ok(FinetuneRun { model, losses })
}

/// Fraction of items in `split` whose top-scoring choice is gold.
pub fn evaluate(model: &TaskModel, vocab: &Vocab, dataset: &McqaDataset, split: Split) -> Result<f64> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no {split} split", dataset.name)));
    }
    let items: Vec<&McqaItem> = idx.iter().map(|&i| &dataset.items[i]).collect();
    let mut correct = 0usize;
    for chunk in items.chunks(256) {
        let preds = model.predict(chunk, vocab)?;
        correct += preds.iter().zip(chunk).filter(|(p, i)| **p == i.gold).count();
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Image-to-text and text-to-image recall@1 over aligned pairs: each query
/// is scored by cosine similarity against every candidate of the other
/// modality. Ties count as misses unless the aligned candidate comes first.
pub fn retrieval_recall_at_1(
    model: &crate::checkpoint::ModelState,
    vocab: &Vocab,
    bank: &crate::encoders::FeatureBank,
    pairs: &[crate::corpus::CaptionPair],
) -> Result<(f64, f64)> {
    let image = model
        .image
        .as_ref()
        .ok_or_else(|| Error::Config("model has no image encoder".into()))?;
    if pairs.is_empty() {
        return Err(Error::Validation("no pairs to retrieve".into()));
    }
    let max_len = model.text.config().max_len;
    let tokens: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|p| tokenize(&p.caption, vocab, max_len))
        .collect::<Result<_>>()?;
    let ids: Vec<&str> = pairs.iter().map(|p| p.image_id.as_str()).collect();
    let unit = |m: Array2<f64>| {
        let mut m = m;
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let t = unit(model.text.encode_text(&tokens, None)?.into_vectors());
    let v = unit(image.encode_image(bank, &ids)?.into_vectors());
    let sims = v.dot(&t.t());
    let n = pairs.len();
    let hits = |by_row: bool| {
        (0..n)
            .filter(|&i| {
                let row: Vec<f64> = (0..n).map(|j| if by_row { sims[[i, j]] } else { sims[[j, i]] }).collect();
                argmax_first(&row) == i
            })
            .count() as f64
            / n as f64
    };
    Ok((hits(true), hits(false)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainSize {
    Low(usize),
    Full,
}

impl fmt::Display for TrainSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainSize::Low(n) => write!(f, "{n}"),
            TrainSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for TrainSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(TrainSize::Full),
            other => other
                .parse()
                .map(TrainSize::Low)
                .map_err(|_| Error::Validation(format!("bad train size `{s}`"))),
        }
    }
}

impl Serialize for TrainSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TrainSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Row group of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "-")]
    None,
    #[serde(rename = "Caption")]
    Caption,
    #[serde(rename = "Caption-Image Pairs")]
    CaptionImagePairs,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::None => "-",
            Source::Caption => "Caption",
            Source::CaptionImagePairs => "Caption-Image Pairs",
        }
    }

    /// Group of a method name: text-only methods use captions, the rest use
    /// caption-image pairs, unknown names (baselines) have none.
    pub fn for_method(method: &str) -> Self {
        match method.parse::<crate::training::Method>() {
            Ok(m) => {
                use crate::training::Method::*;
                match m {
                    Mlm | Tcl | TclMlm | TclAns | TclPsaAns => Source::Caption,
                    _ => Source::CaptionImagePairs,
                }
            }
            Err(_) => Source::None,
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Source::None, Source::Caption, Source::CaptionImagePairs]
            .into_iter()
            .find(|x| x.label() == s.trim())
            .ok_or_else(|| Error::Validation(format!("unknown source group `{s}`")))
    }
}

/// Results of one protocol run: one accuracy per subsample or seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: String,
    pub source: Source,
    pub dataset: String,
    pub train_size: TrainSize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalRun {
    pub fn new(
        method: &str,
        dataset: &str,
        train_size: TrainSize,
        seeds: Vec<u64>,
        accuracies: Vec<f64>,
    ) -> Result<Self> {
        if accuracies.is_empty() || seeds.len() != accuracies.len() {
            return Err(Error::Validation(format!(
                "{} seeds for {} accuracies",
                seeds.len(),
                accuracies.len()
            )));
        }
        let (mean, std) = mean_std(&accuracies);
        Ok(Self {
            method: method.to_string(),
            source: Source::for_method(method),
            dataset: dataset.to_string(),
            train_size,
            seeds,
            accuracies,
            mean,
            std,
        })
    }

    /// A published summary without per-run results.
    pub fn summary(method: &str, source: Source, dataset: &str, train_size: TrainSize, mean: f64, std: f64) -> Self {
        Self {
            method: method.to_string(),
            source,
            dataset: dataset.to_string(),
            train_size,
            seeds: Vec::new(),
            accuracies: Vec::new(),
            mean,
            std,
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    /// `mean±std` in accuracy points with one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1}±{:.1}", self.mean * 100.0, self.std * 100.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run serialises") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Dev accuracy per grid learning rate and the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub table: Vec<(f64, f64)>,
    pub best_lr: f64,
}

/// Fine-tune once per grid learning rate on `subset`; the best dev accuracy
/// wins, ties going to the smaller learning rate.
pub fn grid_search(
    encoder: &TextEncoder,
    vocab: &Vocab,
    dataset: &McqaDataset,
    subset: &[usize],
    config: &FinetuneConfig,
    epochs: usize,
    run_seed: u64,
) -> Result<GridResult> {
    config.validate()?;
    if dataset.split_indices(Split::Dev).is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no dev split for grid search", dataset.name)));
    }
    let mut grid = config.lr_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut table = Vec::with_capacity(grid.len());
    for &lr in &grid {
        let run = finetune(encoder, vocab, dataset, subset, config, lr, epochs, run_seed)?;
        table.push((lr, evaluate(&run.model, vocab, dataset, Split::Dev)?));
    }
    let mut best = 0;
    for (i, &(_, acc)) in table.iter().enumerate() {
        if acc > table[best].1 {
            best = i;
        }
    }
    Ok(GridResult {
        best_lr: table[best].0,
        table,
    })
}

/// Seeded subsample of `size` train items, without replacement, in dataset
/// order.
pub fn subsample(dataset: &McqaDataset, size: usize, subsample_seed: u64) -> Result<Vec<usize>> {
    let train = dataset.split_indices(Split::Train);
    if size > train.len() {
        return Err(Error::Config(format!(
            "dataset `{}` has {} train items, fewer than the requested {size}",
            dataset.name,
            train.len()
        )));
    }
    let mut rng = seed::rng(subsample_seed);
    let mut picks = rand::seq::index::sample(&mut rng, train.len(), size).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| train[i]).collect())
}

/// Protocol output: the runs plus the grid-search tables that chose their
/// learning rates.
#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub runs: Vec<EvalRun>,
    pub grids: Vec<(TrainSize, GridResult)>,
}

fn require_test(dataset: &McqaDataset) -> Result<()> {
    if dataset.split_indices(Split::Test).is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no test split", dataset.name)));
    }
    Ok(())
}

/// For each size: `n_subsamples` seeded subsamples, fine-tune each, evaluate
/// on the test split. With grid search enabled the learning rate is chosen
/// once per size on the first subsample's dev accuracy.
pub fn low_resource_protocol(
    method: &str,
    encoder: &TextEncoder,
    vocab: &Vocab,
    dataset: &McqaDataset,
    sizes: &[usize],
    config: &FinetuneConfig,
) -> Result<ProtocolResult> {
    config.validate()?;
    require_test(dataset)?;
    let mut runs = Vec::new();
    let mut grids = Vec::new();
    let train = dataset.split_indices(Split::Train).len();
    if let Some(&too_big) = sizes.iter().find(|&&s| s > train) {
        return Err(Error::Config(format!(
            "dataset `{}` has {train} train items, fewer than the requested {too_big}",
            dataset.name
        )));
    }
    for &size in sizes {
        if size == 0 || size >= train {
            return Err(Error::Config(format!(
                "low-resource size {size} must be positive and smaller than the train split ({train}); use the supervised protocol"
            )));
        }
        let seeds: Vec<u64> = (0..config.n_subsamples)
            .map(|s| seed::derive(config.seed, &[stream::SUBSAMPLE, size as u64, s as u64]))
            .collect();
        let subsets: Vec<Vec<usize>> = seeds.iter().map(|&s| subsample(dataset, size, s)).collect::<Result<_>>()?;
        let epochs = config.max_epochs_low_resource;
        let lr = if config.grid_search {
            let grid = grid_search(encoder, vocab, dataset, &subsets[0], config, epochs, seeds[0])?;
            let lr = grid.best_lr;
            grids.push((TrainSize::Low(size), grid));
            lr
        } else {
            config.learning_rate
        };
        let mut accuracies = Vec::with_capacity(seeds.len());
        for (subset, &s) in subsets.iter().zip(&seeds) {
            let run = finetune(encoder, vocab, dataset, subset, config, lr, epochs, s)?;
            accuracies.push(evaluate(&run.model, vocab, dataset, Split::Test)?);
        }
        runs.push(EvalRun::new(method, dataset.name(), TrainSize::Low(size), seeds, accuracies)?);
    }
    Ok(ProtocolResult { runs, grids })
}

/// Full train split, `n_seeds` fine-tuning seeds.
pub fn supervised_protocol(
    method: &str,
    encoder: &TextEncoder,
    vocab: &Vocab,
    dataset: &McqaDataset,
    config: &FinetuneConfig,
) -> Result<ProtocolResult> {
    config.validate()?;
    require_test(dataset)?;
    let train = dataset.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config(format!("dataset `{}` has no train split", dataset.name)));
    }
    let seeds: Vec<u64> = (0..config.n_seeds)
        .map(|s| seed::derive(config.seed, &[stream::FINETUNE, u64::MAX, s as u64]))
        .collect();
    let epochs = config.max_epochs_full;
    let mut grids = Vec::new();
    let lr = if config.grid_search {
        let grid = grid_search(encoder, vocab, dataset, &train, config, epochs, seeds[0])?;
        let lr = grid.best_lr;
        grids.push((TrainSize::Full, grid));
        lr
    } else {
        config.learning_rate
    };
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let run = finetune(encoder, vocab, dataset, &train, config, lr, epochs, s)?;
        accuracies.push(evaluate(&run.model, vocab, dataset, Split::Test)?);
    }
    let runs = vec![EvalRun::new(method, dataset.name(), TrainSize::Full, seeds, accuracies)?];
    Ok(ProtocolResult { runs, grids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    LowResource,
    Full,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low_resource" | "low-resource" | "low" => Ok(Layout::LowResource),
            "full" => Ok(Layout::Full),
            other => Err(Error::Config(format!("unknown layout `{other}`; expected low_resource or full"))),
        }
    }
}

/// A rendered report.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Aligned text table with footer.
    pub text: String,
    /// One row per run; parses back with [`parse_report_csv`].
    pub csv: String,
    /// `method,train_size,mean_accuracy` averaged over datasets.
    pub plot_csv: String,
}

const CSV_HEADER: [&str; 8] = ["source", "method", "dataset", "train_size", "seeds", "accuracies", "mean", "std"];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Render runs as a method × (dataset, size) table with an Average column.
/// Rows keep first-appearance order within their source group; datasets keep
/// first-appearance order.
pub fn report(runs: &[EvalRun], layout: Layout) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let sizes: Vec<TrainSize> = {
        let set: BTreeSet<TrainSize> = runs.iter().map(|r| r.train_size).collect();
        let sizes: Vec<TrainSize> = set.into_iter().collect();
        match layout {
            Layout::LowResource => {
                if sizes.contains(&TrainSize::Full) {
                    return Err(Error::Report("low-resource layout got full-data runs".into()));
                }
                sizes
            }
            Layout::Full => {
                if sizes != [TrainSize::Full] {
                    return Err(Error::Report("full layout needs only full-data runs".into()));
                }
                sizes
            }
        }
    };
    let mut datasets: Vec<String> = Vec::new();
    let mut rows: Vec<(Source, String)> = Vec::new();
    for r in runs {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        if !rows.iter().any(|(_, m)| *m == r.method) {
            rows.push((r.source, r.method.clone()));
        }
    }
    rows.sort_by_key(|(s, _)| *s);
    let mut cells: BTreeMap<(String, String, TrainSize), &EvalRun> = BTreeMap::new();
    for r in runs {
        if cells.insert((r.method.clone(), r.dataset.clone(), r.train_size), r).is_some() {
            return Err(Error::Report(format!(
                "duplicate cell {}/{}/{}",
                r.method, r.dataset, r.train_size
            )));
        }
    }
    let mut missing = Vec::new();
    for (_, m) in &rows {
        for d in &datasets {
            for s in &sizes {
                if !cells.contains_key(&(m.clone(), d.clone(), *s)) {
                    missing.push(format!("{m}/{d}/{s}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report(format!("missing cells: {}", missing.join(", "))));
    }

    let mut header = vec!["".to_string(), "Model".to_string()];
    for d in &datasets {
        for s in &sizes {
            header.push(match layout {
                Layout::LowResource => format!("{d}-{s}"),
                Layout::Full => d.clone(),
            });
        }
    }
    for s in &sizes {
        header.push(match layout {
            Layout::LowResource => format!("Average-{s}"),
            Layout::Full => "Average".into(),
        });
    }
    let mut table: Vec<Vec<String>> = vec![header];
    let mut last_source = None;
    for (source, m) in &rows {
        let mut line = vec![
            if last_source == Some(*source) { String::new() } else { source.label().to_string() },
            m.clone(),
        ];
        last_source = Some(*source);
        for d in &datasets {
            for s in &sizes {
                line.push(cells[&(m.clone(), d.clone(), *s)].cell());
            }
        }
        for s in &sizes {
            let avg = datasets.iter().map(|d| cells[&(m.clone(), d.clone(), *s)].mean).sum::<f64>() / datasets.len() as f64;
            line.push(format!("{:.1}", avg * 100.0));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in table.iter().enumerate() {
        let cols: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                let pad = w - v.chars().count();
                if c < 2 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        text.push_str(cols.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
        }
    }
    text.push_str("\nCells: mean±std accuracy (%) over subsamples or seeds; Average: mean over datasets.\n");
    text.push_str("Splits: as given in each dataset file.\n");
    if layout == Layout::LowResource {
        text.push_str("Learning rate: grid search once per (dataset, size) on the first subsample's dev accuracy.\n");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for (_, m) in &rows {
        for d in &datasets {
            for s in &sizes {
                let r = cells[&(m.clone(), d.clone(), *s)];
                w.write_record([
                    r.source.label().to_string(),
                    r.method.clone(),
                    r.dataset.clone(),
                    r.train_size.to_string(),
                    join(&r.seeds),
                    join(&r.accuracies),
                    r.mean.to_string(),
                    r.std.to_string(),
                ])
                .expect("in-memory csv");
            }
        }
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv");

    let mut plot_csv = String::from("method,train_size,mean_accuracy\n");
    for (_, m) in &rows {
        for s in &sizes {
            let avg = datasets.iter().map(|d| cells[&(m.clone(), d.clone(), *s)].mean).sum::<f64>() / datasets.len() as f64;
            plot_csv.push_str(&format!("{m},{s},{avg}\n"));
        }
    }
    Ok(Report { text, csv, plot_csv })
}

fn split_list<T: FromStr>(field: &str, what: &str) -> Result<Vec<T>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|x| x.parse().map_err(|_| Error::Report(format!("bad {what} `{x}`"))))
        .collect()
}

/// Inverse of [`Report::csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<EvalRun>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Report(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Report(format!("unexpected report header {headers:?}")));
    }
    let mut runs = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Report(e.to_string()))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| Error::Report(format!("bad number `{}`", &rec[i]))) };
        runs.push(EvalRun {
            source: rec[0].parse()?,
            method: rec[1].to_string(),
            dataset: rec[2].to_string(),
            train_size: rec[3].parse()?,
            seeds: split_list(&rec[4], "seed")?,
            accuracies: split_list(&rec[5], "accuracy")?,
            mean: num(6)?,
            std: num(7)?,
        });
    }
    Ok(runs)
}

/// Simple accuracy-vs-train-size line chart, one polyline per method.
pub fn plot_svg(plot_csv: &str) -> Result<String> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (n, line) in plot_csv.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Report(format!("plot data line {}: expected 3 fields", n + 1)));
        }
        let x: f64 = f[1].parse().map_err(|_| Error::Report(format!("plot data line {}: numeric train size required", n + 1)))?;
        let y: f64 = f[2].parse().map_err(|_| Error::Report(format!("plot data line {}: bad accuracy", n + 1)))?;
        match series.iter_mut().find(|(m, _)| m == f[0]) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((f[0].to_string(), vec![(x, y)])),
        }
    }
    if series.is_empty() {
        return Err(Error::Report("no plot data".into()));
    }
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 0.01;
    }
    let (w, h, m) = (480.0, 320.0, 40.0);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m,
        h - m
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = palette[i % palette.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{name}</text>\n",
            path.join(" "),
            w - m + 2.0,
            m + 14.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_renders_one_decimal() {
        let r = EvalRun::summary("BERT-base", Source::None, "PIQA", TrainSize::Low(64), 0.526, 0.009);
        assert_eq!(r.cell(), "52.6±0.9");
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_report_is_error() {
        assert!(matches!(report(&[], Layout::LowResource), Err(Error::Report(_))));
    }

    #[test]
    fn train_size_round_trips() {
        for s in [TrainSize::Low(64), TrainSize::Full] {
            assert_eq!(s.to_string().parse::<TrainSize>().unwrap(), s);
        }
    }
}
