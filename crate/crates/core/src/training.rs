//! Intermediate pre-training: named methods, the training loop, voken
//! assignment and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, ModelState};
use crate::corpus::{plan_dynamic_masking, tokenize, CaptionPair, MaskingConfig, TokenId, Vocab};
use crate::encoders::{FeatureBank, ImageEncoder, Pooling, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::objectives::{
    ans_loss, cmcl_total, cosine_similarity, hinge_loss, nst_loss_with_grad, softmax_cross_entropy,
    tcl_loss_with_negatives, ContrastiveConfig, EmbeddingBatch, HardNegatives, Modality,
};
use crate::params::{normal_matrix, Optimizer, OptimizerKind, ParamVars};
use crate::perturbation::PerturbationIndex;
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mlm,
    Tcl,
    TclMlm,
    TclAns,
    TclPsaAns,
    VokenMlm,
    Cmcl,
    CmclAns,
    CmclPsaAns,
    Cmkd,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Mlm,
        Method::Tcl,
        Method::TclMlm,
        Method::TclAns,
        Method::TclPsaAns,
        Method::VokenMlm,
        Method::Cmcl,
        Method::CmclAns,
        Method::CmclPsaAns,
        Method::Cmkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mlm => "MLM",
            Method::Tcl => "TCL",
            Method::TclMlm => "TCL+MLM",
            Method::TclAns => "TCL+ANS",
            Method::TclPsaAns => "TCL+PSA+ANS",
            Method::VokenMlm => "VOKEN+MLM",
            Method::Cmcl => "CMCL",
            Method::CmclAns => "CMCL+ANS",
            Method::CmclPsaAns => "CMCL+PSA+ANS",
            Method::Cmkd => "CMKD",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Method::name).join(", ")
    }

    /// Loss terms of the method, each with weight 1.
    pub fn spec(self) -> MethodSpec {
        let w = |mlm: f64, tcl: f64, voken: f64, cmcl: f64, nst: f64| LossWeights {
            mlm,
            tcl,
            voken,
            cmcl,
            hinge: 0.0,
            nst,
        };
        let (weights, ans, psa) = match self {
            Method::Mlm => (w(1.0, 0.0, 0.0, 0.0, 0.0), false, false),
            Method::Tcl => (w(0.0, 1.0, 0.0, 0.0, 0.0), false, false),
            Method::TclMlm => (w(1.0, 1.0, 0.0, 0.0, 0.0), false, false),
            Method::TclAns => (w(0.0, 1.0, 0.0, 0.0, 0.0), true, false),
            Method::TclPsaAns => (w(0.0, 1.0, 0.0, 0.0, 0.0), true, true),
            Method::VokenMlm => (w(1.0, 0.0, 1.0, 0.0, 0.0), false, false),
            Method::Cmcl => (w(0.0, 0.0, 0.0, 1.0, 0.0), false, false),
            Method::CmclAns => (w(0.0, 0.0, 0.0, 1.0, 0.0), true, false),
            Method::CmclPsaAns => (w(0.0, 0.0, 0.0, 1.0, 0.0), true, true),
            Method::Cmkd => (w(1.0, 0.0, 0.0, 0.0, 1.0), false, false),
        };
        MethodSpec {
            label: self.name().to_string(),
            weights,
            hard_negatives: ans,
            positive_augmentation: psa,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`; valid methods: {}", Self::valid_names())))
    }
}

/// Weight of each loss term; zero disables the term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mlm: f64,
    pub tcl: f64,
    pub voken: f64,
    pub cmcl: f64,
    pub hinge: f64,
    pub nst: f64,
}

impl LossWeights {
    fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("mlm", self.mlm),
            ("tcl", self.tcl),
            ("voken", self.voken),
            ("cmcl", self.cmcl),
            ("hinge", self.hinge),
            ("nst", self.nst),
        ]
    }

    pub fn get(&self, name: &str) -> f64 {
        self.entries().iter().find(|(n, _)| *n == name).map_or(0.0, |e| e.1)
    }

    fn cross_modal(&self) -> bool {
        self.cmcl > 0.0 || self.hinge > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub weights: LossWeights,
    /// Use adversarial perturbations as hard negatives.
    pub hard_negatives: bool,
    /// Use equivalent perturbations as extra positives.
    pub positive_augmentation: bool,
}

impl MethodSpec {
    pub fn custom(label: impl Into<String>, weights: LossWeights) -> Self {
        Self {
            label: label.into(),
            weights,
            hard_negatives: false,
            positive_augmentation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let entries = self.weights.entries();
        if let Some((name, w)) = entries.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
        }
        if entries.iter().all(|(_, w)| *w == 0.0) {
            return Err(Error::Config(format!("method `{}` has no active loss term", self.label)));
        }
        let contrastive = self.weights.tcl > 0.0 || self.weights.cmcl > 0.0;
        if (self.hard_negatives || self.positive_augmentation) && !contrastive {
            return Err(Error::Config(format!(
                "method `{}`: perturbation samples need a contrastive term",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub margin: f64,
    pub seed: u64,
    /// Hard negatives per item (`M`) for the ANS variants.
    pub hard_negatives: usize,
    pub dim: usize,
    pub depth: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub optimizer: OptimizerKind,
    pub masking: MaskingConfig,
    /// Voken bank size `K`.
    pub voken_count: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_len: 20,
            learning_rate: 1e-4,
            epochs: 3,
            temperature: 0.05,
            margin: 1.0,
            seed: 0,
            hard_negatives: 4,
            dim: 32,
            depth: 2,
            dropout: 0.1,
            pooling: Pooling::Mean,
            optimizer: OptimizerKind::Sgd,
            masking: MaskingConfig::default(),
            voken_count: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 || self.dim == 0 || self.depth == 0 {
            return Err(Error::Config("batch_size, max_len, dim and depth must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.voken_count == 0 {
            return Err(Error::Config("voken_count must be positive".into()));
        }
        self.contrastive(0).validate()?;
        self.masking.validate()
    }

    pub fn encoder_config(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            dim: self.dim,
            depth: self.depth,
            ffn_dim: 2 * self.dim,
            max_len: self.max_len,
            dropout: self.dropout,
            pooling: self.pooling,
        }
    }

    fn contrastive(&self, m: usize) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            margin: self.margin,
            hard_negative_count: m,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("pretrain config: {e}")))
    }
}

/// Everything a run may read. Which fields are required depends on the
/// method.
#[derive(Debug, Clone)]
pub struct PretrainInputs {
    pub vocab: Vocab,
    /// Text corpus for text-only methods and distillation.
    pub captions: Vec<String>,
    /// Caption-image pairs for cross-modal methods and voken grounding.
    pub pairs: Vec<CaptionPair>,
    pub bank: Option<FeatureBank>,
    pub perturbations: Option<PerturbationIndex>,
    /// Teacher model for distillation.
    pub teacher: Option<ModelState>,
    /// Starting point; a fresh model is initialised when absent.
    pub init: Option<ModelState>,
}

impl PretrainInputs {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            captions: Vec::new(),
            pairs: Vec::new(),
            bank: None,
            perturbations: None,
            teacher: None,
            init: None,
        }
    }

    /// Pairs plus their captions as the text corpus.
    pub fn from_pairs(vocab: Vocab, pairs: Vec<CaptionPair>, bank: Option<FeatureBank>) -> Self {
        let mut inputs = Self::new(vocab);
        inputs.captions = pairs.iter().map(|p| p.caption.clone()).collect();
        inputs.pairs = pairs;
        inputs.bank = bank;
        inputs
    }
}

#[derive(Debug, Clone)]
struct Item {
    tokens: Vec<TokenId>,
    image: Option<String>,
    negatives: Vec<Vec<TokenId>>,
}

/// Losses of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<StepRecord>,
}

impl LossLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| if name == "total" { r.total } else { r.components.get(name).copied().unwrap_or(f64::NAN) })
            .collect()
    }

    /// `step,epoch,<component columns>,total` with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",total\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.step, r.epoch));
            for c in &self.columns {
                out.push_str(&format!(",{}", r.components.get(c).copied().unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(",{}\n", r.total));
        }
        out
    }
}

const PASS_MLM: u64 = 0;
const PASS_TCL_ANCHOR: u64 = 1;
const PASS_TCL_POSITIVE: u64 = 2;
const PASS_CROSS: u64 = 3;

/// A pre-training run in progress. Owns the model and optimiser state.
pub struct Trainer<'a> {
    spec: MethodSpec,
    config: PretrainConfig,
    inputs: &'a PretrainInputs,
    items: Vec<Item>,
    vokens: Vec<Vec<Option<usize>>>,
    model: ModelState,
    optimizers: [Optimizer; 3],
    step: u64,
    epoch: usize,
}

fn missing(what: &str, label: &str) -> Error {
    Error::Config(format!("method `{label}` requires {what}, which was not provided"))
}

impl<'a> Trainer<'a> {
    pub fn new(spec: MethodSpec, config: PretrainConfig, inputs: &'a PretrainInputs) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let w = spec.weights;
        let label = spec.label.as_str();
        let cross = w.cross_modal();
        if (cross || w.voken > 0.0) && inputs.pairs.is_empty() {
            return Err(missing("caption-image pairs", label));
        }
        if (cross || w.voken > 0.0) && inputs.bank.is_none() {
            return Err(missing("an image feature bank", label));
        }
        if (spec.hard_negatives || spec.positive_augmentation) && inputs.perturbations.is_none() {
            return Err(missing("perturbation records", label));
        }
        if w.nst > 0.0 && inputs.teacher.is_none() {
            return Err(missing("a teacher checkpoint", label));
        }
        let tok = |text: &str| tokenize(text, &inputs.vocab, config.max_len);
        let neg_pool = |caption: &str| -> Result<Vec<Vec<TokenId>>> {
            match (&inputs.perturbations, spec.hard_negatives) {
                (Some(p), true) => p.negatives_for(caption).iter().map(|c| tok(c)).collect(),
                _ => Ok(Vec::new()),
            }
        };
        let mut items = Vec::new();
        let use_pairs = cross || w.voken > 0.0;
        let sources: Vec<(&str, Option<&str>)> = if use_pairs {
            inputs.pairs.iter().map(|p| (p.caption.as_str(), Some(p.image_id.as_str()))).collect()
        } else {
            inputs.captions.iter().map(|c| (c.as_str(), None)).collect()
        };
        if sources.is_empty() {
            return Err(missing("a non-empty text corpus", label));
        }
        for &(caption, image) in &sources {
            items.push(Item {
                tokens: tok(caption)?,
                image: image.map(String::from),
                negatives: neg_pool(caption)?,
            });
        }
        if spec.positive_augmentation {
            let index = inputs.perturbations.as_ref().expect("checked above");
            for &(caption, image) in &sources {
                for extra in index.positives_for(caption) {
                    items.push(Item {
                        tokens: tok(extra)?,
                        image: image.map(String::from),
                        negatives: neg_pool(caption)?,
                    });
                }
            }
        }
        if let Some(bank) = &inputs.bank {
            for item in items.iter().filter(|i| i.image.is_some()) {
                bank.row_of(item.image.as_deref().unwrap())?;
            }
        }

        let mut model = match &inputs.init {
            Some(m) => m.clone(),
            None => ModelState::text_only(TextEncoder::new(
                config.encoder_config(inputs.vocab.len()),
                seed::derive(config.seed, &[stream::INIT]),
            )?),
        };
        if model.text.config().vocab_size != inputs.vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocabulary size {} does not match vocabulary of {} entries",
                model.text.config().vocab_size,
                inputs.vocab.len()
            )));
        }
        let d = model.text.dim();
        if cross && model.image.is_none() {
            let bank = inputs.bank.as_ref().expect("checked above");
            let mut rng = seed::rng(seed::derive(config.seed, &[stream::INIT, 1]));
            model.image = Some(ImageEncoder::new(bank.dim(), d, &mut rng));
        }
        if let (true, Some(img)) = (cross, &model.image) {
            if img.dim() != d {
                return Err(Error::Config(format!("image head dim {} does not match text dim {d}", img.dim())));
            }
        }
        let mut vokens = Vec::new();
        if w.voken > 0.0 {
            let bank = inputs.bank.as_ref().expect("checked above");
            let grounding = CooccurrenceGrounding::new(&inputs.vocab, &inputs.pairs, bank, config.max_len)?;
            let voken_bank = sample_voken_bank(bank, config.voken_count, config.seed);
            let k = voken_bank.nrows();
            for item in &items {
                vokens.push(assign_vokens(&item.tokens, &voken_bank, |t| grounding.embed(t))?);
            }
            if model.extra.get("voken_w").is_none() {
                model.extra.insert("voken_w", Array2::zeros((d, k)));
                model.extra.insert("voken_b", Array2::zeros((1, k)));
            }
        }
        if let Some(teacher) = &inputs.teacher {
            let tcfg = teacher.text.config();
            if tcfg.depth != model.text.config().depth {
                return Err(Error::Config(format!(
                    "teacher has {} layers but student has {}; NST pairs layers one to one",
                    tcfg.depth,
                    model.text.config().depth
                )));
            }
            if tcfg.dim != d {
                let mut rng = seed::rng(seed::derive(config.seed, &[stream::INIT, 2]));
                for l in 0..tcfg.depth {
                    let name = format!("nst_adapter{l}");
                    if model.extra.get(&name).is_none() {
                        model.extra.insert(name, normal_matrix(&mut rng, d, tcfg.dim, 1.0 / (d as f64).sqrt()));
                    }
                }
            }
        }
        let (kind, lr) = (config.optimizer, config.learning_rate);
        let opt = || Optimizer::new(kind, lr);
        Ok(Self {
            spec,
            config,
            inputs,
            items,
            vokens,
            model,
            optimizers: [opt(), opt(), opt()],
            step: 0,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &MethodSpec {
        &self.spec
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_tokens(&self, item: usize) -> &[TokenId] {
        &self.items[item].tokens
    }

    pub fn item_image(&self, item: usize) -> Option<&str> {
        self.items[item].image.as_deref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Logged loss columns, in order.
    pub fn columns(&self) -> Vec<String> {
        let w = self.spec.weights;
        let teacher = self.inputs.teacher.is_some();
        w.entries()
            .iter()
            .filter(|(n, v)| *v > 0.0 || (*n == "nst" && teacher))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Item indices of each batch of `epoch` (0-based).
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(self.config.seed, &[stream::SHUFFLE, epoch as u64])));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Corrupted input and `(position, original)` targets of an item.
    pub fn masked_item(&self, item: usize, epoch: usize) -> Result<(Vec<TokenId>, Vec<(usize, TokenId)>)> {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[stream::MASKING, epoch as u64, item as u64]));
        let tokens = &self.items[item].tokens;
        let plan = plan_dynamic_masking(tokens, &self.config.masking, self.inputs.vocab.len(), &mut rng)?;
        Ok(plan.apply(tokens))
    }

    /// Dropout seed of forward pass `pass` at `step`.
    pub fn dropout_seed(&self, step: u64, pass: u64) -> u64 {
        seed::derive(self.config.seed, &[stream::DROPOUT, step, pass])
    }

    /// Hard negatives of `item` used at `step`: up to `M` drawn without
    /// replacement from its pool.
    pub fn step_negatives(&self, item: usize, step: u64) -> Vec<Vec<TokenId>> {
        let pool = &self.items[item].negatives;
        let m = self.config.hard_negatives;
        if !self.spec.hard_negatives || m == 0 {
            return Vec::new();
        }
        if pool.len() <= m {
            return pool.clone();
        }
        let mut rng = seed::rng(seed::derive(self.config.seed, &[stream::NEGATIVES, step, item as u64]));
        let mut picks = rand::seq::index::sample(&mut rng, pool.len(), m).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| pool[i].clone()).collect()
    }

    /// Mismatched partner of each batch row for the margin loss:
    /// `(image partner, caption partner)`.
    pub fn hinge_partners(&self, n: usize, step: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[stream::NEGATIVES, step, u64::MAX]));
        let mut draw = || -> Vec<usize> {
            (0..n)
                .map(|i| if n == 1 { i } else { (i + 1 + rng.random_range(0..n - 1)) % n })
                .collect()
        };
        let images = draw();
        let texts = draw();
        (images, texts)
    }

    /// Losses and gradients of one batch at the current parameters.
    pub fn step_losses(&self, batch: &[usize], step: u64, epoch: usize) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let w = self.spec.weights;
        let text = &self.model.text;
        let n = batch.len();
        let d = text.dim();
        let mut tape = Tape::new();
        let mut seeds = Vec::new();
        let mut text_vars: Vec<ParamVars> = Vec::new();
        let mut image_vars: Option<ParamVars> = None;
        let extra_vars = self.model.extra.bind(&mut tape);
        let mut components = BTreeMap::new();
        let tokens: Vec<Vec<TokenId>> = batch.iter().map(|&i| self.items[i].tokens.clone()).collect();

        if w.mlm > 0.0 || w.voken > 0.0 {
            let masked: Vec<_> = batch.iter().map(|&i| self.masked_item(i, epoch)).collect::<Result<_>>()?;
            let inputs: Vec<Vec<TokenId>> = masked.iter().map(|m| m.0.clone()).collect();
            let fwd = text.forward(&mut tape, &inputs, Some(self.dropout_seed(step, PASS_MLM)))?;
            if w.mlm > 0.0 {
                let mut positions = Vec::new();
                let mut targets = Vec::new();
                for (s, (_, t)) in masked.iter().enumerate() {
                    for &(p, tok) in t {
                        positions.push((s, p));
                        targets.push(tok as usize);
                    }
                }
                let mut value = 0.0;
                if !positions.is_empty() {
                    let logits = text.mlm_logits(&mut tape, &fwd, &positions);
                    let (res, g) = softmax_cross_entropy(tape.value(logits), &targets)?;
                    value = res.total;
                    seeds.push((logits, g * w.mlm));
                }
                components.insert("mlm".to_string(), value);
            }
            if w.voken > 0.0 {
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                let mut offset = 0;
                for &i in batch {
                    for (p, v) in self.vokens[i].iter().enumerate() {
                        if let Some(v) = v {
                            rows.push(offset + p);
                            targets.push(*v);
                        }
                    }
                    offset += self.items[i].tokens.len();
                }
                let mut value = 0.0;
                if !rows.is_empty() {
                    let states = tape.stack_rows(fwd.token_states.clone());
                    let h = tape.gather(states, rows);
                    let logits = tape.matmul(h, extra_vars.var("voken_w"));
                    let logits = tape.add_row(logits, extra_vars.var("voken_b"));
                    let (res, g) = softmax_cross_entropy(tape.value(logits), &targets)?;
                    value = res.total;
                    seeds.push((logits, g * w.voken));
                }
                components.insert("voken".to_string(), value);
            }
            text_vars.push(fwd.params);
        }

        let negatives: Vec<Vec<Vec<TokenId>>> = batch.iter().map(|&i| self.step_negatives(i, step)).collect();
        let m = if self.spec.hard_negatives { self.config.hard_negatives } else { 0 };
        // Captions followed by their hard negatives, plus the row of each
        // negative in that stacked pass.
        let with_negatives = || {
            let mut all = tokens.clone();
            let mut rows = vec![Vec::new(); n];
            for (i, negs) in negatives.iter().enumerate() {
                for neg in negs {
                    rows[i].push(all.len());
                    all.push(neg.clone());
                }
            }
            (all, rows)
        };
        let hard_negative_tensor = |pooled: &Array2<f64>, rows: &[Vec<usize>]| -> Result<HardNegatives> {
            let mut t = Array3::zeros((n, m, d));
            for (i, r) in rows.iter().enumerate() {
                for (k, &row) in r.iter().enumerate() {
                    t.slice_mut(ndarray::s![i, k, ..]).assign(&pooled.row(row));
                }
            }
            HardNegatives::ragged(t, rows.iter().map(Vec::len).collect())
        };
        let scatter_negatives = |seed_rows: &mut Array2<f64>, rows: &[Vec<usize>], g: &Array2<f64>, weight: f64| {
            for (i, r) in rows.iter().enumerate() {
                for (k, &row) in r.iter().enumerate() {
                    seed_rows.row_mut(row).scaled_add(weight, &g.row(i * m + k));
                }
            }
        };

        if w.tcl > 0.0 {
            let (anchor_tokens, neg_rows) = with_negatives();
            let fa = text.forward(&mut tape, &anchor_tokens, Some(self.dropout_seed(step, PASS_TCL_ANCHOR)))?;
            let fb = text.forward(&mut tape, &tokens, Some(self.dropout_seed(step, PASS_TCL_POSITIVE)))?;
            let pooled_a = tape.value(fa.pooled).clone();
            let reps = EmbeddingBatch::sequential(pooled_a.slice(ndarray::s![..n, ..]).to_owned(), Modality::Text)?;
            let pos = EmbeddingBatch::sequential(tape.value(fb.pooled).clone(), Modality::Text)?;
            let negs = if self.spec.hard_negatives {
                Some(hard_negative_tensor(&pooled_a, &neg_rows)?)
            } else {
                None
            };
            let res = tcl_loss_with_negatives(&reps, &pos, negs.as_ref(), self.config.temperature)?;
            let g = res.gradients.expect("contrastive losses return gradients");
            let mut seed_a = Array2::zeros(pooled_a.raw_dim());
            seed_a.slice_mut(ndarray::s![..n, ..]).scaled_add(w.tcl, &g[0]);
            if let Some(gn) = g.get(2) {
                scatter_negatives(&mut seed_a, &neg_rows, gn, w.tcl);
            }
            seeds.push((fa.pooled, seed_a));
            seeds.push((fb.pooled, &g[1] * w.tcl));
            components.insert("tcl".to_string(), res.total);
            text_vars.push(fa.params);
            text_vars.push(fb.params);
        }

        if w.cross_modal() {
            let bank = self.inputs.bank.as_ref().expect("checked at construction");
            let image = self.model.image.as_ref().expect("created at construction");
            let ids: Vec<&str> = batch.iter().map(|&i| self.items[i].image.as_deref().unwrap()).collect();
            let (text_tokens, neg_rows) = if w.cmcl > 0.0 { with_negatives() } else { (tokens.clone(), vec![Vec::new(); n]) };
            let ft = text.forward(&mut tape, &text_tokens, Some(self.dropout_seed(step, PASS_CROSS)))?;
            let (img_var, img_params) = image.forward(&mut tape, bank, &ids)?;
            let pooled = tape.value(ft.pooled).clone();
            let txt = EmbeddingBatch::sequential(pooled.slice(ndarray::s![..n, ..]).to_owned(), Modality::Text)?;
            let img = EmbeddingBatch::sequential(tape.value(img_var).clone(), Modality::Image)?;
            let mut seed_t = Array2::zeros(pooled.raw_dim());
            let mut seed_i = Array2::zeros((n, d));
            if w.cmcl > 0.0 {
                let res = if self.spec.hard_negatives {
                    let negs = hard_negative_tensor(&pooled, &neg_rows)?;
                    ans_loss(&img, &txt, &negs, &self.config.contrastive(m))?
                } else {
                    cmcl_total(&img, &txt, &self.config.contrastive(0))?
                };
                let g = res.gradients.expect("contrastive losses return gradients");
                seed_i.scaled_add(w.cmcl, &g[0]);
                seed_t.slice_mut(ndarray::s![..n, ..]).scaled_add(w.cmcl, &g[1]);
                if let Some(gn) = g.get(2) {
                    scatter_negatives(&mut seed_t, &neg_rows, gn, w.cmcl);
                }
                components.insert("cmcl".to_string(), res.total);
            }
            if w.hinge > 0.0 {
                let (pi, pt) = self.hinge_partners(n, step);
                let neg_img = EmbeddingBatch::sequential(img.vectors().select(Axis(0), &pi), Modality::Image)?;
                let neg_txt = EmbeddingBatch::sequential(txt.vectors().select(Axis(0), &pt), Modality::Text)?;
                let res = hinge_loss(&img, &txt, &neg_img, &neg_txt, self.config.margin)?;
                let g = res.gradients.expect("hinge loss returns gradients");
                seed_i.scaled_add(w.hinge, &g[0]);
                seed_t.slice_mut(ndarray::s![..n, ..]).scaled_add(w.hinge, &g[1]);
                for i in 0..n {
                    seed_i.row_mut(pi[i]).scaled_add(w.hinge, &g[2].row(i));
                    seed_t.row_mut(pt[i]).scaled_add(w.hinge, &g[3].row(i));
                }
                components.insert("hinge".to_string(), res.total);
            }
            seeds.push((ft.pooled, seed_t));
            seeds.push((img_var, seed_i));
            text_vars.push(ft.params);
            image_vars = Some(img_params);
        }

        if let Some(teacher) = &self.inputs.teacher {
            let mut ttape = Tape::new();
            let tf = teacher.text.forward(&mut ttape, &tokens, None)?;
            let fs = text.forward(&mut tape, &tokens, None)?;
            let layers = fs.layer_pooled.len();
            let mut total = 0.0;
            for (l, (&sv, &tv)) in fs.layer_pooled.iter().zip(&tf.layer_pooled).enumerate() {
                let name = format!("nst_adapter{l}");
                let student = if self.model.extra.get(&name).is_some() {
                    tape.matmul(sv, extra_vars.var(&name))
                } else {
                    sv
                };
                let (loss, g) = nst_loss_with_grad(ttape.value(tv), tape.value(student))?;
                total += loss / layers as f64;
                if w.nst > 0.0 {
                    seeds.push((student, g * (w.nst / layers as f64)));
                }
            }
            components.insert("nst".to_string(), total);
            text_vars.push(fs.params);
        }

        let total: f64 = components.iter().map(|(k, v)| w.get(k) * v).sum();
        if !total.is_finite() {
            return Err(Error::Training {
                step: step as usize,
                message: format!("non-finite loss {total} ({components:?})"),
            });
        }
        let grads = tape.backward(&seeds);
        let mut text_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for vars in &text_vars {
            for (name, g) in vars.collect(&grads) {
                match text_grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        text_grads.insert(name, g);
                    }
                }
            }
        }
        let image_grads = image_vars.map(|v| v.collect(&grads)).unwrap_or_default();
        let extra_grads = extra_vars.collect(&grads);
        for g in text_grads.values().chain(image_grads.values()).chain(extra_grads.values()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: step as usize,
                    message: "non-finite gradient".into(),
                });
            }
        }
        Ok(StepOutcome {
            record: StepRecord {
                step,
                epoch,
                components,
                total,
            },
            text_grads,
            image_grads,
            extra_grads,
        })
    }

    fn apply(&mut self, outcome: &StepOutcome) {
        let [t, i, e] = &mut self.optimizers;
        t.step(self.model.text.params_mut(), &outcome.text_grads);
        if let Some(img) = self.model.image.as_mut() {
            i.step(img.head_mut(), &outcome.image_grads);
        }
        e.step(&mut self.model.extra, &outcome.extra_grads);
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepRecord> {
        let outcome = self.step_losses(batch, self.step, self.epoch)?;
        self.apply(&outcome);
        self.step += 1;
        Ok(outcome.record)
    }

    /// One pass over the data; returns its step records.
    pub fn run_epoch(&mut self) -> Result<Vec<StepRecord>> {
        let batches = self.epoch_batches(self.epoch);
        let mut records = Vec::with_capacity(batches.len());
        for batch in batches {
            records.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let echo = serde_json::json!({ "method": self.spec, "config": self.config });
        self.model.to_checkpoint(self.step, self.epoch, echo)
    }
}

/// Losses and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub text_grads: BTreeMap<String, Array2<f64>>,
    pub image_grads: BTreeMap<String, Array2<f64>>,
    pub extra_grads: BTreeMap<String, Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Checkpoint after each epoch.
    pub epochs: Vec<Checkpoint>,
    /// Last checkpoint (the initial model when no epoch ran).
    pub final_checkpoint: Checkpoint,
    pub log: LossLog,
    pub model: ModelState,
}

pub fn pretrain(spec: MethodSpec, inputs: &PretrainInputs, config: PretrainConfig) -> Result<PretrainOutput> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(spec, config, inputs)?;
    let mut log = LossLog {
        columns: trainer.columns(),
        rows: Vec::new(),
    };
    let mut series = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        log.rows.extend(trainer.run_epoch()?);
        series.push(trainer.checkpoint());
    }
    let final_checkpoint = series.last().cloned().unwrap_or_else(|| trainer.checkpoint());
    Ok(PretrainOutput {
        epochs: series,
        final_checkpoint,
        log,
        model: trainer.into_model(),
    })
}

/// Token embeddings grounded in images: the mean image feature over the
/// pairs whose caption contains the token. Tokens that never occur in a
/// paired caption get the zero vector.
pub struct CooccurrenceGrounding {
    table: Array2<f64>,
}

impl CooccurrenceGrounding {
    pub fn new(vocab: &Vocab, pairs: &[CaptionPair], bank: &FeatureBank, max_len: usize) -> Result<Self> {
        let mut table = Array2::zeros((vocab.len(), bank.dim()));
        let mut counts = vec![0usize; vocab.len()];
        for pair in pairs {
            let feats = bank.features(&pair.image_id)?;
            let mut seen: Vec<TokenId> = tokenize(&pair.caption, vocab, max_len)?;
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                let mut row = table.row_mut(t as usize);
                for (r, &f) in row.iter_mut().zip(feats) {
                    *r += f as f64;
                }
                counts[t as usize] += 1;
            }
        }
        for (t, &c) in counts.iter().enumerate() {
            if c > 0 {
                table.row_mut(t).mapv_inplace(|v| v / c as f64);
            }
        }
        Ok(Self { table })
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        self.table.select(Axis(0), &tokens.iter().map(|&t| t as usize).collect::<Vec<_>>())
    }
}

/// `K` distinct image rows of the bank, chosen by seed, in bank order.
pub fn sample_voken_bank(bank: &FeatureBank, k: usize, global_seed: u64) -> Array2<f64> {
    let k = k.min(bank.len());
    let mut rng = seed::rng(seed::derive(global_seed, &[stream::VOKEN]));
    let mut rows = rand::seq::index::sample(&mut rng, bank.len(), k).into_vec();
    rows.sort_unstable();
    Array2::from_shape_fn((k, bank.dim()), |(i, j)| bank.row(rows[i])[j] as f64)
}

/// Nearest voken (by cosine similarity) of each token under
/// `text_embedding`, which maps a token sequence to one row per token.
/// Ties go to the lowest voken id. Tokens with a zero embedding get `None`,
/// as do all tokens if every bank row is zero.
pub fn assign_vokens(
    tokens: &[TokenId],
    voken_bank: &Array2<f64>,
    text_embedding: impl Fn(&[TokenId]) -> Array2<f64>,
) -> Result<Vec<Option<usize>>> {
    if voken_bank.nrows() == 0 {
        return Err(Error::Config("voken bank is empty".into()));
    }
    let emb = text_embedding(tokens);
    if emb.nrows() != tokens.len() || emb.ncols() != voken_bank.ncols() {
        return Err(Error::Shape(format!(
            "token embeddings {:?} do not match {} tokens of dim {}",
            emb.dim(),
            tokens.len(),
            voken_bank.ncols()
        )));
    }
    let bank_rows: Vec<Vec<f64>> = voken_bank.rows().into_iter().map(|r| r.to_vec()).collect();
    let nonzero = |v: &[f64]| v.iter().any(|x| *x != 0.0);
    emb.rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            if !nonzero(&row) {
                return Ok(None);
            }
            let mut best: Option<(usize, f64)> = None;
            for (k, b) in bank_rows.iter().enumerate() {
                if !nonzero(b) {
                    continue;
                }
                let s = cosine_similarity(&row, b)?;
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((k, s));
                }
            }
            Ok(best.map(|(k, _)| k))
        })
        .collect()
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("spearman inputs have lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Shape("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman inputs must be finite".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Validation("spearman correlation is undefined for a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sentence pair with a gold similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityItem {
    pub a: String,
    pub b: String,
    pub score: f64,
}

/// `a<TAB>b<TAB>score` lines.
pub fn format_similarity(items: &[SimilarityItem]) -> String {
    items.iter().map(|i| format!("{}\t{}\t{}\n", i.a, i.b, i.score)).collect()
}

pub fn parse_similarity(text: &str, origin: &str) -> Result<Vec<SimilarityItem>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let score = fields[2].trim().parse().map_err(|e| parse_err(format!("bad score: {e}")))?;
        out.push(SimilarityItem {
            a: fields[0].to_string(),
            b: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Spearman correlation between cosine similarities of encoded pairs and
/// gold scores.
pub fn similarity_correlation(encoder: &TextEncoder, vocab: &Vocab, heldout: &[SimilarityItem]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Validation("held-out similarity set is empty".into()));
    }
    let max_len = encoder.config().max_len;
    let a: Vec<_> = heldout.iter().map(|i| tokenize(&i.a, vocab, max_len)).collect::<Result<_>>()?;
    let b: Vec<_> = heldout.iter().map(|i| tokenize(&i.b, vocab, max_len)).collect::<Result<_>>()?;
    let ea = encoder.encode_text(&a, None)?;
    let eb = encoder.encode_text(&b, None)?;
    let sims: Vec<f64> = (0..heldout.len())
        .map(|i| {
            cosine_similarity(
                ea.vectors().row(i).as_slice().expect("contiguous"),
                eb.vectors().row(i).as_slice().expect("contiguous"),
            )
        })
        .collect::<Result<_>>()?;
    let gold: Vec<f64> = heldout.iter().map(|i| i.score).collect();
    spearman(&sims, &gold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Index of the checkpoint with the best held-out correlation (earliest on
/// ties), plus every checkpoint's score.
pub fn select_checkpoint(series: &[Checkpoint], heldout: &[SimilarityItem], vocab: &Vocab) -> Result<Selection> {
    if series.is_empty() {
        return Err(Error::Validation("no checkpoints to select from".into()));
    }
    if series.len() == 1 {
        return Ok(Selection {
            index: 0,
            scores: vec![f64::NAN],
        });
    }
    let mut scores = Vec::with_capacity(series.len());
    for ckpt in series {
        let model = ModelState::from_checkpoint(ckpt)?;
        scores.push(similarity_correlation(&model.text, vocab, heldout)?);
    }
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    Ok(Selection { index, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            m.spec().validate().unwrap();
        }
        let err = "BOGUS".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("CMCL+PSA+ANS"));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Validation(_))));
        assert!(matches!(spearman(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn voken_single_bank_row_and_exact_match() {
        let bank = array![[1.0, 0.0]];
        let out = assign_vokens(&[3, 4], &bank, |t| Array2::from_elem((t.len(), 2), 0.5)).unwrap();
        assert_eq!(out, vec![Some(0), Some(0)]);
        let bank = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let out = assign_vokens(&[3], &bank, |_| array![[0.0, 1.0]]).unwrap();
        assert_eq!(out, vec![Some(1)]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(assign_vokens(&[3], &empty, |_| array![[0.0, 1.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_partial_toml() {
        let cfg = PretrainConfig::from_toml("batch_size = 8\nlearning_rate = 0.01\n").unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.epochs, 3);
        assert!(PretrainConfig::from_toml("bogus = 1").is_err());
    }
}
