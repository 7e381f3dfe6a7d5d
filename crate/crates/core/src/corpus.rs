//! Caption/pair ingestion, word-level tokenisation and dynamic masking.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const MASK: TokenId = 1;
pub const SEP: TokenId = 2;
pub const SPECIAL_TOKENS: [&str; 3] = ["[unk]", "[mask]", "[sep]"];
pub const DEFAULT_MAX_LEN: usize = 20;

/// Word-level vocabulary. Ids 0..3 are reserved for `[unk]`, `[mask]` and
/// `[sep]`; the remaining words keep their insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIAL_TOKENS {
            vocab.push(w);
        }
        for w in words {
            vocab.push(&w.as_ref().to_lowercase());
        }
        vocab
    }

    /// Vocabulary of every word in `texts`, sorted so the result does not
    /// depend on text order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                words.insert(clean_word(&w.to_lowercase()).to_string());
            }
        }
        words.retain(|w| !w.is_empty());
        Self::new(words)
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len() as TokenId);
            self.words.push(w.to_string());
        }
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// First id that is not a special token.
    pub fn first_regular(&self) -> TokenId {
        SPECIAL_TOKENS.len() as TokenId
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab {
            words: text.lines().map(str::to_string).collect(),
            index: HashMap::new(),
        };
        for (i, w) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.words.get(i).map(String::as_str) != Some(*w) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected special token `{w}`"),
                });
            }
        }
        vocab.rebuild_index();
        Ok(vocab)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.words.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("[unk]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Check that every id is inside the vocabulary.
    pub fn validate(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().position(|&t| t as usize >= self.len()) {
            Some(position) => Err(Error::Tokenization {
                position,
                message: format!("token id {} outside vocabulary of size {}", tokens[position], self.len()),
            }),
            None => Ok(()),
        }
    }
}

fn clean_word(w: &str) -> &str {
    w.trim_matches(|c: char| matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'' | '(' | ')'))
}

/// Lower-cased whitespace tokenisation; unknown words become `[unk]` and the
/// result is truncated to `max_len` tokens.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        if out.len() == max_len {
            break;
        }
        let lower = raw.to_lowercase();
        let id = vocab
            .id(&lower)
            .or_else(|| vocab.id(clean_word(&lower)))
            .unwrap_or(UNK);
        if clean_word(&lower).is_empty() && vocab.id(&lower).is_none() {
            continue;
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(Error::Tokenization {
            position: 0,
            message: "empty sequence".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPair {
    pub image_id: String,
    pub caption: String,
    pub split: Split,
}

/// Parse a pair file: one `image_id<TAB>caption<TAB>split` record per line.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<CaptionPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(parse_err("empty image id".into()));
        }
        if fields[1].trim().is_empty() {
            return Err(parse_err("missing caption".into()));
        }
        let split = fields[2].trim().parse().map_err(parse_err)?;
        pairs.push(CaptionPair {
            image_id: fields[0].to_string(),
            caption: fields[1].to_string(),
            split,
        });
    }
    Ok(pairs)
}

pub fn load_pairs(path: &Path) -> Result<Vec<CaptionPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

pub fn format_pairs(pairs: &[CaptionPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.image_id, p.caption, p.split))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Keep,
    RandomReplace(TokenId),
}

/// Per-token masking decisions for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    /// Selected positions in increasing order, each with its action.
    pub actions: Vec<(usize, MaskAction)>,
}

impl MaskingPlan {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.iter().map(|(p, _)| *p)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The corrupted input and the `(position, original token)` targets.
    pub fn apply(&self, tokens: &[TokenId]) -> (Vec<TokenId>, Vec<(usize, TokenId)>) {
        let mut input = tokens.to_vec();
        let mut targets = Vec::with_capacity(self.actions.len());
        for &(pos, action) in &self.actions {
            targets.push((pos, tokens[pos]));
            match action {
                MaskAction::Mask => input[pos] = MASK,
                MaskAction::Keep => {}
                MaskAction::RandomReplace(t) => input[pos] = t,
            }
        }
        (input, targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    /// Fractions of selected tokens that are masked, kept, or replaced.
    pub splits: (f64, f64, f64),
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            splits: (0.8, 0.1, 0.1),
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("masking rate must be in (0,1), got {}", self.rate)));
        }
        let (a, b, c) = self.splits;
        if [a, b, c].iter().any(|x| !(*x >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("masking splits must be >= 0 and sum to 1, got {:?}", self.splits)));
        }
        Ok(())
    }
}

/// Independent Bernoulli(`rate`) selection per token, then an action per
/// selected token drawn from `splits`. Replacement tokens are drawn uniformly
/// from the regular (non-special) vocabulary.
pub fn plan_dynamic_masking<R: Rng + ?Sized>(
    tokens: &[TokenId],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskingPlan> {
    cfg.validate()?;
    let first = SPECIAL_TOKENS.len();
    if vocab_size <= first {
        return Err(Error::Config("vocabulary has no regular tokens".into()));
    }
    let (mask_p, keep_p, _) = cfg.splits;
    let mut actions = Vec::new();
    for pos in 0..tokens.len() {
        if rng.random::<f64>() >= cfg.rate {
            continue;
        }
        let u = rng.random::<f64>();
        let action = if u < mask_p {
            MaskAction::Mask
        } else if u < mask_p + keep_p {
            MaskAction::Keep
        } else {
            MaskAction::RandomReplace(rng.random_range(first..vocab_size) as TokenId)
        };
        actions.push((pos, action));
    }
    Ok(MaskingPlan { actions })
}
