//! LM-perturbed captions: adversarial negatives and augmented positives.
//!
//! A perturbation pass picks up to `n` noun/verb positions in a caption,
//! asks a masked-LM oracle for its top-`k` fillers at each position, and
//! sorts every single-word rewrite by a lexicon check: fillers that are
//! synonyms or (transitive) hypernyms of the original word describe the same
//! scene and become positives, everything else is a hard negative.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{TokenId, Vocab, SPECIAL_TOKENS};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pos {
    Noun,
    Verb,
    Other,
}

impl FromStr for Pos {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "noun" | "n" => Ok(Pos::Noun),
            "verb" | "v" => Ok(Pos::Verb),
            "other" | "x" => Ok(Pos::Other),
            other => Err(format!("unknown part of speech `{other}`")),
        }
    }
}

/// Dictionary tagger: `word<TAB>pos` per line; unlisted words are `Other`.
#[derive(Debug, Clone, Default)]
pub struct PosTagger {
    tags: HashMap<String, Pos>,
}

impl PosTagger {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Pos)>,
        S: Into<String>,
    {
        Self {
            tags: entries.into_iter().map(|(w, p)| (w.into(), p)).collect(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut tags = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (word, pos) = line.split_once('\t').ok_or_else(|| parse_err("expected word<TAB>pos".into()))?;
            tags.insert(word.trim().to_lowercase(), pos.trim().parse().map_err(parse_err)?);
        }
        Ok(Self { tags })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn tag(&self, word: &str) -> Pos {
        self.tags.get(word).copied().unwrap_or(Pos::Other)
    }

    pub fn to_text(&self) -> String {
        let sorted: BTreeMap<_, _> = self.tags.iter().collect();
        sorted
            .into_iter()
            .map(|(w, p)| {
                let p = match p {
                    Pos::Noun => "noun",
                    Pos::Verb => "verb",
                    Pos::Other => "other",
                };
                format!("{w}\t{p}\n")
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relation {
    Synonym,
    Hypernym,
}

/// Word-level synonym sets and hypernym edges.
///
/// File format: `word<TAB>syn|hyper<TAB>word` per line. `a syn b` is
/// symmetric; `a hyper b` reads "b is a hypernym of a".
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    synonyms: BTreeMap<String, BTreeSet<String>>,
    hypernyms: BTreeMap<String, BTreeSet<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: &str, relation: Relation, other: &str) {
        let (w, o) = (word.to_lowercase(), other.to_lowercase());
        match relation {
            Relation::Synonym => {
                self.synonyms.entry(w.clone()).or_default().insert(o.clone());
                self.synonyms.entry(o).or_default().insert(w);
            }
            Relation::Hypernym => {
                self.hypernyms.entry(w).or_default().insert(o);
            }
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != 3 || fields[0].is_empty() || fields[2].is_empty() {
                return Err(parse_err("expected word<TAB>relation<TAB>word".into()));
            }
            let relation = match fields[1] {
                "syn" => Relation::Synonym,
                "hyper" => Relation::Hypernym,
                other => return Err(parse_err(format!("unknown relation `{other}`"))),
            };
            lex.add(fields[0], relation, fields[2]);
        }
        lex.check_acyclic()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, syns) in &self.synonyms {
            for s in syns.iter().filter(|s| w < *s) {
                out.push_str(&format!("{w}\tsyn\t{s}\n"));
            }
        }
        for (w, hypers) in &self.hypernyms {
            for h in hypers {
                out.push_str(&format!("{w}\thyper\t{h}\n"));
            }
        }
        out
    }

    fn check_acyclic(&self) -> Result<()> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(lex: &'a Lexicon, w: &'a str, state: &mut HashMap<&'a str, u8>) -> Result<()> {
            match state.get(w) {
                Some(1) => return Err(Error::Validation(format!("hypernym cycle through `{w}`"))),
                Some(2) => return Ok(()),
                _ => {}
            }
            state.insert(w, 1);
            if let Some(parents) = lex.hypernyms.get(w) {
                for p in parents {
                    visit(lex, p, state)?;
                }
            }
            state.insert(w, 2);
            Ok(())
        }
        for w in self.hypernyms.keys() {
            visit(self, w, &mut state)?;
        }
        Ok(())
    }

    pub fn words(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for (w, set) in self.synonyms.iter().chain(&self.hypernyms) {
            out.insert(w.as_str());
            out.extend(set.iter().map(String::as_str));
        }
        out
    }

    /// Every word reachable from `word` through synonym links (both ways)
    /// and hypernym links (upwards), i.e. the union over all senses of the
    /// synonyms and ancestors. `word` itself is excluded.
    pub fn related(&self, word: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([word.to_string()]);
        while let Some(w) = queue.pop_front() {
            let next = self.synonyms.get(&w).into_iter().chain(self.hypernyms.get(&w)).flatten();
            for n in next {
                if n != word && seen.insert(n.clone()) {
                    queue.push_back(n.clone());
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    AdversarialNegative,
    EquivalentPositive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::AdversarialNegative => "adversarial_negative",
            Verdict::EquivalentPositive => "equivalent_positive",
        })
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adversarial_negative" => Ok(Verdict::AdversarialNegative),
            "equivalent_positive" => Ok(Verdict::EquivalentPositive),
            other => Err(format!("unknown verdict `{other}`")),
        }
    }
}

pub fn filter_candidate(original: &str, candidate: &str, lexicon: &Lexicon) -> Verdict {
    if lexicon.related(original).contains(candidate) {
        Verdict::EquivalentPositive
    } else {
        Verdict::AdversarialNegative
    }
}

/// One single-word rewrite of a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationRecord {
    /// Original caption as space-joined lower-case words.
    pub original: String,
    pub position: usize,
    pub original_word: String,
    pub replacement: String,
    pub verdict: Verdict,
}

impl PerturbationRecord {
    pub fn rewritten(&self) -> String {
        let mut words = caption_words(&self.original);
        if let Some(w) = words.get_mut(self.position) {
            *w = self.replacement.clone();
        }
        words.join(" ")
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.original, self.position, self.original_word, self.replacement, self.verdict
        )
    }
}

pub fn format_records(records: &[PerturbationRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<PerturbationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", f.len())));
        }
        let position: usize = f[1].parse().map_err(|e| parse_err(format!("bad position: {e}")))?;
        let record = PerturbationRecord {
            original: f[0].to_string(),
            position,
            original_word: f[2].to_string(),
            replacement: f[3].to_string(),
            verdict: f[4].parse().map_err(parse_err)?,
        };
        if caption_words(&record.original).get(position).map(String::as_str) != Some(record.original_word.as_str()) {
            return Err(parse_err(format!("position {position} does not hold `{}`", record.original_word)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<PerturbationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

/// Lower-cased words with surrounding punctuation removed.
pub fn caption_words(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_matches(|c: char| matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'' | '(' | ')'))
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Masked-LM fill-in interface: ranked candidates (best first) with scores for
/// the word at `position`.
pub trait MaskedLmOracle {
    fn predict(&self, words: &[String], position: usize, k: usize) -> Result<Vec<(String, f64)>>;
}

/// Context-free lookup table: `word<TAB>cand1,cand2,...` per line.
#[derive(Debug, Clone, Default)]
pub struct TableOracle {
    table: BTreeMap<String, Vec<String>>,
}

impl TableOracle {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        Self {
            table: entries
                .into_iter()
                .map(|(w, c)| (w.into(), c.into_iter().map(Into::into).collect()))
                .collect(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, cands) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: "expected word<TAB>candidates".into(),
            })?;
            let cands = cands.split(',').map(|c| c.trim().to_lowercase()).filter(|c| !c.is_empty()).collect();
            table.insert(word.trim().to_lowercase(), cands);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.table.iter().map(|(w, c)| format!("{w}\t{}\n", c.join(","))).collect()
    }
}

impl MaskedLmOracle for TableOracle {
    fn predict(&self, words: &[String], position: usize, k: usize) -> Result<Vec<(String, f64)>> {
        let word = words.get(position).ok_or_else(|| Error::Oracle {
            position,
            message: format!("position outside caption of {} words", words.len()),
        })?;
        Ok(self
            .table
            .get(word)
            .map(|c| {
                c.iter()
                    .take(k)
                    .enumerate()
                    .map(|(rank, w)| (w.clone(), 1.0 / (rank + 1) as f64))
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Masked-LM oracle backed by a trained [`TextEncoder`]'s MLM head.
pub struct EncoderOracle<'a> {
    pub encoder: &'a TextEncoder,
    pub vocab: &'a Vocab,
}

impl MaskedLmOracle for EncoderOracle<'_> {
    fn predict(&self, words: &[String], position: usize, k: usize) -> Result<Vec<(String, f64)>> {
        let tokens: Vec<TokenId> = words
            .iter()
            .take(self.encoder.config().max_len)
            .map(|w| self.vocab.id(w).unwrap_or(crate::corpus::UNK))
            .collect();
        let ranked = self
            .encoder
            .predict_masked(&tokens, position, k + SPECIAL_TOKENS.len())
            .map_err(|e| Error::Oracle {
                position,
                message: e.to_string(),
            })?;
        Ok(ranked
            .into_iter()
            .filter(|(t, _)| *t as usize >= SPECIAL_TOKENS.len())
            .take(k)
            .map(|(t, p)| (self.vocab.word(t).unwrap_or("[unk]").to_string(), p))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbConfig {
    /// Target words per caption.
    pub n_positions: usize,
    /// Masked-LM predictions kept per target word.
    pub top_k: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            n_positions: 3,
            top_k: 5,
        }
    }
}

/// Up to `n` noun/verb positions, sampled without replacement, returned in
/// increasing order.
pub fn select_content_words<R: Rng + ?Sized>(words: &[String], tagger: &PosTagger, n: usize, rng: &mut R) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..words.len())
        .filter(|&i| matches!(tagger.tag(&words[i]), Pos::Noun | Pos::Verb))
        .collect();
    eligible.shuffle(rng);
    eligible.truncate(n);
    eligible.sort_unstable();
    eligible
}

/// Top-`k` single-word fillers for `position`, excluding the original word.
pub fn propose_replacements(
    words: &[String],
    position: usize,
    oracle: &dyn MaskedLmOracle,
    k: usize,
) -> Result<Vec<String>> {
    let original = words.get(position).ok_or_else(|| Error::Oracle {
        position,
        message: format!("position outside caption of {} words", words.len()),
    })?;
    let ranked = oracle.predict(words, position, k + 1).map_err(|e| match e {
        e @ Error::Oracle { .. } => e,
        other => Error::Oracle {
            position,
            message: other.to_string(),
        },
    })?;
    let mut out: Vec<String> = Vec::with_capacity(k);
    for (cand, _) in ranked {
        if out.len() == k {
            break;
        }
        if cand == *original || cand.split_whitespace().count() != 1 || out.contains(&cand) {
            continue;
        }
        out.push(cand);
    }
    Ok(out)
}

/// Shared pieces of a perturbation run.
pub struct Perturber<'a> {
    pub oracle: &'a dyn MaskedLmOracle,
    pub lexicon: &'a Lexicon,
    pub tagger: &'a PosTagger,
    pub config: PerturbConfig,
}

impl Perturber<'_> {
    /// Every proposed rewrite of `caption` with its verdict. `seed` fixes the
    /// target-word choice.
    pub fn perturb(&self, caption: &str, seed: u64) -> Result<Vec<PerturbationRecord>> {
        let words = caption_words(caption);
        let original = words.join(" ");
        let mut rng = seed::rng(seed);
        let positions = select_content_words(&words, self.tagger, self.config.n_positions, &mut rng);
        let mut records = Vec::new();
        for position in positions {
            for replacement in propose_replacements(&words, position, self.oracle, self.config.top_k)? {
                records.push(PerturbationRecord {
                    original: original.clone(),
                    position,
                    original_word: words[position].clone(),
                    verdict: filter_candidate(&words[position], &replacement, self.lexicon),
                    replacement,
                });
            }
        }
        Ok(records)
    }

    /// Adversarial negative captions.
    pub fn generate_ans(&self, caption: &str, seed: u64) -> Result<Vec<String>> {
        self.stream(caption, seed, Verdict::AdversarialNegative)
    }

    /// Synonym/hypernym rewrites, usable as extra positives for the same image.
    pub fn generate_psa(&self, caption: &str, seed: u64) -> Result<Vec<String>> {
        self.stream(caption, seed, Verdict::EquivalentPositive)
    }

    fn stream(&self, caption: &str, seed: u64, verdict: Verdict) -> Result<Vec<String>> {
        Ok(self
            .perturb(caption, seed)?
            .into_iter()
            .filter(|r| r.verdict == verdict)
            .map(|r| r.rewritten())
            .collect())
    }

    /// Perturb a corpus of captions; caption `i` uses
    /// `derive(seed, [PERTURB, i])`.
    pub fn perturb_corpus<'c>(&self, captions: impl IntoIterator<Item = &'c str>, seed: u64) -> Result<Vec<PerturbationRecord>> {
        let mut out = Vec::new();
        for (i, caption) in captions.into_iter().enumerate() {
            out.extend(self.perturb(caption, seed::derive(seed, &[seed::stream::PERTURB, i as u64]))?);
        }
        Ok(out)
    }
}

/// Rewrites grouped by original caption text, in record order.
#[derive(Debug, Clone, Default)]
pub struct PerturbationIndex {
    pub negatives: HashMap<String, Vec<String>>,
    pub positives: HashMap<String, Vec<String>>,
}

impl PerturbationIndex {
    pub fn new(records: &[PerturbationRecord]) -> Self {
        let mut idx = Self::default();
        for r in records {
            let target = match r.verdict {
                Verdict::AdversarialNegative => &mut idx.negatives,
                Verdict::EquivalentPositive => &mut idx.positives,
            };
            let list = target.entry(r.original.clone()).or_default();
            let rewritten = r.rewritten();
            if !list.contains(&rewritten) {
                list.push(rewritten);
            }
        }
        idx
    }

    pub fn negatives_for(&self, caption: &str) -> &[String] {
        self.negatives.get(&caption_words(caption).join(" ")).map_or(&[], Vec::as_slice)
    }

    pub fn positives_for(&self, caption: &str) -> &[String] {
        self.positives.get(&caption_words(caption).join(" ")).map_or(&[], Vec::as_slice)
    }
}
