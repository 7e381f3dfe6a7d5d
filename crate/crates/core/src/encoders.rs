//! Desk-scale text and image encoders.
//!
//! The reference text encoder is a token-embedding table with learned
//! positions, `depth` pre-norm self-attention blocks and a pooling step. The
//! image side is a bank of precomputed backbone features followed by a
//! trainable affine projection; the bank itself is never written to while the
//! encoder is frozen.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::corpus::{TokenId, DEFAULT_MAX_LEN, MASK};
use crate::error::{Error, Result};
use crate::objectives::{EmbeddingBatch, Modality};
use crate::params::{normal_matrix, ParamStore, ParamVars};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    FirstToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            dim,
            depth: 2,
            ffn_dim: 2 * dim,
            max_len: DEFAULT_MAX_LEN,
            dropout: 0.1,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("text encoder sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Handles into a text-encoder forward pass on a [`Tape`].
#[derive(Debug, Clone)]
pub struct TextForward {
    /// `N×d` pooled sentence embeddings.
    pub pooled: Var,
    /// Mean-pooled hidden state after each block, each `N×d`.
    pub layer_pooled: Vec<Var>,
    /// Final (normalised) token states, one `L_i×d` node per sequence.
    pub token_states: Vec<Var>,
    pub params: ParamVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    params: ParamStore,
}

/// Per-position distributions produced by the masked-LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLmOutput {
    /// One `L_i×V` matrix per input sequence; every row sums to 1.
    pub distributions: Vec<Array2<f64>>,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(init_seed, &[seed::stream::INIT]));
        let d = config.dim;
        let attn_std = 1.0 / (d as f64).sqrt();
        let mut params = ParamStore::new();
        params.insert("tok_emb", normal_matrix(&mut rng, config.vocab_size, d, 1.0));
        params.insert("pos_emb", normal_matrix(&mut rng, config.max_len, d, 0.1));
        for b in 0..config.depth {
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("blk{b}.{w}"), normal_matrix(&mut rng, d, d, attn_std));
            }
            params.insert(format!("blk{b}.wo"), normal_matrix(&mut rng, d, d, 0.5 * attn_std));
            params.insert(
                format!("blk{b}.w1"),
                normal_matrix(&mut rng, d, config.ffn_dim, attn_std),
            );
            params.insert(format!("blk{b}.b1"), Array2::zeros((1, config.ffn_dim)));
            params.insert(
                format!("blk{b}.w2"),
                normal_matrix(&mut rng, config.ffn_dim, d, 0.5 / (config.ffn_dim as f64).sqrt()),
            );
            params.insert(format!("blk{b}.b2"), Array2::zeros((1, d)));
        }
        // Zero output head: an untrained model predicts the uniform distribution.
        params.insert("mlm_w", Array2::zeros((d, config.vocab_size)));
        params.insert("mlm_b", Array2::zeros((1, config.vocab_size)));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: TextEncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let probe = Self::new(config, 0)?;
        for (name, value) in probe.params.iter() {
            let got = params.require(name)?;
            if got.dim() != value.dim() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.dim(),
                    value.dim()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, batch: &[Vec<TokenId>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty caption batch".into()));
        }
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::Tokenization {
                    position: 0,
                    message: "empty sequence".into(),
                });
            }
            if seq.len() > self.config.max_len {
                return Err(Error::Tokenization {
                    position: self.config.max_len,
                    message: format!("sequence of length {} exceeds maximum {}", seq.len(), self.config.max_len),
                });
            }
            if let Some(position) = seq.iter().position(|&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Tokenization {
                    position,
                    message: format!("token id {} outside vocabulary of size {}", seq[position], self.config.vocab_size),
                });
            }
        }
        Ok(())
    }

    /// Build the forward graph. With `dropout_seed = None` (or a zero dropout
    /// rate) the pass is deterministic inference.
    pub fn forward(&self, tape: &mut Tape, batch: &[Vec<TokenId>], dropout_seed: Option<u64>) -> Result<TextForward> {
        self.check_tokens(batch)?;
        let params = self.params.bind(tape);
        let p = self.config.dropout;
        let mut rng = dropout_seed
            .filter(|_| p > 0.0)
            .map(|s| seed::rng(seed::derive(s, &[seed::stream::DROPOUT])));
        let mut dropout = |tape: &mut Tape, x: Var| -> Var {
            match rng.as_mut() {
                Some(rng) => {
                    let shape = tape.value(x).raw_dim();
                    let keep = 1.0 / (1.0 - p);
                    let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep });
                    tape.mul_const(x, mask)
                }
                None => x,
            }
        };
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let mut pooled = Vec::with_capacity(batch.len());
        let mut layer_rows: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); self.config.depth];
        let mut token_states = Vec::with_capacity(batch.len());
        for seq in batch {
            let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
            let tok = tape.gather(params.var("tok_emb"), ids);
            let pos = tape.gather(params.var("pos_emb"), (0..seq.len()).collect());
            let x0 = tape.add(tok, pos);
            let mut x = dropout(tape, x0);
            for (b, rows) in layer_rows.iter_mut().enumerate() {
                let h = tape.layer_norm(x);
                let q = tape.matmul(h, params.var(&format!("blk{b}.wq")));
                let k = tape.matmul(h, params.var(&format!("blk{b}.wk")));
                let v = tape.matmul(h, params.var(&format!("blk{b}.wv")));
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                let mixed = tape.matmul(attn, v);
                let out = tape.matmul(mixed, params.var(&format!("blk{b}.wo")));
                let out = dropout(tape, out);
                x = tape.add(x, out);
                let h = tape.layer_norm(x);
                let f = tape.matmul(h, params.var(&format!("blk{b}.w1")));
                let f = tape.add_row(f, params.var(&format!("blk{b}.b1")));
                let f = tape.relu(f);
                let f = tape.matmul(f, params.var(&format!("blk{b}.w2")));
                let f = tape.add_row(f, params.var(&format!("blk{b}.b2")));
                let f = dropout(tape, f);
                x = tape.add(x, f);
                rows.push(tape.mean_rows(x));
            }
            let out = tape.layer_norm(x);
            pooled.push(match self.config.pooling {
                Pooling::Mean => tape.mean_rows(out),
                Pooling::FirstToken => tape.gather(out, vec![0]),
            });
            token_states.push(out);
        }
        let pooled = tape.stack_rows(pooled);
        let layer_pooled = layer_rows.into_iter().map(|rows| tape.stack_rows(rows)).collect();
        Ok(TextForward {
            pooled,
            layer_pooled,
            token_states,
            params,
        })
    }

    /// MLM logits (`P×V`) for the given `(sequence, position)` pairs.
    pub fn mlm_logits(&self, tape: &mut Tape, fwd: &TextForward, positions: &[(usize, usize)]) -> Var {
        let mut by_seq: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut order = Vec::with_capacity(positions.len());
        for &(s, p) in positions {
            let list = by_seq.entry(s).or_default();
            order.push((s, list.len()));
            list.push(p);
        }
        // Keep the caller's row order.
        let mut gathered = Vec::with_capacity(positions.len());
        let mut cache: HashMap<usize, Var> = HashMap::new();
        for (s, rows) in &by_seq {
            cache.insert(*s, tape.gather(fwd.token_states[*s], rows.clone()));
        }
        for (s, i) in order {
            gathered.push(tape.gather(cache[&s], vec![i]));
        }
        let h = tape.stack_rows(gathered);
        let logits = tape.matmul(h, fwd.params.var("mlm_w"));
        tape.add_row(logits, fwd.params.var("mlm_b"))
    }

    /// Sentence embeddings for a tokenised batch. Equal seeds give identical
    /// outputs; `None` disables dropout.
    pub fn encode_text(&self, captions: &[Vec<TokenId>], dropout_seed: Option<u64>) -> Result<EmbeddingBatch> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, captions, dropout_seed)?;
        EmbeddingBatch::sequential(tape.value(fwd.pooled).clone(), Modality::Text)
    }

    /// Two encodings of the same captions under independent dropout draws.
    pub fn dropout_positive_pair(
        &self,
        captions: &[Vec<TokenId>],
        seed_a: u64,
        seed_b: u64,
    ) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
        if seed_a == seed_b {
            return Err(Error::Config("dropout positive pair needs two different seeds".into()));
        }
        Ok((
            self.encode_text(captions, Some(seed_a))?,
            self.encode_text(captions, Some(seed_b))?,
        ))
    }

    /// Masked-LM distributions at every position (inference mode).
    pub fn masked_forward(&self, captions: &[Vec<TokenId>]) -> Result<MaskedLmOutput> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, captions, None)?;
        let mut distributions = Vec::with_capacity(captions.len());
        for (s, seq) in captions.iter().enumerate() {
            let positions: Vec<(usize, usize)> = (0..seq.len()).map(|p| (s, p)).collect();
            let logits = self.mlm_logits(&mut tape, &fwd, &positions);
            distributions.push(softmax_rows(tape.value(logits)));
        }
        Ok(MaskedLmOutput { distributions })
    }

    /// Top-`k` vocabulary predictions for one position after replacing it by
    /// `[mask]`, best first, with their probabilities.
    pub fn predict_masked(&self, tokens: &[TokenId], position: usize, k: usize) -> Result<Vec<(TokenId, f64)>> {
        if position >= tokens.len() {
            return Err(Error::Index(format!("position {position} outside sequence of {}", tokens.len())));
        }
        let mut masked = tokens.to_vec();
        masked[position] = MASK;
        let out = self.masked_forward(&[masked])?;
        let row = out.distributions[0].row(position);
        let mut ranked: Vec<(TokenId, f64)> = row.iter().enumerate().map(|(i, &p)| (i as TokenId, p)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }
}

const BANK_MAGIC: &[u8; 8] = b"CMKTFEAT";
const BANK_VERSION: u32 = 1;

/// Precomputed image-backbone features, one `f32` row per image id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureBank {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} ids of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::Format(format!("duplicate image id `{id}`")));
            }
        }
        Ok(Self { ids, index, dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn features(&self, id: &str) -> Result<&[f32]> {
        Ok(self.row(self.row_of(id)?))
    }

    /// Rows for `ids` as an `N×f` `f64` matrix.
    pub fn gather(&self, ids: &[&str]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (i, id) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(self.features(id)?) {
                *o = v as f64;
            }
        }
        Ok(out)
    }

    /// Binary layout: `"CMKTFEAT"`, then `version`, `count`, `dim` as
    /// little-endian `u32`, then `count×dim` little-endian `f32` row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Sidecar index: one `id<TAB>row` line per image.
    pub fn index_text(&self) -> String {
        self.ids.iter().enumerate().map(|(row, id)| format!("{id}\t{row}\n")).collect()
    }

    pub fn from_bytes(bytes: &[u8], index_text: &str) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != BANK_MAGIC {
            return Err(Error::Format("feature bank: bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let version = word(8);
        if version != BANK_VERSION as usize {
            return Err(Error::Format(format!("feature bank: unsupported version {version}")));
        }
        let (count, dim) = (word(12), word(16));
        let expected = 20 + count * dim * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "feature bank: expected {expected} bytes for {count}x{dim}, found {}",
                bytes.len()
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut ids = vec![None; count];
        for (i, line) in index_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parse_err = |message: String| Error::Parse {
                path: "feature index".into(),
                line: i + 1,
                message,
            };
            let (id, row) = line.split_once('\t').ok_or_else(|| parse_err("expected id<TAB>row".into()))?;
            let row: usize = row.trim().parse().map_err(|e| parse_err(format!("bad row: {e}")))?;
            let slot = ids.get_mut(row).ok_or_else(|| parse_err(format!("row {row} out of range")))?;
            if slot.is_some() {
                return Err(parse_err(format!("row {row} assigned twice")));
            }
            *slot = Some(id.to_string());
        }
        let ids = ids
            .into_iter()
            .enumerate()
            .map(|(row, id)| id.ok_or_else(|| Error::Format(format!("feature index misses row {row}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, dim, data)
    }

    /// Writes `path` and the sidecar `path.idx`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let idx = index_path(path);
        std::fs::write(&idx, self.index_text()).map_err(|e| Error::io(&idx, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let idx = index_path(path);
        let index = std::fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
        Self::from_bytes(&bytes, &index)
    }

    /// SHA-256 of the serialised bank.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn index_path(bank_path: &Path) -> std::path::PathBuf {
    let mut p = bank_path.as_os_str().to_owned();
    p.push(".idx");
    p.into()
}

/// Frozen feature bank plus a trainable affine projection to the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    head: ParamStore,
    frozen: bool,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, dim: usize, rng: &mut R) -> Self {
        let mut head = ParamStore::new();
        head.insert("proj_w", normal_matrix(rng, feature_dim, dim, 1.0 / (feature_dim as f64).sqrt()));
        head.insert("proj_b", Array2::zeros((1, dim)));
        Self { head, frozen: true }
    }

    /// Identity head (requires `feature_dim == dim`).
    pub fn identity(dim: usize) -> Self {
        let mut head = ParamStore::new();
        head.insert("proj_w", Array2::eye(dim));
        head.insert("proj_b", Array2::zeros((1, dim)));
        Self { head, frozen: true }
    }

    pub fn from_head(head: ParamStore) -> Result<Self> {
        let w = head.require("proj_w")?;
        let b = head.require("proj_b")?;
        if b.dim() != (1, w.ncols()) {
            return Err(Error::Format("projection bias does not match weight".into()));
        }
        Ok(Self { head, frozen: true })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn head(&self) -> &ParamStore {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ParamStore {
        &mut self.head
    }

    pub fn dim(&self) -> usize {
        self.head.get("proj_w").map_or(0, |w| w.ncols())
    }

    pub fn feature_dim(&self) -> usize {
        self.head.get("proj_w").map_or(0, |w| w.nrows())
    }

    fn check_bank(&self, bank: &FeatureBank) -> Result<()> {
        if bank.dim() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature bank dim {} does not match projection input {}",
                bank.dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Forward graph: returns `(N×d projected embeddings, bound head params)`.
    pub fn forward(&self, tape: &mut Tape, bank: &FeatureBank, ids: &[&str]) -> Result<(Var, ParamVars)> {
        self.check_bank(bank)?;
        let feats = tape.leaf(bank.gather(ids)?);
        let params = self.head.bind(tape);
        let proj = tape.matmul(feats, params.var("proj_w"));
        Ok((tape.add_row(proj, params.var("proj_b")), params))
    }

    pub fn encode_image(&self, bank: &FeatureBank, ids: &[&str]) -> Result<EmbeddingBatch> {
        self.check_bank(bank)?;
        let feats = bank.gather(ids)?;
        let out = feats.dot(self.head.require("proj_w")?) + self.head.require("proj_b")?;
        EmbeddingBatch::sequential(out, Modality::Image)
    }
}

/// Mean of a matrix's rows as a plain vector.
pub fn mean_row(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|r| r.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(dropout: f64) -> TextEncoder {
        let mut cfg = TextEncoderConfig::new(12, 8);
        cfg.dropout = dropout;
        TextEncoder::new(cfg, 3).unwrap()
    }

    fn batch() -> Vec<Vec<TokenId>> {
        vec![vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]]
    }

    #[test]
    fn encode_is_deterministic_per_seed() {
        let enc = encoder(0.1);
        let a = enc.encode_text(&batch(), Some(1)).unwrap();
        let b = enc.encode_text(&batch(), Some(1)).unwrap();
        let c = enc.encode_text(&batch(), Some(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.vectors(), c.vectors());
        assert_eq!(a.dim(), 8);
    }

    #[test]
    fn zero_dropout_ignores_seed() {
        let enc = encoder(0.0);
        assert_eq!(
            enc.encode_text(&batch(), Some(1)).unwrap(),
            enc.encode_text(&batch(), Some(2)).unwrap()
        );
    }

    #[test]
    fn out_of_vocab_reports_position() {
        let enc = encoder(0.1);
        let err = enc.encode_text(&[vec![3, 4, 99]], None).unwrap_err();
        assert!(matches!(err, Error::Tokenization { position: 2, .. }), "{err}");
        let too_long = vec![3; 21];
        assert!(enc.encode_text(&[too_long], None).is_err());
    }

    #[test]
    fn dropout_pair_rejects_equal_seeds() {
        let enc = encoder(0.1);
        assert!(matches!(enc.dropout_positive_pair(&batch(), 4, 4), Err(Error::Config(_))));
        let (a, b) = enc.dropout_positive_pair(&batch(), 4, 5).unwrap();
        assert_eq!(a.batch_ids(), b.batch_ids());
    }

    #[test]
    fn masked_forward_is_normalised_and_uniform_at_init() {
        let enc = encoder(0.1);
        let out = enc.masked_forward(&batch()).unwrap();
        for d in &out.distributions {
            for row in d.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!((row[0] - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_token_pooling() {
        let mut cfg = TextEncoderConfig::new(12, 8);
        cfg.pooling = Pooling::FirstToken;
        cfg.dropout = 0.0;
        let enc = TextEncoder::new(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let fwd = enc.forward(&mut tape, &batch(), None).unwrap();
        let first = tape.value(fwd.token_states[1]).row(0).to_owned();
        assert_eq!(tape.value(fwd.pooled).row(1), first);
    }

    #[test]
    fn bank_round_trip_and_errors() {
        let bank = FeatureBank::new(vec!["a".into(), "b".into()], 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..8], b"CMKTFEAT");
        assert_eq!(bytes.len(), 20 + 24);
        let back = FeatureBank::from_bytes(&bytes, &bank.index_text()).unwrap();
        assert_eq!(back, bank);
        assert!(FeatureBank::from_bytes(&bytes[..30], &bank.index_text()).is_err());
        assert!(matches!(bank.features("zzz"), Err(Error::Lookup(_))));
    }

    #[test]
    fn identity_head_returns_features() {
        let bank = FeatureBank::new(vec!["a".into(), "b".into()], 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let enc = ImageEncoder::identity(2);
        let out = enc.encode_image(&bank, &["b", "a"]).unwrap();
        assert_eq!(out.vectors(), &ndarray::array![[3.0, 4.0], [1.0, 2.0]]);
    }
}
