//! Synthetic cross-modal worlds.
//!
//! A scene is a tuple of latent attributes (colour, object, action, place).
//! Each attribute value owns a random latent vector; an image is a fixed
//! random linear rendering of the concatenated latents plus Gaussian noise,
//! and its caption names the attribute values in a fixed template. The same
//! latents drive a downstream multiple-choice task, so a text encoder that
//! has been aligned with the image features has something to transfer.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionPair, Split, Vocab};
use crate::encoders::FeatureBank;
use crate::evaluation::{McqaDataset, McqaItem};
use crate::perturbation::{Lexicon, Pos, PosTagger, Relation, TableOracle};
use crate::seed;
use crate::training::SimilarityItem;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub pos: SlotPos,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotPos {
    Adjective,
    Noun,
    Verb,
}

/// Attribute-value index per slot.
pub type Scene = Vec<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 2,
            feature_dim: 32,
            noise: 0.05,
            train_pairs: 2000,
            heldout_pairs: 32,
        }
    }
}

pub struct SynthWorld {
    pub config: SynthConfig,
    pub slots: Vec<Slot>,
    latents: Vec<Array2<f64>>,
    render: Array2<f64>,
    /// Direction in feature space that defines the downstream property.
    property: Array1<f64>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Self {
        let slots = vec![
            Slot {
                name: "color".into(),
                pos: SlotPos::Adjective,
                values: words(&[
                    "red", "blue", "green", "yellow", "white", "black", "orange", "purple", "pink", "brown", "gray",
                    "silver",
                ]),
            },
            Slot {
                name: "object".into(),
                pos: SlotPos::Noun,
                values: words(&[
                    "dog", "cat", "horse", "bird", "cow", "sheep", "girl", "boy", "man", "woman", "child", "car", "bus",
                    "truck", "bike", "train",
                ]),
            },
            Slot {
                name: "action".into(),
                pos: SlotPos::Verb,
                values: words(&["sits", "stands", "runs", "walks", "sleeps", "jumps", "waits", "plays", "eats", "rolls"]),
            },
            Slot {
                name: "place".into(),
                pos: SlotPos::Noun,
                values: words(&["grass", "street", "beach", "field", "room", "park", "snow", "sand", "lake", "yard"]),
            },
        ];
        let mut rng = seed::rng(seed::derive(config.seed, &[seed::stream::SYNTH, 0]));
        let latents = slots
            .iter()
            .map(|s| Array2::from_shape_simple_fn((s.values.len(), config.latent_dim), || StandardNormal.sample(&mut rng)))
            .collect();
        let total = slots.len() * config.latent_dim;
        let scale = 1.0 / (total as f64).sqrt();
        let render = Array2::from_shape_simple_fn((config.feature_dim, total), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            scale * v
        });
        let property = Array1::from_shape_simple_fn(config.feature_dim, || StandardNormal.sample(&mut rng));
        Self {
            config,
            slots,
            latents,
            render,
            property,
        }
    }

    pub fn n_scenes(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    pub fn scene_from_index(&self, mut index: usize) -> Scene {
        let mut scene = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            scene.push(index % s.values.len());
            index /= s.values.len();
        }
        scene
    }

    pub fn caption(&self, scene: &Scene) -> String {
        let v = |i: usize| self.slots[i].values[scene[i]].as_str();
        format!("a {} {} {} on the {}", v(0), v(1), v(2), v(3))
    }

    /// Noise-free rendering of a scene.
    pub fn clean_features(&self, scene: &Scene) -> Array1<f64> {
        let z: Vec<f64> = scene
            .iter()
            .enumerate()
            .flat_map(|(slot, &value)| self.latents[slot].row(value).to_vec())
            .collect();
        self.render.dot(&Array1::from(z))
    }

    pub fn features<R: Rng + ?Sized>(&self, scene: &Scene, rng: &mut R) -> Array1<f64> {
        let noise = Normal::new(0.0, self.config.noise).expect("valid noise");
        self.clean_features(scene).mapv(|v| v + noise.sample(rng))
    }

    /// Downstream property of a scene (a fixed linear read-out of its image).
    pub fn property(&self, scene: &Scene) -> f64 {
        self.clean_features(scene).dot(&self.property)
    }

    /// Train pairs over distinct random scenes, then `heldout_pairs` more
    /// (split `dev`) over scenes not seen in training.
    pub fn pair_corpus(&self) -> SynthCorpus {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[seed::stream::SYNTH, 1]));
        let mut order: Vec<usize> = (0..self.n_scenes()).collect();
        order.shuffle(&mut rng);
        let total = (self.config.train_pairs + self.config.heldout_pairs).min(order.len());
        let train = total.saturating_sub(self.config.heldout_pairs);
        let mut pairs = Vec::with_capacity(total);
        let mut scenes = Vec::with_capacity(total);
        let mut ids = Vec::with_capacity(total);
        let mut data = Vec::with_capacity(total * self.config.feature_dim);
        for (i, &idx) in order.iter().take(total).enumerate() {
            let scene = self.scene_from_index(idx);
            let id = format!("img{i:05}");
            data.extend(self.features(&scene, &mut rng).iter().map(|&v| v as f32));
            pairs.push(CaptionPair {
                image_id: id.clone(),
                caption: self.caption(&scene),
                split: if i < train { Split::Train } else { Split::Dev },
            });
            ids.push(id);
            scenes.push(scene);
        }
        let bank = FeatureBank::new(ids, self.config.feature_dim, data).expect("consistent bank");
        SynthCorpus { pairs, bank, scenes }
    }

    fn hypernym(word: &str) -> Option<&'static str> {
        Some(match word {
            "dog" | "cat" | "horse" | "bird" | "cow" | "sheep" => "animal",
            "girl" => "woman",
            "boy" => "man",
            "man" | "woman" | "child" => "person",
            "car" | "bus" | "truck" | "bike" | "train" => "vehicle",
            "animal" | "person" | "vehicle" => "entity",
            _ => return None,
        })
    }

    fn synonym(word: &str) -> Option<&'static str> {
        Some(match word {
            "street" => "road",
            "sits" => "rests",
            "runs" => "sprints",
            "room" => "chamber",
            "field" => "meadow",
            _ => return None,
        })
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        let mut all: BTreeSet<String> = self.slots.iter().flat_map(|s| s.values.iter().cloned()).collect();
        all.extend(["animal", "person", "vehicle"].map(String::from));
        for w in &all {
            if let Some(h) = Self::hypernym(w) {
                lex.add(w, Relation::Hypernym, h);
            }
            if let Some(s) = Self::synonym(w) {
                lex.add(w, Relation::Synonym, s);
            }
        }
        lex
    }

    pub fn tagger(&self) -> PosTagger {
        let mut entries = Vec::new();
        for s in &self.slots {
            let pos = match s.pos {
                SlotPos::Noun => Pos::Noun,
                SlotPos::Verb => Pos::Verb,
                SlotPos::Adjective => Pos::Other,
            };
            entries.extend(s.values.iter().map(|v| (v.clone(), pos)));
        }
        PosTagger::new(entries)
    }

    /// Mock masked LM: for a content word, its synonym/hypernym (if any)
    /// followed by the other values of the same slot.
    pub fn oracle(&self) -> TableOracle {
        let mut entries = Vec::new();
        for s in self.slots.iter().filter(|s| s.pos != SlotPos::Adjective) {
            for (i, v) in s.values.iter().enumerate() {
                let mut cands: Vec<String> = Vec::new();
                if let Some(syn) = Self::synonym(v) {
                    cands.push(syn.into());
                }
                if let Some(h) = Self::hypernym(v) {
                    cands.push(h.into());
                }
                let n = s.values.len();
                cands.extend((1..n).map(|off| s.values[(i + off) % n].clone()));
                cands.truncate(8);
                entries.push((v.clone(), cands));
            }
        }
        TableOracle::new(entries)
    }

    /// Every word the world can emit, including lexicon and oracle words and
    /// the downstream question.
    pub fn vocab(&self) -> Vocab {
        let mut texts: Vec<String> = self.slots.iter().flat_map(|s| s.values.clone()).collect();
        texts.push("a on the".into());
        texts.push(QUESTION.into());
        texts.extend(self.lexicon().words().into_iter().map(String::from));
        Vocab::from_texts(texts.iter().map(String::as_str))
    }

    /// Values of each slot that may appear in downstream training items.
    fn seen_values(&self, slot: usize) -> usize {
        self.slots[slot].values.len().div_ceil(2)
    }

    /// Multiple-choice task: which scene has the largest downstream property.
    /// Training items only use the first half of each slot's values; dev and
    /// test items only the second half, so answering them needs knowledge of
    /// words the task never trains on.
    pub fn mcqa(&self, n_train: usize, n_dev: usize, n_test: usize, n_choices: usize) -> McqaDataset {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[seed::stream::SYNTH, 2]));
        let mut items = Vec::with_capacity(n_train + n_dev + n_test);
        for (split, count) in [(Split::Train, n_train), (Split::Dev, n_dev), (Split::Test, n_test)] {
            for _ in 0..count {
                let mut scenes: Vec<Scene> = Vec::with_capacity(n_choices);
                while scenes.len() < n_choices {
                    let scene: Scene = (0..self.slots.len())
                        .map(|s| {
                            let seen = self.seen_values(s);
                            if split == Split::Train {
                                rng.random_range(0..seen)
                            } else {
                                rng.random_range(seen..self.slots[s].values.len())
                            }
                        })
                        .collect();
                    if !scenes.contains(&scene) {
                        scenes.push(scene);
                    }
                }
                let gold = scenes
                    .iter()
                    .enumerate()
                    .max_by(|a, b| self.property(a.1).total_cmp(&self.property(b.1)))
                    .map(|(i, _)| i)
                    .expect("non-empty choices");
                items.push(McqaItem {
                    question: QUESTION.into(),
                    choices: scenes.iter().map(|s| self.caption(s)).collect(),
                    gold,
                    split,
                });
            }
        }
        McqaDataset::new("synthetic", items).expect("consistent synthetic dataset")
    }

    /// Caption pairs scored by the fraction of shared attribute values.
    pub fn similarity_set(&self, n: usize) -> Vec<SimilarityItem> {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[seed::stream::SYNTH, 3]));
        (0..n)
            .map(|_| {
                let a: Scene = self.slots.iter().map(|s| rng.random_range(0..s.values.len())).collect();
                let mut b = a.clone();
                for (slot, s) in self.slots.iter().enumerate() {
                    if rng.random::<f64>() < 0.5 {
                        b[slot] = rng.random_range(0..s.values.len());
                    }
                }
                let shared = a.iter().zip(&b).filter(|(x, y)| x == y).count();
                SimilarityItem {
                    a: self.caption(&a),
                    b: self.caption(&b),
                    score: shared as f64 / self.slots.len() as f64,
                }
            })
            .collect()
    }
}

pub const QUESTION: &str = "which one is the heaviest";

pub struct SynthCorpus {
    pub pairs: Vec<CaptionPair>,
    pub bank: FeatureBank,
    pub scenes: Vec<Scene>,
}

impl SynthCorpus {
    pub fn split(&self, split: Split) -> Vec<CaptionPair> {
        self.pairs.iter().filter(|p| p.split == split).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_heldout_is_unseen() {
        let cfg = SynthConfig {
            train_pairs: 200,
            heldout_pairs: 32,
            ..Default::default()
        };
        let a = SynthWorld::new(cfg).pair_corpus();
        let b = SynthWorld::new(cfg).pair_corpus();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.bank.checksum(), b.bank.checksum());
        let train: BTreeSet<_> = a.split(Split::Train).into_iter().map(|p| p.caption).collect();
        let dev = a.split(Split::Dev);
        assert_eq!(dev.len(), 32);
        assert!(dev.iter().all(|p| !train.contains(&p.caption)));
    }

    #[test]
    fn oracle_and_lexicon_cover_fixture_relation() {
        let w = SynthWorld::new(SynthConfig::default());
        assert!(w.lexicon().related("girl").contains("woman"));
        let preds = w.oracle();
        let cands = crate::perturbation::MaskedLmOracle::predict(&preds, &["girl".to_string()], 0, 5).unwrap();
        assert_eq!(cands[0].0, "woman");
        let v = w.vocab();
        for s in &w.slots {
            for val in &s.values {
                assert!(v.id(val).is_some(), "{val}");
            }
        }
    }

    #[test]
    fn mcqa_train_uses_seen_values_only() {
        let w = SynthWorld::new(SynthConfig::default());
        let ds = w.mcqa(50, 10, 10, 4);
        let unseen: Vec<&str> = w
            .slots
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.values[w.seen_values(i)..].iter().map(String::as_str))
            .collect();
        for item in ds.items().iter().filter(|i| i.split == Split::Train) {
            for c in &item.choices {
                assert!(c.split(' ').all(|word| !unseen.contains(&word)), "{c}");
            }
        }
    }
}
