//! Exhaustive enumeration oracle over the shipped perturbation fixtures.

use std::collections::{BTreeMap, BTreeSet};

use super::fixture;

/// Parsed fixture files, read independently of the crate's parsers.
pub struct Fixture {
    pub edges: Vec<(String, String, String)>,
    pub pos: BTreeMap<String, String>,
    pub oracle: BTreeMap<String, Vec<String>>,
}

fn tsv(name: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

pub fn load_fixture() -> Fixture {
    Fixture {
        edges: tsv("mini_lexicon.tsv").into_iter().map(|f| (f[0].clone(), f[1].clone(), f[2].clone())).collect(),
        pos: tsv("pos.tsv").into_iter().map(|f| (f[0].clone(), f[1].clone())).collect(),
        oracle: tsv("mock_oracle.tsv")
            .into_iter()
            .map(|f| (f[0].clone(), f[1].split(',').map(str::to_string).collect()))
            .collect(),
    }
}

impl Fixture {
    /// Synonyms (both directions) and ancestors, by iterating to a fixpoint.
    pub fn closure(&self, word: &str) -> BTreeSet<String> {
        let mut reach: BTreeSet<String> = BTreeSet::from([word.to_string()]);
        loop {
            let mut grew = false;
            for (a, rel, b) in &self.edges {
                let step = |from: &str, to: &str, reach: &mut BTreeSet<String>| reach.contains(from) && reach.insert(to.to_string());
                grew |= step(a, b, &mut reach);
                if rel == "syn" {
                    grew |= step(b, a, &mut reach);
                }
            }
            if !grew {
                break;
            }
        }
        reach.remove(word);
        reach
    }

    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = self.pos.keys().cloned().collect();
        for (a, _, b) in &self.edges {
            v.insert(a.clone());
            v.insert(b.clone());
        }
        for (w, cands) in &self.oracle {
            v.insert(w.clone());
            v.extend(cands.iter().cloned());
        }
        v
    }

    fn eligible(&self, words: &[String]) -> Vec<usize> {
        (0..words.len())
            .filter(|&i| matches!(self.pos.get(&words[i]).map(String::as_str), Some("noun" | "verb")))
            .collect()
    }

    fn candidates(&self, word: &str, k: usize) -> Vec<String> {
        let raw = self.oracle.get(word).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for c in raw.into_iter().take(k + 1) {
            if c != word && !out.contains(&c) && out.len() < k {
                out.push(c);
            }
        }
        out
    }

    /// Every record set the pipeline may legally produce for `caption`: one
    /// per choice of target positions.
    pub fn enumerate(&self, caption: &str, n: usize, k: usize) -> Vec<Vec<(usize, String, bool)>> {
        let words: Vec<String> = caption.split_whitespace().map(|w| w.to_lowercase()).collect();
        let eligible = self.eligible(&words);
        let take = n.min(eligible.len());
        let mut outcomes = Vec::new();
        for mask in 0u32..(1 << eligible.len()) {
            if mask.count_ones() as usize != take {
                continue;
            }
            let mut records = Vec::new();
            for (bit, &pos) in eligible.iter().enumerate() {
                if mask & (1 << bit) == 0 {
                    continue;
                }
                let related = self.closure(&words[pos]);
                for c in self.candidates(&words[pos], k) {
                    let positive = related.contains(&c);
                    records.push((pos, c, positive));
                }
            }
            outcomes.push(records);
        }
        outcomes
    }
}
