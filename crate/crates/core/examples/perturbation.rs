//! Adversarial negatives and positive augmentations for one caption, using
//! the shipped mini lexicon and a table-backed masked-LM oracle.

use std::path::Path;

use cmkt::perturbation::*;

fn main() -> cmkt::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let lexicon = Lexicon::load(&fixtures.join("mini_lexicon.tsv"))?;
    let tagger = PosTagger::load(&fixtures.join("pos.tsv"))?;
    let oracle = TableOracle::load(&fixtures.join("mock_oracle.tsv"))?;
    let perturber = Perturber {
        oracle: &oracle,
        lexicon: &lexicon,
        tagger: &tagger,
        config: PerturbConfig::default(),
    };
    let caption = "A girl puts an apple in her bag";
    for record in perturber.perturb(caption, 0)? {
        let kind = match record.verdict {
            Verdict::EquivalentPositive => "PSA",
            Verdict::AdversarialNegative => "ANS",
        };
        println!("{kind}  {:>10} -> {:<8} {}", record.original_word, record.replacement, record.rewritten());
    }
    Ok(())
}
