//! Cross-modal contrastive pre-training on a synthetic world, reporting
//! held-out image-text retrieval before and after.

use std::time::Instant;

use cmkt::corpus::Split;
use cmkt::evaluation::retrieval_recall_at_1;
use cmkt::params::OptimizerKind;
use cmkt::synth::{SynthConfig, SynthWorld};
use cmkt::training::{pretrain, Method, PretrainConfig, PretrainInputs, Trainer};

fn main() -> cmkt::Result<()> {
    let world = SynthWorld::new(SynthConfig::default());
    let corpus = world.pair_corpus();
    let vocab = world.vocab();
    let heldout = corpus.split(Split::Dev);
    let inputs = PretrainInputs::from_pairs(vocab.clone(), corpus.split(Split::Train), Some(corpus.bank.clone()));
    let config = PretrainConfig {
        learning_rate: 1e-3,
        epochs: 20,
        optimizer: OptimizerKind::adam(),
        ..Default::default()
    };
    let untrained = Trainer::new(Method::Cmcl.spec(), config.clone(), &inputs)?;
    let before = retrieval_recall_at_1(untrained.model(), &vocab, &corpus.bank, &heldout)?;
    let start = Instant::now();
    let out = pretrain(Method::Cmcl.spec(), &inputs, config)?;
    let after = retrieval_recall_at_1(&out.model, &vocab, &corpus.bank, &heldout)?;
    let losses = out.log.column("total");
    println!("steps: {}  first loss {:.4}  last loss {:.4}", losses.len(), losses[0], losses[losses.len() - 1]);
    println!("recall@1 (image->text, text->image) before: {before:?}  after: {after:?}");
    println!("training time: {:.1?}", start.elapsed());
    Ok(())
}
