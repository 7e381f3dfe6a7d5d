//! Low-resource multiple-choice evaluation of a randomly initialised encoder
//! against a cross-modally pre-trained one on a synthetic task.

use std::time::Instant;

use cmkt::corpus::Split;
use cmkt::encoders::TextEncoder;
use cmkt::evaluation::{low_resource_protocol, report, FinetuneConfig, Layout};
use cmkt::params::OptimizerKind;
use cmkt::seed;
use cmkt::synth::{SynthConfig, SynthWorld};
use cmkt::training::{pretrain, Method, PretrainConfig, PretrainInputs};

fn main() -> cmkt::Result<()> {
    let world = SynthWorld::new(SynthConfig::default());
    let corpus = world.pair_corpus();
    let vocab = world.vocab();
    let dataset = world.mcqa(400, 200, 1000, 4);
    let inputs = PretrainInputs::from_pairs(vocab.clone(), corpus.split(Split::Train), Some(corpus.bank.clone()));
    let config = PretrainConfig {
        learning_rate: 1e-3,
        epochs: 20,
        optimizer: OptimizerKind::adam(),
        ..Default::default()
    };
    let start = Instant::now();
    let pretrained = pretrain(Method::Cmcl.spec(), &inputs, config.clone())?.model.text;
    let random = TextEncoder::new(config.encoder_config(vocab.len()), seed::derive(config.seed, &[seed::stream::INIT]))?;
    let ft = FinetuneConfig::default();
    let mut runs = Vec::new();
    for (name, enc) in [("random-init", &random), ("CMCL", &pretrained)] {
        let res = low_resource_protocol(name, enc, &vocab, &dataset, &[64, 128], &ft)?;
        for (size, grid) in &res.grids {
            println!("{name} {size}: grid {:?}", grid.table);
        }
        runs.extend(res.runs);
    }
    println!("{}", report(&runs, Layout::LowResource)?.text);
    println!("elapsed: {:.1?}", start.elapsed());
    Ok(())
}
