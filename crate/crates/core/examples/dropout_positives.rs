//! Two dropout passes over the same captions give the positive pairs for
//! text contrastive learning; different dropout seeds give different views.

use cmkt::corpus::tokenize;
use cmkt::encoders::TextEncoder;
use cmkt::objectives::tcl_loss;
use cmkt::synth::{SynthConfig, SynthWorld};
use cmkt::training::PretrainConfig;

fn main() -> cmkt::Result<()> {
    let world = SynthWorld::new(SynthConfig::default());
    let vocab = world.vocab();
    let corpus = world.pair_corpus();
    let config = PretrainConfig::default();
    let encoder = TextEncoder::new(config.encoder_config(vocab.len()), 0)?;
    let captions: Vec<_> = corpus.pairs.iter().take(8).map(|p| tokenize(&p.caption, &vocab, 20)).collect::<cmkt::Result<_>>()?;

    let anchor = encoder.encode_text(&captions, Some(1))?;
    let positive = encoder.encode_text(&captions, Some(2))?;
    let again = encoder.encode_text(&captions, Some(1))?;
    let plain = encoder.encode_text(&captions, None)?;

    let shift = (anchor.vectors() - positive.vectors()).mapv(f64::abs).sum();
    println!("difference between the two dropout views: {shift:.4}");
    println!("same seed reproduces the view: {}", anchor == again);
    println!("dropout-free pass differs from both: {}", plain != anchor && plain != positive);
    println!("TCL over the two views: {:.4}", tcl_loss(&anchor, &positive, config.temperature)?.total);
    Ok(())
}
