//! Trains a small cross-modal teacher, then distils it into a text-only
//! student with MLM plus neuron selectivity transfer.

use cmkt::corpus::Split;
use cmkt::distillation::{distill, train_teacher, DistillSpec, TeacherObjective, TeacherSpec};
use cmkt::params::OptimizerKind;
use cmkt::synth::{SynthConfig, SynthWorld};
use cmkt::training::{PretrainConfig, PretrainInputs};

fn main() -> cmkt::Result<()> {
    let world = SynthWorld::new(SynthConfig {
        train_pairs: 400,
        ..Default::default()
    });
    let corpus = world.pair_corpus();
    let vocab = world.vocab();
    let config = PretrainConfig {
        epochs: 5,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::adam(),
        ..Default::default()
    };
    let pairs = PretrainInputs::from_pairs(vocab.clone(), corpus.split(Split::Train), Some(corpus.bank.clone()));
    let teacher = train_teacher(
        &TeacherSpec {
            objective: TeacherObjective::Cmcl,
            config: config.clone(),
        },
        &pairs,
    )?;
    let losses = teacher.log.column("total");
    println!("teacher loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);

    let mut inputs = PretrainInputs::new(vocab);
    inputs.captions = corpus.split(Split::Train).into_iter().map(|p| p.caption).collect();
    inputs.teacher = Some(teacher.model);
    let student = distill(
        &DistillSpec {
            mlm_weight: 1.0,
            nst_weight: 1.0,
            config,
        },
        &inputs,
    )?;
    for column in ["mlm", "nst"] {
        let values = student.log.column(column);
        println!("student {column} {:.4} -> {:.4}", values[0], values[values.len() - 1]);
    }
    Ok(())
}
