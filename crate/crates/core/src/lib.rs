//! Transferring visual knowledge into text encoders through intermediate
//! pre-training.
//!
//! The crate bundles every piece needed to run the experiments at desk scale:
//!
//! - [`objectives`]: masked-LM, text and cross-modal contrastive losses (with
//!   hard negatives), the margin loss used for distillation teachers, voken
//!   classification and neuron-selectivity transfer, all with analytic
//!   gradients.
//! - [`encoders`]: a small self-attention text encoder and a frozen-backbone
//!   image encoder behind stable interfaces.
//! - [`corpus`]: caption pairs, tokenisation and dynamic masking.
//! - [`perturbation`]: adversarial negatives and augmented positives from
//!   masked-LM rewrites filtered through a lexicon.
//! - [`distillation`], [`training`]: teacher/student distillation and the
//!   pre-training driver for every method.
//! - [`evaluation`]: multiple-choice fine-tuning, the low-resource protocol,
//!   grid search and report tables.
//! - [`synth`]: synthetic cross-modal worlds for desk-scale experiments.
//! - [`cli`]: the `cmkt` command-line front end.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod params;
pub mod perturbation;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
