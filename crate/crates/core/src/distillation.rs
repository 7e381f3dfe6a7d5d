//! Cross-modal knowledge distillation: a teacher trained on caption-image
//! pairs, then a student trained on text with masked LM plus neuron
//! selectivity transfer towards the teacher's per-layer pooled states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::error::{Error, Result};
use crate::training::{pretrain, LossWeights, MethodSpec, PretrainConfig, PretrainInputs, PretrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherObjective {
    /// Bidirectional contrastive loss.
    Cmcl,
    /// Margin ranking loss with one random mismatched pair per item.
    Hinge,
}

impl fmt::Display for TeacherObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherObjective::Cmcl => "cmcl",
            TeacherObjective::Hinge => "hinge",
        })
    }
}

impl FromStr for TeacherObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cmcl" => Ok(TeacherObjective::Cmcl),
            "hinge" => Ok(TeacherObjective::Hinge),
            other => Err(Error::Config(format!("unknown teacher objective `{other}`; expected cmcl or hinge"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub objective: TeacherObjective,
    pub config: PretrainConfig,
}

impl TeacherSpec {
    pub fn method(&self) -> MethodSpec {
        let weights = match self.objective {
            TeacherObjective::Cmcl => LossWeights {
                cmcl: 1.0,
                ..Default::default()
            },
            TeacherObjective::Hinge => LossWeights {
                hinge: 1.0,
                ..Default::default()
            },
        };
        MethodSpec::custom(format!("teacher-{}", self.objective), weights)
    }
}

/// Train a teacher on `inputs.pairs` (image features from `inputs.bank`).
pub fn train_teacher(spec: &TeacherSpec, inputs: &PretrainInputs) -> Result<PretrainOutput> {
    pretrain(spec.method(), inputs, spec.config.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSpec {
    pub mlm_weight: f64,
    /// NST weight `λ`.
    pub nst_weight: f64,
    pub config: PretrainConfig,
}

impl DistillSpec {
    pub fn new(config: PretrainConfig) -> Self {
        Self {
            mlm_weight: 1.0,
            nst_weight: 1.0,
            config,
        }
    }

    pub fn method(&self) -> MethodSpec {
        MethodSpec::custom(
            "CMKD",
            LossWeights {
                mlm: self.mlm_weight,
                nst: self.nst_weight,
                ..Default::default()
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mlm", self.mlm_weight), ("nst", self.nst_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} weight must be finite and >= 0, got {w}")));
            }
        }
        if self.mlm_weight == 0.0 && self.nst_weight == 0.0 {
            return Err(Error::Config("distillation weights are both zero".into()));
        }
        Ok(())
    }
}

/// Train a student on `inputs.captions` against `inputs.teacher`. The
/// student starts from `inputs.init` or a fresh model. The NST term is
/// logged even when its weight is zero.
pub fn distill(spec: &DistillSpec, inputs: &PretrainInputs) -> Result<PretrainOutput> {
    spec.validate()?;
    if inputs.teacher.is_none() {
        return Err(Error::Config("distillation requires a teacher checkpoint, which was not provided".into()));
    }
    pretrain(spec.method(), inputs, spec.config.clone())
}

/// A text-only student that is an exact copy of the teacher's text encoder.
pub fn student_copy(teacher: &ModelState) -> ModelState {
    ModelState::text_only(teacher.text.clone())
}
