//! Conditional adversarial face aging on synthetic data: a small
//! reverse-mode autodiff core, the generator and discriminator networks, the
//! training objective and schedule, a procedural face dataset with analytic
//! oracles, and evaluation.

pub mod age;
pub mod datagen;
pub mod diffcore;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradsuite;
pub mod nn;
pub mod objective;
pub mod trainer;

pub use age::{encode_age, encode_ages, AgeGroup, NUM_GROUPS};
pub use diffcore::{Real, Tape, Tensor, Var};
pub use discriminators::{AgeDiscriminator, DiscriminatorConfig, TransitionDiscriminator};
pub use error::{Error, Result};
pub use generator::{build_generator, Generator, GeneratorConfig};
pub use eval::{AgingReport, VerificationScores};
pub use trainer::{ModelBundle, TrainConfig};
