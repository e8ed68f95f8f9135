//! Causal three-way variance decomposition of hospital quality indicators.
//!
//! The variance of a patient-level outcome is split into a part explained by
//! case-mix (`omega1`), a between-hospital part (`omega2`) and a residual
//! (`omega3`), using a fitted outcome model and a multinomial model of which
//! hospital a patient attends.

pub mod cli;
pub mod decomposition;
pub mod error;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod mixed;
pub mod model;
pub mod multinomial;
pub mod rng;
pub mod simulation;
pub mod uncertainty;

pub use decomposition::{decompose, DecomposeConfig, Decomposition, DecompositionResult, OutcomeFit, ResidualMode};
pub use error::{Error, Result};
pub use model::{Dataset, EffectMode, LinkFunction, OutcomeKind, RawData};
