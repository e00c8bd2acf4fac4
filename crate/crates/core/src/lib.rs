//! Rationale extraction and evaluation for classification with large
//! language models.
//!
//! Rationales come from prompting a served model or from token attribution
//! scores computed elsewhere. They are scored against human rationales with
//! word-level F1 and against the model itself by masking them out and
//! counting label flips.

pub mod attribution_io;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model_client;
pub mod perturbation;
pub mod prompting;
pub mod rationale_parser;
pub mod runner;

pub use corpus::{Dataset, Example, Task};
pub use error::{Error, Result};
pub use model_client::{LabelValue, ModelClient, PredictedLabel, TaskModel};
pub use perturbation::{MaskScope, MaskStyle, Position};
pub use prompting::{TemplateKey, TemplateRegistry};
pub use rationale_parser::RationaleMask;
