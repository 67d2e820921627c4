//! Human rationale extraction from edit-annotated sentences and plausibility
//! evaluation of model word rankings against those rationales.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod evaluate;
pub mod metrics;
pub mod rationales;
pub mod scores;
