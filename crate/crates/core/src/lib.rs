//! In-context document information extraction.

pub mod cli;
pub mod config;
pub mod demos;
pub mod evaluation;
pub mod extraction;
pub mod ingest;
pub mod llm;
pub mod ordering;
pub mod perturb;
pub mod pipeline;
pub mod prompting;
pub mod render;
pub mod similarity;
pub mod types;
pub mod updating;
