pub mod anonymizer;
pub mod artifacts;
pub mod audio;
pub mod cli;
pub mod config;
pub mod content;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prosody;
pub mod rng;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
