//! Many-to-one accent conversion through discrete units.

pub mod augment;
mod binio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod pc;
pub mod s2u;
pub mod synth;
pub mod u2s;

pub use error::{Error, Result};
