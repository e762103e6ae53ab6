//! Attribute value extraction with an attribute-conditioned CRF decoder.

pub mod attribute_embeddings;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod io;
pub mod model;
pub mod synth;
pub mod tagging;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use exec::Mode;
