pub mod activations;
pub mod attention;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod siamese;
pub mod text;

pub use error::{Error, Result};
