pub mod audit;
pub mod corpus;
pub mod debias;
pub mod downstream;
pub mod error;
pub mod intrinsic;
pub mod lexicon;
pub mod model;
pub mod probe;
pub mod report;
pub mod synthetic;
pub mod text;

pub use error::{Error, Result};
