pub mod corpus;
pub mod encoder;
pub mod error;
pub mod kgstore;
pub mod model;
pub mod tensorcore;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
