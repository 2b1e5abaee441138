pub mod analysis;
pub mod autograd;
pub mod corpus;
pub mod datastore;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
