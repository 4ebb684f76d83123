pub mod anonymizer;
pub mod catalogue;
pub mod corpus;
mod error;
pub mod imaging;
pub mod mediator;
pub mod metamodel;
pub mod node;
pub mod proto;
pub mod testbed;

pub use error::{Error, Result};
