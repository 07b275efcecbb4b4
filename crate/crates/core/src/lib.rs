pub mod analytics;
pub mod datastore;
pub mod error;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod speculation;
pub mod verification;

pub use error::{Result, SpecparError};
