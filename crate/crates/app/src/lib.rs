//! Project store, operations and HTTP service behind the `mogan` binary.

pub mod error;
pub mod ops;
pub mod service;
pub mod store;

pub use error::{AppError, ErrorKind, Result};
