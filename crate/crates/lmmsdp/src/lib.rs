//! File formats, command-line surface and Monte-Carlo experiments on top
//! of `lmmsdp-core`.

pub mod cli;
pub mod error;
pub mod io;
pub mod simulation;

pub use error::{AppError, AppResult};
