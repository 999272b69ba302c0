//! File formats, image loading and the command-line driver around
//! `lgcap-core`.

pub mod checkpoint;
pub mod cli;
pub mod coco;
pub mod config;
pub mod error;
pub mod images;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod results;
pub mod stemmer;
pub mod svg;
pub mod tokenizers;

pub use error::{AppError, AppResult};
