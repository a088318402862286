//! Iterative active learning and semi-supervised training for domain-adaptive
//! semantic segmentation.

pub mod active_selection;
pub mod annotation_io;
mod binio;
pub mod error;
pub mod evaluation;
pub mod loop_orchestrator;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pseudo_label;
pub mod synthetic_data;

pub use error::{Error, ErrorKind, Result};
