//! Two-stage probing evaluator for text-guided image edits.
//!
//! Stage 1 ranks the layers of a frozen backbone by how well their pooled
//! hidden states separate edit quality and picks one; Stage 2 trains a small
//! regressor on that layer's features to predict mean opinion scores.

pub mod adapters;
pub mod backbone;
pub mod baseline;
pub mod cli;
pub mod corr;
pub mod dimension;
pub mod error;
pub mod fsutil;
pub mod ids;
pub mod image;
pub mod io;
pub mod layers;
pub mod mos;
pub mod numerics;
pub mod pipeline;
pub mod probe;

pub use error::{Error, Result};
