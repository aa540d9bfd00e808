//! Few-shot repeated-pattern detection by template matching and box regression.

pub mod audit;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod error;
pub mod head;
pub mod infer;
pub mod loss;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod synthbench;
pub mod template;
pub mod trainer;

pub use error::{Result, TmrError};
