pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod numerics;
pub mod pipeline;
pub mod prompts;
pub mod training;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use numerics::{ParamStore, Tensor};
