pub mod contact;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod optimize;
pub mod render;
pub mod sdf;
pub mod skeleton;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
