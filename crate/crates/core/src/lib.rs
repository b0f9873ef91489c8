pub mod bench;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Result, SgqError};
