pub mod config;
pub mod demons;
pub mod denoise;
pub mod error;
pub mod grid;
pub mod infometrics;
pub mod io;
pub mod life;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod rigid;

pub use error::{Error, Result};
