pub mod autodiff;
pub mod error;
pub mod gaf;
pub mod geometry;
pub mod gradsuite;
pub mod init;
pub mod lcd;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod spatial;
pub mod splat;

pub use error::{Error, Result};
