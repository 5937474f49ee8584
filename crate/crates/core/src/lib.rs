pub mod em;
pub mod error;
pub mod fit;
pub mod io;
pub mod kmeans;
pub mod matching;
pub mod mcmc;
pub mod model;
pub mod numcore;
pub mod sampling;
pub mod selection;
pub mod simdata;

pub use error::{Error, Result};
