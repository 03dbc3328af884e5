pub mod adapt_loss;
pub mod checks;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gfk;
pub mod io;
pub mod par;
pub mod prompt;
pub mod sampling;
pub mod scene;
pub mod segmodel;
pub mod subspace;

pub use error::{Error, Result};
