//! Rate-distortion-perception functions on finite alphabets.

pub mod baselines;
pub mod drp;
pub mod error;
pub mod io;
pub mod numeric;
pub mod ot;
pub mod pgm;
pub mod prob;
pub mod rdh;
pub mod rdp;
pub mod transitions;

pub use error::{Error, Result};
