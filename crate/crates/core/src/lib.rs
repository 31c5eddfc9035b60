//! Weakly supervised joint box and mask grounding on synthetic scenes.

pub mod ccm;
pub mod error;
pub mod featbank;
pub mod geom;
pub mod harness;
pub mod numcore;
pub mod optim;
pub mod params;
pub mod seed;
pub mod synth;
pub mod wrec;
pub mod wres;

pub use error::{Error, Result};
pub use geom::{BBox, Mask};
pub use numcore::{Gradients, Tape, Tensor, Var};
