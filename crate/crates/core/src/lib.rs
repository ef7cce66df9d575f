//! Bi-directional predictive neural video codec.
//!
//! Frames are coded in a hierarchical B-frame order. Each B-frame is
//! predicted from two decoded references using optical flow that the
//! decoder re-derives on its own, and the prediction residue is coded by a
//! progressive recurrent autoencoder whose binary codes are entropy coded
//! with a masked 3-D context model.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod evalsuite;
pub mod flow;
pub mod frame;
pub mod gradcheck;
pub mod numerics;
pub mod prediction;
pub mod residual;

pub use error::{Error, Result};
