//! Spatial audio and language embedding toolkit: ambisonic encoding, room
//! simulation, feature extraction, spatial captioning, a small autodiff
//! engine, the dual audio/text encoder and its evaluation.

pub mod ambisonics;
pub mod captions;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod model;
pub mod nncore;
pub mod pipeline;
pub mod roomsim;
pub mod seeding;
pub mod sphmath;

pub use error::{Error, Result};
