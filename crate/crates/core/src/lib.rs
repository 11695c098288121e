//! Energy-driven fusion of frame and event features for steering prediction.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), an
//! event-camera simulator and binner ([`events`]), the energy-weighted fusion
//! block and its baselines ([`fusion`]), the energy-score objective
//! ([`losses`]), a dual-stream toy network ([`model`]), a synthetic driving
//! dataset ([`data`]) and the experiment harness behind the `ecfm` binary
//! ([`harness`]).

pub mod data;
pub mod error;
pub mod events;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod model;
pub mod pgm;
pub mod tensor;

pub use error::{Error, Result};
