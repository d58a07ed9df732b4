//! Front-to-top view projection: a trainable network that maps a front-view
//! camera image to a bird's-eye-view semantic layout.
//!
//! This crate is `no_std` (with `alloc`) and holds every numerical piece:
//! the reverse-mode [`tensor`] engine, the projection blocks in [`ftvp`], the
//! full [`network`], the synthetic road-scene generator in [`synth`] and the
//! optimizer, metrics, trainer and map stitching in [`train`]. File formats,
//! the CLI and threading live in the `ftvp` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod error;
pub mod ftvp;
pub mod network;
pub mod params;
pub mod raster;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
