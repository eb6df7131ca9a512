//! Fatigue-aware sequential recommendation.
//!
//! The crate covers the whole offline loop: interaction logs and synthetic
//! fatigue-bearing corpora ([`data`]), a small reverse-mode differentiation
//! substrate ([`numerics`]), the model blocks ([`interest`], [`similarity`],
//! [`longterm`], [`shortterm`], [`fatigue`]), the assembled model with its
//! trainer ([`model`]) and ranking evaluation ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod fatigue;
pub mod interest;
pub mod longterm;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod seeds;
pub mod shortterm;
pub mod similarity;

pub use error::{Error, Result};
