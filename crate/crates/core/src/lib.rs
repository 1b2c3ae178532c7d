//! Bayesian models for random directions attached to locations on the 2-simplex.
//!
//! The crate covers circular distributions ([`circular`]), projected Gaussian
//! processes ([`gp`]), the independent and spatial von Mises models
//! ([`models`]), their MCMC and EM fitting routines ([`samplers`], [`em`]),
//! closed-form prior moments ([`theory`]), direction extraction from
//! compositions ([`dirext`]) and posterior-predictive model selection
//! ([`evalsel`]).

pub mod circular;
pub mod dirext;
pub mod em;
pub mod error;
pub mod evalsel;
pub mod gp;
pub mod models;
pub mod numeric;
pub mod samplers;
pub mod theory;

pub use error::{Error, Result};
