//! Sharpness-aware optimization on a small dense reverse-mode autodiff engine.
//!
//! The crate is `no_std` with `alloc`: every operation here is pure computation
//! over in-memory buffers. File IO, configuration files and the command line
//! live in the `lookbehind-harness` crate.
//!
//! Layout:
//!
//! - [`tensor`] and [`diffcore`]: dense `f64` tensors, flat parameter vectors and
//!   the tape that differentiates model losses.
//! - [`models`]: MLPs, a small convolutional net with optional batch-norm, and
//!   analytic test landscapes.
//! - [`optimizers`]: SGD, SAM/ASAM, multistep ascent, Lookahead and Lookbehind.
//! - [`sharpness`]: m-sharpness over a sweep of radii.
//! - [`robustness`]: multiplicative weight-noise evaluation.
//! - [`lifelong`]: task-sequential training, experience replay and C-MAML.
//! - [`data`]: synthetic datasets, IDX decoding, task splits and batching.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }

        impl core::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::config(alloc::format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }

        impl core::fmt::Display for $ty {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

pub mod data;
pub mod diffcore;
mod error;
pub mod lifelong;
pub mod models;
pub mod optimizers;
pub mod rng;
pub mod robustness;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
