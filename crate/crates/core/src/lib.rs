//! Speech restoration with time-frequency masking and deep subband filtering.
//!
//! The crate is organised bottom-up:
//!
//! * [`stft`] and [`wav`] provide the analysis/synthesis front end and file I/O.
//! * [`filtering`] holds the executable filtering models: time-domain
//!   convolution, narrowband masking, causal subband filtering and a
//!   least-squares analysis of how well each STFT-domain model fits a
//!   time-domain filter.
//! * [`dsfe`] is the pointwise layer that turns a single-frame complex mask
//!   into an `N_f`-tap causal subband filter.
//! * [`backbone`] is a small causal mask estimator and [`model`] wires it
//!   to the extension layer and the filtering stage.
//! * [`training`], [`synth`] and [`metrics`] cover optimisation, synthetic
//!   corruption data and scale-invariant evaluation.
//! * [`cli`] is the command-line surface; [`selftest`] backs its `check`
//!   subcommand.

pub mod backbone;
pub mod cli;
pub mod dsfe;
pub mod error;
pub mod filtering;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod selftest;
pub mod stft;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use stft::{Spectrogram, StftConfig, Waveform};

// rustfft re-exports the num-complex it was built against.
pub(crate) use rustfft::num_complex;
