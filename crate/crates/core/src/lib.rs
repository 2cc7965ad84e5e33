//! Differentially quantized gradient methods over a rate-limited channel.
//!
//! The crate is organised bottom-up:
//!
//! - [`quantizer`]: scalar uniform quantizers and bit-exact index coding.
//! - [`transport`]: framed in-memory channel between server and workers.
//! - [`problems`]: least-squares objectives with known constants and optimizer.
//! - [`engines`]: GD, AGD and HB with and without quantized uplinks.
//! - [`bounds`]: closed-form contraction factors, thresholds and envelopes.
//! - [`harness`]: trial sweeps, contraction estimation, CSV and SVG output.
//!
//! Engines, quantizers and objectives are generic over [`Scalar`] (`f32` or
//! `f64`); the harness and bounds run in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod engines;
pub mod harness;
pub mod problems;
pub mod quantizer;
pub mod scalar;
pub mod transport;

pub use scalar::Scalar;

pub type Instance = problems::Instance<f64>;
pub type LeastSquares = problems::LeastSquares<f64>;
pub type HyperParams = engines::HyperParams<f64>;
pub type RangeSchedule = engines::RangeSchedule<f64>;
pub type QuantizedEngine = engines::QuantizedEngine<f64>;
pub type Unquantized = engines::Unquantized<f64>;

pub type Instance32 = problems::Instance<f32>;
pub type LeastSquares32 = problems::LeastSquares<f32>;
pub type HyperParams32 = engines::HyperParams<f32>;
pub type RangeSchedule32 = engines::RangeSchedule<f32>;
pub type QuantizedEngine32 = engines::QuantizedEngine<f32>;
pub type Unquantized32 = engines::Unquantized<f32>;
