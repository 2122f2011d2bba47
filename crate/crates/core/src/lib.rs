//! Topology-attention ConvLSTM segmentation toolkit.
//!
//! The numeric modules are generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod attention;
pub mod config;
pub mod convlstm;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod persistence;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use field::{gaussian_smooth, threshold, BinaryMask2D, ScalarField2D, SliceStack};
pub use scalar::Real;

pub type Field = ScalarField2D<f64>;
pub type Field32 = ScalarField2D<f32>;
pub type Stack = SliceStack<f64>;
pub type Stack32 = SliceStack<f32>;
pub type Diagram = persistence::PersistenceDiagram<f64>;
pub type Params = convlstm::ConvLSTMParams<f64>;
pub type Params32 = convlstm::ConvLSTMParams<f32>;
