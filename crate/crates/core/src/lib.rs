//! Off-road vehicle model learning with meta-learned online adaptation.
//!
//! A hybrid model (parametric vehicle dynamics plus a neural residual whose
//! last layer is adapted online by a Kalman filter) is trained offline by
//! differentiating through the adaptation itself, then used inside a
//! sampling-based model predictive controller on procedurally generated
//! terrain.

pub mod adaptation;
pub mod dynamics;
pub mod episode;
pub mod experiment;
pub mod error;
pub mod grid;
pub mod io;
pub mod meta;
pub mod mppi;
pub mod model;
pub mod network;
pub mod sim;
pub mod synthetic;

pub use error::{Error, Result};
