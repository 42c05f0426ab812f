//! Graph-convolutional reduced-order surrogate modeling for scalar and
//! vector fields on unstructured surface meshes.
//!
//! The pipeline turns a triangulated surface into a weighted node graph,
//! coarsens it where field gradients are low, couples the levels with moving
//! weighted least-squares interpolation, and trains a graph-convolutional
//! autoencoder that maps flow conditions to surface fields. Integrated
//! aerodynamic coefficients both regularize the training loss and serve as
//! evaluation metrics.

pub mod aero;
pub mod checkpoint;
pub mod coarsen;
pub mod dataset;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod gradient;
pub mod hpo;
pub mod kdtree;
pub mod mesh;
pub mod model;
pub mod mwls;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
