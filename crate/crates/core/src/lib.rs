//! Differentiable finite elements for recovering spatially varying
//! coefficient fields from PDE solution data.

pub mod error;
pub mod experiment;
pub mod fem;
pub mod graph;
pub mod la;
pub mod mesh;
pub mod nn;
pub mod optim;
pub mod pcl;
pub mod problems;

pub use error::{Error, Result};
