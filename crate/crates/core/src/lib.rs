//! Segmented graph-transformer for graph instance classification.

pub mod autodiff;
pub mod dataset;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod unify;
pub mod training;
