//! Multi-scale manifold alignment over layerwise transformer representations.
//!
//! Layer dumps live in a [`repr_store`] directory. [`boundary`] finds where
//! local, intermediate and global processing hand over, [`alignment`] trains
//! maps between the pooled scales, and [`intervention`] perturbs scales and
//! tests the effect. [`cli`] wires these into the `msma` binary.

pub mod alignment;
pub mod attention_profile;
pub mod boundary;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod intervention;
pub mod nn;
pub mod numeric;
pub mod probing;
pub mod repr_store;
pub mod svg;
