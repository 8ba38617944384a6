//! Multi-frame optical flow estimation on the CPU.
//!
//! The crate builds all-pairs cost volumes between learned feature maps,
//! samples motion features from a pooled volume pyramid around the current
//! flow estimate, detects entries whose sampling footprint left the volume
//! (and therefore vanished to zero), and repairs those entries from motion
//! features looked up against earlier frames. A small recurrent decoder
//! refines the flow over several iterations.
//!
//! Everything runs on a minimal reverse-mode autodiff tape ([`Graph`]) so
//! the whole pipeline, including the recovery step, is trainable end to
//! end and can be checked against finite differences.

pub mod check;
pub mod config;
pub mod costvolume;
pub mod element;
pub mod error;
pub mod graph;
// pub mod io;
pub mod lookup;
// pub mod metrics;
pub mod mfr;
pub mod model;
pub mod ops;
// pub mod synth;
pub mod tensor;
// pub mod train;

pub use element::Element;
pub use error::{FlowError, Result};
pub use graph::{Graph, NodeId, OpKernel};
pub use tensor::{Mask, Parameter, ParamStore, Tensor};
