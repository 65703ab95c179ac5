//! Interactive state space model (ISSM) decoder for 3D indoor object detection.
//!
//! Scene points are the input sequence of a selective scan whose system
//! states are the object queries. The scan parameters depend on both the
//! scene features and the geometry of each query's predicted box, so each
//! state selects the scene points relevant to it while the scene stream is
//! updated in the same pass.
//!
//! Layout:
//! - [`numerics`]: dense tensors, seeded randomness and the neural primitives.
//! - [`geometry`]: rotated boxes, synthetic scenes, farthest point sampling.
//! - [`serialization`]: Hilbert-curve point ordering with six axis priorities.
//! - [`ssm`]: discretization, sequential/chunked scans, conv form, backward.
//! - [`issm`]: spatial correlation, delay kernel, bidirectional scan module.
//! - [`decoder`]: the decoder layer/stack, detection head, focal loss.
//! - [`verify`]: executable equivalence oracles and the complexity benchmark.
//! - [`io`] and [`cli`]: file formats and the command-line surface.

// `!(a > b)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod issm;
pub mod numerics;
pub mod serialization;
pub mod ssm;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
