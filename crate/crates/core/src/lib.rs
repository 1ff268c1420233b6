//! Lightweight edge-detection networks built from scratch.
//!
//! The crate covers the full pipeline: a small dense tensor library with
//! reverse-mode differentiation ([`tensor`], [`kernels`], [`tape`]), the
//! FINED2 / FINED3 network family with training-helper pruning
//! ([`network`]), the class-balanced loss ([`loss`]), a deterministic SGD
//! trainer ([`trainer`]), single- and multi-scale inference with
//! non-maximum suppression ([`inference`]) and BSDS-style ODS/OIS
//! evaluation ([`evaluation`]).

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use inference::EdgeMap;
pub use loss::{ClassWeights, GroundTruth};
pub use network::{build, ForwardOutputs, Graph, Mode, NetworkSpec, ParamStore, Variant};
pub use tape::{backward, Tape, VarId};
pub use tensor::{Scalar, Shape, Tensor};
