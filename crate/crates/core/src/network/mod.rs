//! FINED network graphs.
//!
//! A stage `s` is two 3×3 backbone convolutions (`conv{s}_1`, `conv{s}_2`),
//! each followed by relu. Stages after the first start with 2×2 max
//! pooling. Every backbone convolution feeds a dilated residual-relu block
//! (`drr{s}_{i}`); the two block outputs of a stage are summed, refined by
//! residual pooling (`respool{s}`) and projected to one logit channel by a
//! 1×1 side head (`side{s}`), then bilinearly upsampled to input size.
//!
//! Train mode computes every stage's side output plus a fused head over
//! their concatenation. Inference mode keeps only the last stage's
//! refinement path; the lower-stage blocks and the fused head are training
//! helpers and are never evaluated.

mod graph;
mod params;

pub use graph::{Graph, HeadKind, Layer, LayerOp, TapedOutputs};
pub use params::{
    count_params, init_params, init_params_with, load_params, load_params_for, prune_helpers,
    save_params, Init, LoadMode, ParamStore, WEIGHT_MAGIC,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Inference,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "inf" | "inference" => Ok(Mode::Inference),
            other => Err(Error::Invalid(format!(
                "unknown mode `{other}` (train | inf)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Inference => "inf",
        })
    }
}

/// Named network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Fined2,
    Fined3,
    Fined3Vgg,
}

impl Variant {
    /// Published parameter count in millions for `(variant, mode)`, if any.
    pub fn reference_params_millions(self, mode: Mode) -> f64 {
        match (self, mode) {
            (Variant::Fined2, Mode::Inference) => 0.23,
            (Variant::Fined2, Mode::Train) => 0.39,
            (Variant::Fined3, Mode::Inference) => 1.08,
            (Variant::Fined3, Mode::Train) => 1.43,
            (Variant::Fined3Vgg, Mode::Inference) => 1.44,
            (Variant::Fined3Vgg, Mode::Train) => 1.86,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fined2" => Ok(Variant::Fined2),
            "fined3" => Ok(Variant::Fined3),
            "fined3-vgg" => Ok(Variant::Fined3Vgg),
            other => Err(Error::Invalid(format!(
                "unknown spec `{other}` (fined2 | fined3 | fined3-vgg)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fined2 => "fined2",
            Variant::Fined3 => "fined3",
            Variant::Fined3Vgg => "fined3-vgg",
        })
    }
}

/// Declarative description of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub stages: usize,
    /// Backbone filter count per stage.
    pub stage_channels: Vec<usize>,
    pub drr_channels: usize,
    pub drr_reduce_channels: usize,
    /// One residual unit per dilation, applied in order.
    pub dilations: Vec<usize>,
    pub mode: Mode,
    pub respool_blocks: usize,
    pub respool_window: usize,
}

impl NetworkSpec {
    pub fn new(variant: Variant, mode: Mode) -> Self {
        let (stages, stage_channels) = match variant {
            Variant::Fined2 => (2, vec![16, 64]),
            Variant::Fined3 => (3, vec![16, 64, 256]),
            Variant::Fined3Vgg => (3, vec![64, 128, 256]),
        };
        NetworkSpec {
            in_channels: 3,
            stages,
            stage_channels,
            drr_channels: 32,
            drr_reduce_channels: 8,
            dilations: vec![5, 7, 9, 11],
            mode,
            respool_blocks: 2,
            respool_window: 5,
        }
    }

    pub fn fined2(mode: Mode) -> Self {
        NetworkSpec::new(Variant::Fined2, mode)
    }

    pub fn fined3(mode: Mode) -> Self {
        NetworkSpec::new(Variant::Fined3, mode)
    }

    pub fn fined3_vgg(mode: Mode) -> Self {
        NetworkSpec::new(Variant::Fined3Vgg, mode)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        NetworkSpec {
            mode,
            ..self.clone()
        }
    }

    /// Number of output heads: one per stage plus the fused head in train
    /// mode, a single head otherwise.
    pub fn head_count(&self) -> usize {
        match self.mode {
            Mode::Train => self.stages + 1,
            Mode::Inference => 1,
        }
    }

    /// Smallest input side that survives every stage's downsampling.
    pub fn min_input_side(&self) -> usize {
        1 << (self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.stages) {
            return Err(Error::Invalid(format!(
                "stages must be 2 or 3, got {}",
                self.stages
            )));
        }
        if self.stage_channels.len() != self.stages {
            return Err(Error::Invalid(format!(
                "{} stage channel counts given for {} stages",
                self.stage_channels.len(),
                self.stages
            )));
        }
        if self.dilations.is_empty()
            || self.dilations.iter().any(|d| d % 2 == 0)
            || self.dilations.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Invalid(format!(
                "dilations must be strictly increasing odd integers, got {:?}",
                self.dilations
            )));
        }
        let positive = [
            self.in_channels,
            self.drr_channels,
            self.drr_reduce_channels,
            self.respool_window,
        ];
        if positive.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::Invalid(
                "channel counts and pooling window must be ≥ 1".into(),
            ));
        }
        if self.respool_window.is_multiple_of(2) {
            return Err(Error::Invalid(
                "respool window must be odd to preserve size".into(),
            ));
        }
        Ok(())
    }
}

/// Logit maps produced by a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T = f32> {
    /// One single-channel map per evaluated stage, at input resolution.
    /// Inference graphs yield only the last stage.
    pub side_logits: Vec<Tensor<T>>,
    /// Fused head (train mode only).
    pub fused_logits: Option<Tensor<T>>,
}

impl<T> ForwardOutputs<T> {
    /// The logit map used at inference time: the last stage's side output.
    pub fn final_logits(&self) -> &Tensor<T> {
        self.side_logits.last().expect("at least one side output")
    }
}

/// Compiles a network description into a layer graph.
pub fn build(spec: &NetworkSpec) -> Result<Graph> {
    Graph::build(spec)
}
