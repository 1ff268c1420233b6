//! Deterministic inputs shared by the benchmarks.

use fined_core::evaluation::BinaryMap;
use fined_core::kernels::ConvSpec;
use fined_core::network::{init_params_with, Init};
use fined_core::synth::{scenes, SceneConfig};
use fined_core::trainer::Sample;
use fined_core::{EdgeMap, Graph, Mode, NetworkSpec, ParamStore, Shape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Input, spec, weights and bias for one same-padded 3×3 convolution.
pub struct ConvCase {
    pub input: Tensor<f32>,
    pub spec: ConvSpec,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

pub fn conv_case(channels: usize, side: usize, dilation: usize) -> ConvCase {
    let mut r = rng(1);
    let spec = ConvSpec::same(channels, channels, 3, dilation);
    ConvCase {
        input: Tensor::uniform(Shape::new(1, channels, side, side), -1.0, 1.0, &mut r),
        weight: Tensor::uniform(spec.weight_shape(), -0.1, 0.1, &mut r),
        bias: Tensor::uniform(spec.bias_shape(), -0.1, 0.1, &mut r),
        spec,
    }
}

/// A compiled graph with He-initialised weights.
pub fn network(variant: Variant, mode: Mode) -> (Graph, ParamStore<f32>) {
    let spec = NetworkSpec::new(variant, mode);
    let graph = Graph::build(&spec).expect("built-in spec compiles");
    let params = init_params_with(&spec, 0, Init::He).expect("built-in spec initialises");
    (graph, params)
}

pub fn image(side: usize) -> Tensor<f32> {
    Tensor::uniform(Shape::new(1, 3, side, side), 0.0, 1.0, &mut rng(2))
}

pub fn scene(side: usize) -> Sample {
    let cfg = SceneConfig {
        height: side,
        width: side,
        ..Default::default()
    };
    scenes(&cfg, 1, 3).pop().expect("one scene")
}

/// A soft edge map: the scene's ground truth blurred into a 3-px band plus
/// uniform noise, with the matching binary annotation.
pub fn edge_maps(side: usize) -> (EdgeMap, BinaryMap) {
    let s = scene(side);
    let gt = BinaryMap::from_tensor(s.gt.map()).expect("synthetic GT is binary");
    let mut r = rng(4);
    let values = (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            let near = (y.saturating_sub(1)..(y + 2).min(side))
                .flat_map(|yy| (x.saturating_sub(1)..(x + 2).min(side)).map(move |xx| (yy, xx)))
                .any(|(yy, xx)| gt.get(yy, xx));
            let base = if gt.get(y, x) {
                0.9
            } else if near {
                0.5
            } else {
                0.0
            };
            (base + 0.1 * r.random::<f32>()).min(1.0)
        })
        .collect();
    (
        EdgeMap::from_values(side, side, values).expect("values in [0, 1]"),
        gt,
    )
}
