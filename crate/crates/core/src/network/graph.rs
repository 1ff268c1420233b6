use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec, Padding};
use crate::network::{ForwardOutputs, Mode, NetworkSpec, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Input,
    /// Convolution whose parameters are `{param}.weight` / `{param}.bias`,
    /// optionally followed by relu.
    Conv {
        param: String,
        spec: ConvSpec,
        relu: bool,
    },
    MaxPool2x2,
    AvgPool {
        window: usize,
    },
    Add,
    Concat,
    /// Bilinear resize to the graph input's spatial size.
    UpsampleToInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Side output of a stage (1-based).
    Side(usize),
    Fused,
}

/// Compiled layer DAG with named parameters. Layers are stored in
/// topological order.
#[derive(Clone, Debug)]
pub struct Graph {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    heads: Vec<(HeadKind, usize)>,
}

/// Tape handles for the heads of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct TapedOutputs {
    pub side_logits: Vec<VarId>,
    pub fused_logits: Option<VarId>,
    pub params: HashMap<String, VarId>,
}

struct Builder {
    layers: Vec<Layer>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, op: LayerOp, inputs: Vec<usize>) -> usize {
        self.layers.push(Layer {
            name: name.into(),
            op,
            inputs,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, name: &str, input: usize, spec: ConvSpec, relu: bool) -> usize {
        self.push(
            name,
            LayerOp::Conv {
                param: name.to_string(),
                spec,
                relu,
            },
            vec![input],
        )
    }

    /// Dilated residual relu: 3×3 head, one residual unit per dilation
    /// (`x + relu(conv_b(relu(conv_a(x))))`, both convs dilated), 1×1 tail.
    fn drr(&mut self, name: &str, input: usize, in_c: usize, spec: &NetworkSpec) -> usize {
        let c = spec.drr_channels;
        let mut x = self.conv(
            &format!("{name}.head"),
            input,
            ConvSpec::same(in_c, c, 3, 1),
            true,
        );
        for (k, &d) in spec.dilations.iter().enumerate() {
            let unit = format!("{name}.unit{}", k + 1);
            let a = self.conv(
                &format!("{unit}.conv_a"),
                x,
                ConvSpec::same(c, c, 3, d),
                true,
            );
            let b = self.conv(
                &format!("{unit}.conv_b"),
                a,
                ConvSpec::same(c, c, 3, d),
                true,
            );
            x = self.push(unit, LayerOp::Add, vec![x, b]);
        }
        self.conv(
            &format!("{name}.tail"),
            x,
            ConvSpec::same(c, spec.drr_reduce_channels, 1, 1),
            false,
        )
    }

    /// Residual pooling: `y + conv3x3(avg_pool(y))`, repeated.
    fn respool(&mut self, name: &str, input: usize, spec: &NetworkSpec) -> usize {
        let c = spec.drr_reduce_channels;
        let mut y = input;
        for k in 1..=spec.respool_blocks {
            let p = self.push(
                format!("{name}.pool{k}"),
                LayerOp::AvgPool {
                    window: spec.respool_window,
                },
                vec![y],
            );
            let r = self.conv(
                &format!("{name}.block{k}"),
                p,
                ConvSpec::same(c, c, 3, 1),
                false,
            );
            y = self.push(format!("{name}.out{k}"), LayerOp::Add, vec![y, r]);
        }
        y
    }

    /// DRR pair, sum, residual pooling and side head for stage `s`.
    fn refinement(&mut self, s: usize, taps: [usize; 2], in_c: usize, spec: &NetworkSpec) -> usize {
        let d1 = self.drr(&format!("drr{s}_1"), taps[0], in_c, spec);
        let d2 = self.drr(&format!("drr{s}_2"), taps[1], in_c, spec);
        let sum = self.push(format!("drr{s}.sum"), LayerOp::Add, vec![d1, d2]);
        let refined = self.respool(&format!("respool{s}"), sum, spec);
        let logit = self.conv(
            &format!("side{s}"),
            refined,
            ConvSpec::same(spec.drr_reduce_channels, 1, 1, 1),
            false,
        );
        self.push(format!("side{s}.up"), LayerOp::UpsampleToInput, vec![logit])
    }
}

impl Graph {
    pub fn build(spec: &NetworkSpec) -> Result<Graph> {
        spec.validate()?;
        let mut b = Builder { layers: Vec::new() };
        let input = b.push("input", LayerOp::Input, vec![]);
        let mut x = input;
        let mut in_c = spec.in_channels;
        let mut heads = Vec::new();
        for s in 1..=spec.stages {
            if s > 1 {
                x = b.push(format!("pool{}", s - 1), LayerOp::MaxPool2x2, vec![x]);
            }
            let out_c = spec.stage_channels[s - 1];
            let c1 = b.conv(
                &format!("conv{s}_1"),
                x,
                ConvSpec::same(in_c, out_c, 3, 1),
                true,
            );
            let c2 = b.conv(
                &format!("conv{s}_2"),
                c1,
                ConvSpec::same(out_c, out_c, 3, 1),
                true,
            );
            let needs_head = spec.mode == Mode::Train || s == spec.stages;
            if needs_head {
                let up = b.refinement(s, [c1, c2], out_c, spec);
                heads.push((HeadKind::Side(s), up));
            }
            x = c2;
            in_c = out_c;
        }
        if spec.mode == Mode::Train {
            let sides: Vec<usize> = heads.iter().map(|&(_, l)| l).collect();
            let cat = b.push("fuse.concat", LayerOp::Concat, sides);
            let fused = b.conv("fuse", cat, ConvSpec::same(spec.stages, 1, 1, 1), false);
            heads.push((HeadKind::Fused, fused));
        }
        Ok(Graph {
            spec: spec.clone(),
            layers: b.layers,
            heads,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn heads(&self) -> &[(HeadKind, usize)] {
        &self.heads
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// `(name, shape)` of every parameter, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerOp::Conv { param, spec, .. } = &layer.op {
                out.push((format!("{param}.weight"), spec.weight_shape()));
                if spec.has_bias {
                    out.push((format!("{param}.bias"), spec.bias_shape()));
                }
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Total parameter count implied by the graph.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.numel()).sum()
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, s.c
            )));
        }
        let min = self.spec.min_input_side().max(2);
        if self.spec.stages > 1 && (s.h < min || s.w < min) {
            return Err(Error::Shape(format!(
                "input {}x{} is smaller than the minimum {min}x{min}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    fn param<'a, T: Scalar>(params: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
        params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn eval_layer<T: Scalar>(
        &self,
        layer: &Layer,
        params: &ParamStore<T>,
        inputs: &[&Tensor<T>],
        input_hw: (usize, usize),
    ) -> Result<Tensor<T>> {
        Ok(match &layer.op {
            LayerOp::Input => unreachable!("input layer is seeded, not evaluated"),
            LayerOp::Conv { param, spec, relu } => {
                let w = Self::param(params, &format!("{param}.weight"))?;
                let b = if spec.has_bias {
                    Some(Self::param(params, &format!("{param}.bias"))?)
                } else {
                    None
                };
                let y = kernels::conv2d(inputs[0], spec, w, b)?;
                if *relu {
                    kernels::relu(&y)
                } else {
                    y
                }
            }
            LayerOp::MaxPool2x2 => kernels::max_pool_2x2(inputs[0])?.0,
            LayerOp::AvgPool { window } => kernels::avg_pool(inputs[0], *window, 1, Padding::Same)?,
            LayerOp::Add => kernels::add(inputs[0], inputs[1])?,
            LayerOp::Concat => kernels::concat_channels(inputs)?,
            LayerOp::UpsampleToInput => {
                kernels::bilinear_resize(inputs[0], input_hw.0, input_hw.1)?
            }
        })
    }

    /// Runs the graph and returns the requested layer activations. Values
    /// no longer needed by later layers are released as the pass proceeds.
    fn run<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        keep: &[usize],
    ) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let s = x.shape();
        let hw = (s.h, s.w);
        let mut last_use = vec![0usize; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for &j in &l.inputs {
                last_use[j] = i;
            }
        }
        for &k in keep {
            last_use[k] = usize::MAX;
        }
        let mut vals: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        vals[0] = Some(x.clone());
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let out = {
                let ins: Vec<&Tensor<T>> = layer
                    .inputs
                    .iter()
                    .map(|&j| vals[j].as_ref().expect("input computed"))
                    .collect();
                self.eval_layer(layer, params, &ins, hw)?
            };
            vals[i] = Some(out);
            for &j in &layer.inputs {
                if last_use[j] == i {
                    vals[j] = None;
                }
            }
        }
        Ok(keep
            .iter()
            .map(|&k| vals[k].clone().expect("kept value"))
            .collect())
    }

    /// Plain forward pass; inputs may be batched.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<ForwardOutputs<T>> {
        let idx: Vec<usize> = self.heads.iter().map(|&(_, l)| l).collect();
        let mut vals = self.run(params, x, &idx)?;
        let fused = if self.spec.mode == Mode::Train {
            vals.pop()
        } else {
            None
        };
        Ok(ForwardOutputs {
            side_logits: vals,
            fused_logits: fused,
        })
    }

    /// Activations of the named layers.
    pub fn activations<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        names: &[&str],
    ) -> Result<Vec<Tensor<T>>> {
        let idx = names
            .iter()
            .map(|n| {
                self.layer_index(n).ok_or_else(|| Error::UnknownLayer {
                    name: n.to_string(),
                    valid: self.layer_names().join(", "),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.run(params, x, &idx)
    }

    /// Forward pass recorded on `tape`. Each parameter is registered once.
    pub fn forward_taped<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        tape: &mut Tape<T>,
    ) -> Result<TapedOutputs> {
        self.check_input(x)?;
        let s = x.shape();
        let mut ids: Vec<VarId> = Vec::with_capacity(self.layers.len());
        let mut pids: HashMap<String, VarId> = HashMap::new();
        let mut param_id = |tape: &mut Tape<T>, name: String| -> Result<VarId> {
            if let Some(&id) = pids.get(&name) {
                return Ok(id);
            }
            let v = Self::param(params, &name)?.clone();
            let id = tape.param(name.clone(), v);
            pids.insert(name, id);
            Ok(id)
        };
        for layer in &self.layers {
            let ins: Vec<VarId> = layer.inputs.iter().map(|&j| ids[j]).collect();
            let id = match &layer.op {
                LayerOp::Input => tape.input(x.clone()),
                LayerOp::Conv { param, spec, relu } => {
                    let w = param_id(tape, format!("{param}.weight"))?;
                    let b = if spec.has_bias {
                        Some(param_id(tape, format!("{param}.bias"))?)
                    } else {
                        None
                    };
                    let y = tape.conv2d(ins[0], w, b, *spec)?;
                    if *relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerOp::MaxPool2x2 => tape.max_pool_2x2(ins[0])?,
                LayerOp::AvgPool { window } => tape.avg_pool(ins[0], *window, 1, Padding::Same)?,
                LayerOp::Add => tape.add(ins[0], ins[1])?,
                LayerOp::Concat => tape.concat(&ins)?,
                LayerOp::UpsampleToInput => tape.resize(ins[0], s.h, s.w)?,
            };
            ids.push(id);
        }
        let mut side = Vec::new();
        let mut fused = None;
        for &(kind, l) in &self.heads {
            match kind {
                HeadKind::Side(_) => side.push(ids[l]),
                HeadKind::Fused => fused = Some(ids[l]),
            }
        }
        Ok(TapedOutputs {
            side_logits: side,
            fused_logits: fused,
            params: pids,
        })
    }
}
