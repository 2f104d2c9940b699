//! Declarative layer graph for the dense encoder-decoder network with
//! residual-inception blocks.

mod builder;
mod params_io;

pub use params_io::{read_param_table, write_param_table, ParamTable};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CunetError, Result};
use crate::tensor::{ops, Tensor};
use crate::util::seeded_rng;

/// Network hyperparameters. Encoder widths double per level; the stem emits
/// `base_width` channels (the reference configuration uses 16, giving
/// encoder widths 32/64/128/256/512).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_modalities: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub encoder_widths: Vec<usize>,
    pub rib_rates: Vec<usize>,
    pub dropout_rate: f64,
}

impl NetConfig {
    /// Configuration with the given stem width and depth; encoder widths are
    /// derived by doubling.
    pub fn with_base(base_width: usize, depth: usize) -> NetConfig {
        let encoder_widths = (0..depth).map(|i| base_width * (2 << i)).collect();
        NetConfig {
            in_modalities: 4,
            num_classes: 4,
            base_width,
            depth,
            encoder_widths,
            rib_rates: vec![1, 3, 5],
            dropout_rate: 0.2,
        }
    }

    /// Full-scale reference configuration: stem 16, widths 32..512, depth 5.
    pub fn reference() -> NetConfig {
        NetConfig::with_base(16, 5)
    }

    /// Desk-scale configuration: stem 4, widths 8/16/32, depth 3.
    pub fn desk() -> NetConfig {
        NetConfig::with_base(4, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CunetError::Config(msg));
        if self.in_modalities == 0 || self.num_classes < 2 {
            return fail("need at least 1 modality and 2 classes".into());
        }
        if self.depth == 0 || self.encoder_widths.len() != self.depth {
            return fail(format!(
                "encoder_widths has {} entries, depth is {}",
                self.encoder_widths.len(),
                self.depth
            ));
        }
        if self.base_width % 2 != 0 || self.base_width == 0 {
            return fail(format!("base_width must be even and positive, got {}", self.base_width));
        }
        if self.encoder_widths[0] != 2 * self.base_width {
            return fail(format!(
                "first encoder width {} must be twice the base width {}",
                self.encoder_widths[0], self.base_width
            ));
        }
        for i in 1..self.encoder_widths.len() {
            if self.encoder_widths[i] != 2 * self.encoder_widths[i - 1] {
                return fail(format!(
                    "encoder widths must strictly double: {:?}",
                    self.encoder_widths
                ));
            }
        }
        if self.rib_rates.is_empty()
            || self.rib_rates[0] == 0
            || self.rib_rates.windows(2).any(|w| w[1] <= w[0])
        {
            return fail(format!(
                "rib_rates must be strictly increasing positive, got {:?}",
                self.rib_rates
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}

/// One graph node's operation.
#[derive(Debug, Clone)]
pub enum LayerOp {
    /// Graph input placeholder.
    Input,
    Conv {
        weight: String,
        bias: String,
        stride: [usize; 3],
        dilation: [usize; 3],
        padding: [usize; 3],
    },
    InstanceNorm,
    Relu,
    Dropout,
    MaxPool,
    Upsample,
    Concat,
    Add,
    SoftmaxChannels,
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    /// Output channel count, tracked at build time.
    pub channels: usize,
}

/// Shape of a named learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Forward execution mode. Training applies dropout and records the tape;
/// evaluation is deterministic, uses detached parameters, and builds no tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The network as an ordered node list over tensor ops, plus a named
/// parameter store. Node order is a topological order by construction.
pub struct LayerGraph {
    /// Present for full networks; standalone blocks carry no config.
    cfg: Option<NetConfig>,
    nodes: Vec<LayerNode>,
    specs: Vec<ParamSpec>,
    params: BTreeMap<String, Tensor>,
    output: usize,
    /// Number of pooling stages; input spatial extents must be divisible by
    /// 2^pool_levels.
    pool_levels: usize,
    input_channels: usize,
    dropout_rate: f64,
}

impl LayerGraph {
    pub fn config(&self) -> Option<&NetConfig> {
        self.cfg.as_ref()
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    /// Total learnable scalar count, from the specs (no materialization
    /// needed).
    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Convolution layers in the graph (the documented layer-count
    /// convention: convolutions only, projections and head included).
    pub fn conv_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, LayerOp::Conv { .. }))
            .count()
    }

    pub fn has_params(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Initialize parameters: weights fan-in-scaled uniform with bound
    /// sqrt(6 / fan_in), biases zero. Each parameter draws from its own
    /// (seed, name)-derived stream, so values do not depend on enumeration
    /// order.
    pub fn materialize(&mut self, seed: u64) {
        let mut params = BTreeMap::new();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let data = if spec.shape.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng: ChaCha8Rng = seeded_rng(seed, &format!("init:{}", spec.name));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            let t = Tensor::variable(data, &spec.shape).expect("spec shape consistent");
            params.insert(spec.name.clone(), t);
        }
        self.params = params;
    }

    /// Replace the parameter store. Names and shapes must agree exactly with
    /// the graph's specs; every discrepancy is listed in the error.
    pub fn set_params(&mut self, new: BTreeMap<String, Tensor>) -> Result<()> {
        let mut problems = Vec::new();
        for spec in &self.specs {
            match new.get(&spec.name) {
                None => problems.push(format!("missing parameter `{}`", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "parameter `{}`: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in new.keys() {
            if !self.specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected parameter `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(CunetError::ParamMismatch(problems.join("; ")));
        }
        self.params = new;
        Ok(())
    }

    /// Write the parameter store to `path` in the CUNETP1 container.
    pub fn save_params(&self, path: &std::path::Path) -> Result<()> {
        if !self.has_params() {
            return Err(CunetError::Graph("graph has no materialized parameters".into()));
        }
        let table: ParamTable = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), (t.shape().to_vec(), t.data().to_vec())))
            .collect();
        params_io::save_param_file(path, &table)
    }

    /// Load parameters from a CUNETP1 container, checking exact name and
    /// shape agreement.
    pub fn load_params(&mut self, path: &std::path::Path) -> Result<()> {
        let table = params_io::load_param_file(path)?;
        let mut new = BTreeMap::new();
        for (name, (shape, data)) in table {
            new.insert(name, Tensor::variable(data, &shape)?);
        }
        self.set_params(new)
    }

    fn param_tensor(&self, name: &str, mode: Mode) -> Result<Tensor> {
        let t = self.params.get(name).ok_or_else(|| {
            CunetError::Graph(format!(
                "parameter `{name}` not materialized; call materialize() or load_params() first"
            ))
        })?;
        Ok(match mode {
            Mode::Train => t.clone(),
            Mode::Eval => t.detach(),
        })
    }

    /// Run the graph on `input` [b, c, d, h, w]. Training mode needs an RNG
    /// when the graph contains dropout with a positive rate.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let dims = ops::dims5(input, "LayerGraph::forward", "input")?;
        if dims[1] != self.input_channels {
            return Err(CunetError::ShapeMismatch {
                op: "LayerGraph::forward",
                detail: format!(
                    "channel axis: expected {} input channels, got {}",
                    self.input_channels, dims[1]
                ),
            });
        }
        let div = 1usize << self.pool_levels;
        for (axis, &e) in dims[2..].iter().enumerate() {
            if e % div != 0 {
                return Err(CunetError::ShapeMismatch {
                    op: "LayerGraph::forward",
                    detail: format!(
                        "spatial axis {axis}: extent {e} not divisible by 2^{} = {div}",
                        self.pool_levels
                    ),
                });
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let get = |k: usize| -> &Tensor { values[k].as_ref().expect("topological order") };
            let out = match &node.op {
                LayerOp::Input => input.clone(),
                LayerOp::Conv {
                    weight,
                    bias,
                    stride,
                    dilation,
                    padding,
                } => {
                    let w = self.param_tensor(weight, mode)?;
                    let b = self.param_tensor(bias, mode)?;
                    ops::conv3d(get(node.inputs[0]), &w, &b, *stride, *dilation, *padding)?
                }
                LayerOp::InstanceNorm => ops::instance_norm(get(node.inputs[0]), 1e-5)?,
                LayerOp::Relu => ops::relu(get(node.inputs[0])),
                LayerOp::Dropout => match mode {
                    Mode::Eval => get(node.inputs[0]).clone(),
                    Mode::Train => {
                        if self.dropout_rate == 0.0 {
                            get(node.inputs[0]).clone()
                        } else {
                            let r = rng.as_deref_mut().ok_or_else(|| {
                                CunetError::Graph(
                                    "training forward with dropout requires an RNG".into(),
                                )
                            })?;
                            ops::dropout(get(node.inputs[0]), self.dropout_rate, r, true)?
                        }
                    }
                },
                LayerOp::MaxPool => ops::maxpool3d(get(node.inputs[0]))?,
                LayerOp::Upsample => ops::upsample3d_trilinear(get(node.inputs[0]))?,
                LayerOp::Concat => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&k| get(k)).collect();
                    ops::concat(&ins)?
                }
                LayerOp::Add => ops::add(get(node.inputs[0]), get(node.inputs[1]))?,
                LayerOp::SoftmaxChannels => ops::softmax_channels(get(node.inputs[0]))?,
            };
            values[i] = Some(out);
        }
        Ok(values[self.output].take().expect("output node executed"))
    }

    /// Symbolically propagate shapes for a given input, checking static
    /// consistency. Returns the per-node output shapes.
    pub fn check_shapes(&self, batch: usize, spatial: [usize; 3]) -> Result<Vec<(String, [usize; 5])>> {
        let div = 1usize << self.pool_levels;
        for (axis, &e) in spatial.iter().enumerate() {
            if e % div != 0 || e == 0 {
                return Err(CunetError::ShapeMismatch {
                    op: "check_shapes",
                    detail: format!(
                        "spatial axis {axis}: extent {e} not divisible by 2^{} = {div}",
                        self.pool_levels
                    ),
                });
            }
        }
        let spec_shape = |name: &str| -> &[usize] {
            &self
                .specs
                .iter()
                .find(|s| s.name == name)
                .expect("conv references a declared parameter")
                .shape
        };
        let mut shapes: Vec<[usize; 5]> = Vec::with_capacity(self.nodes.len());
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.op {
                LayerOp::Input => [batch, self.input_channels, spatial[0], spatial[1], spatial[2]],
                LayerOp::Conv {
                    weight,
                    stride,
                    dilation,
                    padding,
                    ..
                } => {
                    let w = spec_shape(weight);
                    let x = shapes[node.inputs[0]];
                    if x[1] != w[1] {
                        return Err(CunetError::ShapeMismatch {
                            op: "check_shapes",
                            detail: format!(
                                "node `{}`: channel axis expects {} got {}",
                                node.name, w[1], x[1]
                            ),
                        });
                    }
                    let mut s = [batch, w[0], 0, 0, 0];
                    for a in 0..3 {
                        let padded = x[2 + a] + 2 * padding[a];
                        let dilated = dilation[a] * (w[2 + a] - 1) + 1;
                        if padded < dilated {
                            return Err(CunetError::EmptyOutput {
                                op: "check_shapes",
                                detail: format!("node `{}` axis {a}", node.name),
                            });
                        }
                        s[2 + a] = (padded - dilated) / stride[a] + 1;
                    }
                    s
                }
                LayerOp::InstanceNorm | LayerOp::Relu | LayerOp::Dropout | LayerOp::SoftmaxChannels => {
                    shapes[node.inputs[0]]
                }
                LayerOp::MaxPool => {
                    let x = shapes[node.inputs[0]];
                    for a in 0..3 {
                        if x[2 + a] % 2 != 0 {
                            return Err(CunetError::ShapeMismatch {
                                op: "check_shapes",
                                detail: format!("node `{}`: odd extent {} on axis {a}", node.name, x[2 + a]),
                            });
                        }
                    }
                    [x[0], x[1], x[2] / 2, x[3] / 2, x[4] / 2]
                }
                LayerOp::Upsample => {
                    let x = shapes[node.inputs[0]];
                    [x[0], x[1], x[2] * 2, x[3] * 2, x[4] * 2]
                }
                LayerOp::Concat => {
                    let first = shapes[node.inputs[0]];
                    let mut c = 0;
                    for &k in &node.inputs {
                        let s = shapes[k];
                        if [s[0], s[2], s[3], s[4]] != [first[0], first[2], first[3], first[4]] {
                            return Err(CunetError::ShapeMismatch {
                                op: "check_shapes",
                                detail: format!("node `{}`: concat extents differ", node.name),
                            });
                        }
                        c += s[1];
                    }
                    [first[0], c, first[2], first[3], first[4]]
                }
                LayerOp::Add => {
                    let a = shapes[node.inputs[0]];
                    let b = shapes[node.inputs[1]];
                    if a != b {
                        return Err(CunetError::ShapeMismatch {
                            op: "check_shapes",
                            detail: format!("node `{}`: add of {a:?} vs {b:?}", node.name),
                        });
                    }
                    a
                }
            };
            if shape[1] != node.channels {
                return Err(CunetError::Graph(format!(
                    "node `{}`: recorded {} channels but shape says {}",
                    node.name, node.channels, shape[1]
                )));
            }
            shapes.push(shape);
            out.push((node.name.clone(), shape));
        }
        Ok(out)
    }
}

/// Architecture report produced by [`inspect`].
#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub parameter_count: usize,
    /// Convolution layers only; see `counting_convention`.
    pub layer_count: usize,
    pub counting_convention: String,
    pub encoder_widths: Vec<usize>,
    pub stem_width: usize,
    /// Per-node output shapes at the reference input size.
    pub node_shapes: Vec<(String, [usize; 5])>,
    /// Theoretical receptive-field extent per axis at the output, in input
    /// voxels.
    pub receptive_field: [usize; 3],
}

/// Deterministic architecture report: parameter and layer counts, per-node
/// shapes under `spatial`, and the receptive-field extent.
pub fn inspect(graph: &LayerGraph, spatial: [usize; 3]) -> Result<InspectReport> {
    let node_shapes = graph.check_shapes(1, spatial)?;
    // Receptive field per node: extent (in input voxels) and jump (input
    // voxels between adjacent feature-map voxels); max over branch inputs.
    let mut rf: Vec<(usize, usize)> = Vec::with_capacity(graph.nodes.len());
    for node in graph.nodes() {
        let entry = match &node.op {
            LayerOp::Input => (1, 1),
            LayerOp::Conv {
                weight, dilation, ..
            } => {
                let w = graph
                    .specs
                    .iter()
                    .find(|s| s.name == *weight)
                    .expect("declared parameter")
                    .shape
                    .clone();
                let (r0, j) = rf[node.inputs[0]];
                // Isotropic kernels: use the depth axis extent.
                (r0 + (w[2] - 1) * dilation[0] * j, j)
            }
            LayerOp::MaxPool => {
                let (r0, j) = rf[node.inputs[0]];
                (r0 + j, j * 2)
            }
            LayerOp::Upsample => {
                // Interior outputs blend two adjacent source voxels.
                let (r0, j) = rf[node.inputs[0]];
                (r0 + j, (j / 2).max(1))
            }
            _ => {
                let mut best = (0, 1);
                for &k in &node.inputs {
                    if rf[k].0 > best.0 {
                        best = rf[k];
                    }
                }
                best
            }
        };
        rf.push(entry);
    }
    let out_rf = rf[graph.output].0;
    Ok(InspectReport {
        parameter_count: graph.parameter_count(),
        layer_count: graph.conv_layer_count(),
        counting_convention: "convolution layers only (3x3x3 units, 1x1x1 projections, head)"
            .to_string(),
        encoder_widths: graph
            .cfg
            .as_ref()
            .map(|c| c.encoder_widths.clone())
            .unwrap_or_default(),
        stem_width: graph.cfg.as_ref().map(|c| c.base_width).unwrap_or(0),
        node_shapes,
        receptive_field: [out_rf, out_rf, out_rf],
    })
}
