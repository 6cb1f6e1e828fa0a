//! Dependency-grouped model graphs.
//!
//! A model is declared as an ordered list of layers. Every width-bearing
//! layer (linear or conv) names the dependency group that owns its output
//! channels; all layers in a group share one mask. A graph evaluates in three
//! modes:
//!
//! * `Full`: the unpruned network.
//! * `Soft`: each width-bearing layer's output channels are scaled by the
//!   group's relaxed mask `w` (the network `theta * w`).
//! * `Hard`: weights are sliced to the retained prefix of every group (the
//!   network `theta<m>`), so pruned channels do not exist at all.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::masking::{relax_mask, soft_channel_count, GroupMask};
use crate::nn::{conv2d_forward, linear_forward, ConvLayer, LinearLayer};
use crate::rng::{stream_rng, Stream};

/// Reserved node id of the model input.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub num_classes: usize,
    pub groups: Vec<GroupSpec>,
    /// Topologically ordered; the last layer produces the logits.
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    /// Per-sample shape: `[features]` or `[channels, height, width]`.
    pub shape: Vec<usize>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub id: String,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub fixed: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv,
    Relu,
    Add,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Producer node ids; defaults to the previous node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    /// Output group of a linear or conv layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Optional declared input width, checked against the producer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl LayerSpec {
    pub fn linear(id: &str, group: &str) -> Self {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::Linear,
            inputs: Vec::new(),
            group: Some(group.into()),
            in_features: None,
            kernel: None,
            stride: None,
            padding: None,
        }
    }

    pub fn conv(id: &str, group: &str, kernel: [usize; 2], stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..LayerSpec::linear(id, group)
        }
    }

    pub fn unary(id: &str, kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            group: None,
            ..LayerSpec::linear(id, "")
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }
}

impl ModelSpec {
    /// A ReLU MLP `input -> hidden... -> num_classes` with one prunable group
    /// per hidden layer (`h1`, `h2`, ...) and fixed `in`/`out` groups.
    pub fn mlp(input: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut groups = vec![GroupSpec {
            id: "in".into(),
            channels: input,
            fixed: true,
        }];
        let mut layers = Vec::new();
        for (i, &h) in hidden.iter().enumerate() {
            let g = format!("h{}", i + 1);
            groups.push(GroupSpec {
                id: g.clone(),
                channels: h,
                fixed: false,
            });
            layers.push(LayerSpec::linear(&format!("fc{}", i + 1), &g));
            layers.push(LayerSpec::unary(&format!("relu{}", i + 1), LayerKind::Relu));
        }
        groups.push(GroupSpec {
            id: "out".into(),
            channels: num_classes,
            fixed: true,
        });
        layers.push(LayerSpec::linear(&format!("fc{}", hidden.len() + 1), "out"));
        ModelSpec {
            input: InputSpec {
                shape: vec![input],
                group: "in".into(),
            },
            num_classes,
            groups,
            layers,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateId,
    UnknownInput,
    Cycle,
    Order,
    Arity,
    UnknownGroup,
    MissingGroup,
    UnexpectedGroup,
    GroupMismatch,
    ShapeMismatch,
    Rank,
    Geometry,
    InputGroupNotFixed,
    OutputGroupNotFixed,
    OutputWidth,
    Empty,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("rule serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// One validation failure, tied to a node (or group) id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub node: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.node, self.message)
    }
}

/// Per-sample description of a value flowing through the graph.
#[derive(Debug, Clone, PartialEq)]
struct ValueInfo {
    group: usize,
    /// Features per channel (spatial size after a flatten, else 1).
    multiplicity: usize,
    /// Full (unpruned) per-sample shape.
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum NodeOp {
    Linear { param: usize },
    Conv { param: usize, flops_per_pair: usize },
    Relu,
    Add,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    id: String,
    op: NodeOp,
    /// Value slots; slot 0 is the model input, slot `i + 1` is node `i`.
    inputs: Vec<usize>,
    out_group: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    nodes: Vec<Node>,
    values: Vec<ValueInfo>,
    /// `(node index, out group, in group, flops per (out, in) channel pair)`
    layer_flops: Vec<(usize, usize, usize, usize)>,
    params: Vec<ParamShape>,
    group_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum ParamShape {
    Linear { c_out: usize, c_in: usize },
    Conv { c_out: usize, c_in: usize, kernel: [usize; 2], stride: usize, padding: usize },
}

/// Checks the spec and reports every rule violation.
pub fn validate_model(spec: &ModelSpec) -> std::result::Result<(), Vec<Diagnostic>> {
    compile(spec).map(|_| ())
}

fn compile(spec: &ModelSpec) -> std::result::Result<Plan, Vec<Diagnostic>> {
    let mut diags = Vec::new();

    let mut group_index = HashMap::new();
    for (i, g) in spec.groups.iter().enumerate() {
        if group_index.insert(g.id.clone(), i).is_some() {
            diag(&mut diags, &g.id, Rule::DuplicateId, "group declared twice".into());
        }
        if g.channels == 0 {
            diag(&mut diags, &g.id, Rule::ShapeMismatch, "group has zero channels".into());
        }
    }
    if spec.layers.is_empty() {
        diag(&mut diags, INPUT_ID, Rule::Empty, "model has no layers".into());
    }

    // Ids and raw edges, so that cycles are reported before anything else.
    let mut slot_of: HashMap<&str, usize> = HashMap::from([(INPUT_ID, 0)]);
    for (i, l) in spec.layers.iter().enumerate() {
        if slot_of.insert(l.id.as_str(), i + 1).is_some() {
            diag(&mut diags, &l.id, Rule::DuplicateId, "node id declared twice (or reserved)".into());
        }
    }
    let edges: Vec<Vec<&str>> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.inputs.is_empty() {
                vec![if i == 0 { INPUT_ID } else { spec.layers[i - 1].id.as_str() }]
            } else {
                l.inputs.iter().map(String::as_str).collect()
            }
        })
        .collect();
    for (i, l) in spec.layers.iter().enumerate() {
        for &src in &edges[i] {
            if !slot_of.contains_key(src) {
                diag(&mut diags, &l.id, Rule::UnknownInput, format!("no node named `{src}`"));
            }
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    let in_cycle = cyclic_nodes(spec, &edges, &slot_of);
    for (i, l) in spec.layers.iter().enumerate() {
        if in_cycle.contains(&i) {
            diag(&mut diags, &l.id, Rule::Cycle, "node depends on itself".into());
        } else if edges[i].iter().any(|src| slot_of[src] > i) {
            diag(&mut diags, &l.id, Rule::Order, "input declared after its consumer".into());
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }

    let mut values: Vec<Option<ValueInfo>> = Vec::with_capacity(spec.layers.len() + 1);
    let input_group = match group_index.get(&spec.input.group) {
        Some(&g) => {
            if !spec.groups[g].fixed {
                diag(&mut diags, INPUT_ID, Rule::InputGroupNotFixed, format!("group `{}` must be fixed", spec.input.group));
            }
            let ok_rank = matches!(spec.input.shape.len(), 1 | 3) && spec.input.shape.iter().all(|&d| d > 0);
            if !ok_rank {
                diag(&mut diags, INPUT_ID, Rule::Rank, format!("input shape {:?} must be [F] or [C,H,W]", spec.input.shape));
            } else if spec.input.shape[0] != spec.groups[g].channels {
                diag(&mut diags, 
                    INPUT_ID,
                    Rule::ShapeMismatch,
                    format!("input has {} channels, group `{}` has {}", spec.input.shape[0], spec.input.group, spec.groups[g].channels),
                );
            }
            ok_rank.then(|| ValueInfo {
                group: g,
                multiplicity: 1,
                shape: spec.input.shape.clone(),
            })
        }
        None => {
            diag(&mut diags, INPUT_ID, Rule::UnknownGroup, format!("no group named `{}`", spec.input.group));
            None
        }
    };
    values.push(input_group);

    let mut nodes = Vec::new();
    let mut params = Vec::new();
    let mut layer_flops = Vec::new();

    for (i, l) in spec.layers.iter().enumerate() {
        let ins: Vec<usize> = edges[i].iter().map(|s| slot_of[s]).collect();
        let in_infos: Option<Vec<&ValueInfo>> = ins.iter().map(|&s| values[s].as_ref()).collect();
        let width_bearing = matches!(l.kind, LayerKind::Linear | LayerKind::Conv);
        if !width_bearing && l.group.is_some() {
            diag(&mut diags, &l.id, Rule::UnexpectedGroup, format!("{:?} layers do not own a group", l.kind));
        }
        let expected_arity = if l.kind == LayerKind::Add { 2 } else { 1 };
        if ins.len() != expected_arity {
            diag(&mut diags, &l.id, Rule::Arity, format!("expects {expected_arity} input(s), got {}", ins.len()));
            values.push(None);
            continue;
        }
        // Upstream errors were already reported.
        let Some(in_infos) = in_infos else {
            values.push(None);
            continue;
        };
        let src = in_infos[0];

        let out_group = if width_bearing {
            match &l.group {
                None => {
                    diag(&mut diags, &l.id, Rule::MissingGroup, "linear/conv layers must name an output group".into());
                    None
                }
                Some(g) => match group_index.get(g) {
                    Some(&gi) => Some(gi),
                    None => {
                        diag(&mut diags, &l.id, Rule::UnknownGroup, format!("no group named `{g}`"));
                        None
                    }
                },
            }
        } else {
            None
        };

        let produced = match l.kind {
            LayerKind::Linear => {
                let Some(go) = out_group else {
                    values.push(None);
                    continue;
                };
                if src.shape.len() != 1 {
                    diag(&mut diags, &l.id, Rule::Rank, format!("linear needs flat input, got per-sample shape {:?}", src.shape));
                    None
                } else {
                    let c_in = src.shape[0];
                    let producer_c = spec.groups[src.group].channels * src.multiplicity;
                    if let Some(decl) = l.in_features {
                        if decl != c_in {
                            diag(&mut diags, &l.id, Rule::ShapeMismatch, format!("declares {decl} input features, producer gives {c_in}"));
                        }
                    }
                    if producer_c != c_in {
                        diag(&mut diags, &l.id, Rule::ShapeMismatch, format!("input width {c_in} does not match producer group width {producer_c}"));
                    }
                    let c_out = spec.groups[go].channels;
                    let param = params.len();
                    params.push(ParamShape::Linear { c_out, c_in });
                    layer_flops.push((i, go, src.group, src.multiplicity));
                    nodes.push(Node {
                        id: l.id.clone(),
                        op: NodeOp::Linear { param },
                        inputs: ins.clone(),
                        out_group: go,
                    });
                    Some(ValueInfo {
                        group: go,
                        multiplicity: 1,
                        shape: vec![c_out],
                    })
                }
            }
            LayerKind::Conv => {
                let Some(go) = out_group else {
                    values.push(None);
                    continue;
                };
                let stride = l.stride.unwrap_or(1);
                let padding = l.padding.unwrap_or(0);
                match (&src.shape[..], l.kernel) {
                    (&[c_in, h, w], Some([kh, kw])) => {
                        if let Some(decl) = l.in_features {
                            if decl != c_in {
                                diag(&mut diags, &l.id, Rule::ShapeMismatch, format!("declares {decl} input channels, producer gives {c_in}"));
                            }
                        }
                        if src.multiplicity != 1 || spec.groups[src.group].channels != c_in {
                            diag(&mut diags, &l.id, Rule::ShapeMismatch, "conv input channels do not match producer group".into());
                        }
                        if kh == 0 || kw == 0 || !matches!(stride, 1 | 2) || h + 2 * padding < kh || w + 2 * padding < kw {
                            diag(&mut diags, 
                                &l.id,
                                Rule::Geometry,
                                format!("kernel {kh}x{kw}, stride {stride}, padding {padding} invalid for {h}x{w}"),
                            );
                            None
                        } else {
                            let ho = (h + 2 * padding - kh) / stride + 1;
                            let wo = (w + 2 * padding - kw) / stride + 1;
                            let c_out = spec.groups[go].channels;
                            let param = params.len();
                            params.push(ParamShape::Conv {
                                c_out,
                                c_in,
                                kernel: [kh, kw],
                                stride,
                                padding,
                            });
                            let per_pair = kh * kw * ho * wo;
                            layer_flops.push((i, go, src.group, per_pair));
                            nodes.push(Node {
                                id: l.id.clone(),
                                op: NodeOp::Conv {
                                    param,
                                    flops_per_pair: per_pair,
                                },
                                inputs: ins.clone(),
                                out_group: go,
                            });
                            Some(ValueInfo {
                                group: go,
                                multiplicity: 1,
                                shape: vec![c_out, ho, wo],
                            })
                        }
                    }
                    (_, None) => {
                        diag(&mut diags, &l.id, Rule::Geometry, "conv layer needs a kernel".into());
                        None
                    }
                    (s, _) => {
                        diag(&mut diags, &l.id, Rule::Rank, format!("conv needs [C,H,W] input, got {s:?}"));
                        None
                    }
                }
            }
            LayerKind::Relu => {
                nodes.push(Node {
                    id: l.id.clone(),
                    op: NodeOp::Relu,
                    inputs: ins.clone(),
                    out_group: src.group,
                });
                Some(src.clone())
            }
            LayerKind::Add => {
                let other = in_infos[1];
                if other.group != src.group {
                    diag(&mut diags, 
                        &l.id,
                        Rule::GroupMismatch,
                        format!(
                            "add inputs carry groups `{}` and `{}`",
                            spec.groups[src.group].id, spec.groups[other.group].id
                        ),
                    );
                    None
                } else if other.shape != src.shape || other.multiplicity != src.multiplicity {
                    diag(&mut diags, &l.id, Rule::ShapeMismatch, format!("add inputs {:?} and {:?}", src.shape, other.shape));
                    None
                } else {
                    nodes.push(Node {
                        id: l.id.clone(),
                        op: NodeOp::Add,
                        inputs: ins.clone(),
                        out_group: src.group,
                    });
                    Some(src.clone())
                }
            }
            LayerKind::Flatten => {
                if src.shape.len() != 3 {
                    diag(&mut diags, &l.id, Rule::Rank, format!("flatten needs [C,H,W] input, got {:?}", src.shape));
                    None
                } else {
                    nodes.push(Node {
                        id: l.id.clone(),
                        op: NodeOp::Flatten,
                        inputs: ins.clone(),
                        out_group: src.group,
                    });
                    let spatial = src.shape[1] * src.shape[2];
                    Some(ValueInfo {
                        group: src.group,
                        multiplicity: spatial,
                        shape: vec![src.shape[0] * spatial],
                    })
                }
            }
        };
        values.push(produced);
    }

    if let Some(Some(out)) = values.last().filter(|_| !spec.layers.is_empty()) {
        let last = &spec.layers[spec.layers.len() - 1].id;
        let g = &spec.groups[out.group];
        if !g.fixed {
            diag(&mut diags, last, Rule::OutputGroupNotFixed, format!("output group `{}` must be fixed", g.id));
        }
        if out.shape != [spec.num_classes] {
            diag(&mut diags, 
                last,
                Rule::OutputWidth,
                format!("output shape {:?} does not match {} classes", out.shape, spec.num_classes),
            );
        }
    }

    if !diags.is_empty() {
        return Err(diags);
    }
    Ok(Plan {
        nodes,
        values: values.into_iter().map(|v| v.expect("validated")).collect(),
        layer_flops,
        params,
        group_index,
    })
}

fn diag(diags: &mut Vec<Diagnostic>, node: &str, rule: Rule, message: String) {
    diags.push(Diagnostic {
        node: node.to_string(),
        rule,
        message,
    })
}

fn cyclic_nodes(spec: &ModelSpec, edges: &[Vec<&str>], slot_of: &HashMap<&str, usize>) -> HashSet<usize> {
    // Kahn's algorithm over layer indices; whatever cannot be scheduled lies
    // on or behind a cycle.
    let n = spec.layers.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, srcs) in edges.iter().enumerate() {
        for s in srcs {
            let slot = slot_of[s];
            if slot > 0 {
                indegree[i] += 1;
                consumers[slot - 1].push(i);
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut done = HashSet::new();
    while let Some(i) = ready.pop() {
        done.insert(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    (0..n).filter(|i| !done.contains(i)).collect()
}

/// Parameters of one width-bearing layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Linear(LinearLayer),
    Conv(ConvLayer),
}

impl LayerParams {
    pub fn weight(&self) -> &Tensor {
        match self {
            LayerParams::Linear(l) => &l.weight,
            LayerParams::Conv(c) => &c.weight,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            LayerParams::Linear(l) => &l.bias,
            LayerParams::Conv(c) => &c.bias,
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        match self {
            LayerParams::Linear(l) => [&mut l.weight, &mut l.bias],
            LayerParams::Conv(c) => [&mut c.weight, &mut c.bias],
        }
    }
}

/// Which network to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Full,
    Soft,
    Hard,
}

/// Tape variables for every parameter of a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    /// Weight and bias per layer, in [`ModelGraph::theta_names`] order.
    pub theta: Vec<Var>,
    /// Logits per prunable group, in [`ModelGraph::prunable_groups`] order.
    pub logits: Vec<Var>,
}

/// A validated model with parameters and mask state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    spec: ModelSpec,
    plan: Plan,
    params: Vec<LayerParams>,
    groups: Vec<GroupMask>,
}

impl ModelGraph {
    /// Validates `spec` and initializes parameters from `seed`. Mask logits
    /// start at zero.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let plan = compile(&spec).map_err(Error::InvalidModel)?;
        let mut rng = stream_rng(seed, Stream::ParamInit, 0);
        let params = plan
            .params
            .iter()
            .map(|p| init_params(p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let groups = spec
            .groups
            .iter()
            .map(|g| GroupMask::new(g.id.clone(), g.channels, g.fixed))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelGraph {
            spec,
            plan,
            params,
            groups,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input.shape
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn groups(&self) -> &[GroupMask] {
        &self.groups
    }

    pub fn group(&self, id: &str) -> Option<&GroupMask> {
        self.plan.group_index.get(id).map(|&i| &self.groups[i])
    }

    pub fn group_mut(&mut self, id: &str) -> Option<&mut GroupMask> {
        self.plan.group_index.get(id).map(|&i| &mut self.groups[i])
    }

    /// Indices (into [`ModelGraph::groups`]) of the non-fixed groups.
    pub fn prunable_groups(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&i| !self.groups[i].is_fixed()).collect()
    }

    pub fn refresh_masks(&mut self) {
        for g in &mut self.groups {
            g.refresh();
        }
    }

    /// `"<layer>.weight"`, `"<layer>.bias"` for every width-bearing layer.
    pub fn theta_names(&self) -> Vec<String> {
        self.plan
            .nodes
            .iter()
            .filter(|n| matches!(n.op, NodeOp::Linear { .. } | NodeOp::Conv { .. }))
            .flat_map(|n| [format!("{}.weight", n.id), format!("{}.bias", n.id)])
            .collect()
    }

    pub fn theta(&self) -> Vec<&Tensor> {
        self.params.iter().flat_map(|p| [p.weight(), p.bias()]).collect()
    }

    pub fn theta_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }

    /// Logits of the prunable groups, in order.
    pub fn logits(&self) -> Vec<&[f64]> {
        self.prunable_groups().into_iter().map(|i| self.groups[i].logits()).collect()
    }

    /// Mutable logits of prunable groups. Call [`ModelGraph::refresh_masks`]
    /// after editing.
    pub fn logits_mut(&mut self) -> Vec<&mut [f64]> {
        self.groups
            .iter_mut()
            .filter(|g| !g.is_fixed())
            .map(|g| g.logits_mut())
            .collect()
    }

    /// Overwrites all parameters. Shapes must match the current ones.
    pub fn load_theta(&mut self, theta: Vec<Tensor>) -> Result<()> {
        let slots = self.theta_mut();
        if slots.len() != theta.len() {
            return Err(Error::shape("load_theta", format!("{} tensors for {} slots", theta.len(), slots.len())));
        }
        for (slot, t) in slots.into_iter().zip(theta) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("load_theta", format!("{:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn load_logits(&mut self, logits: Vec<Vec<f64>>) -> Result<()> {
        let prunable = self.prunable_groups();
        if prunable.len() != logits.len() {
            return Err(Error::shape("load_logits", format!("{} vectors for {} groups", logits.len(), prunable.len())));
        }
        for (gi, u) in prunable.into_iter().zip(logits) {
            self.groups[gi].set_logits(u)?;
        }
        Ok(())
    }

    /// Registers every parameter and logit vector as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            theta: self.theta().into_iter().map(|t| tape.leaf(t.clone())).collect(),
            logits: self.logits().into_iter().map(|u| tape.leaf(Tensor::vector(u.to_vec()))).collect(),
        }
    }

    /// Registers everything as constants (evaluation only).
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound {
            theta: self.theta().into_iter().map(|t| tape.constant(t.clone())).collect(),
            logits: self.logits().into_iter().map(|u| tape.constant(Tensor::vector(u.to_vec()))).collect(),
        }
    }

    fn logit_slot(&self, group: usize) -> Option<usize> {
        if self.groups[group].is_fixed() {
            return None;
        }
        Some(self.groups[..group].iter().filter(|g| !g.is_fixed()).count())
    }

    /// Evaluates the network on a batch `x` of shape `[B, ...input shape]`.
    ///
    /// In `Soft` mode every non-fixed group scales its producers' outputs by
    /// `w` (computed on the tape from the bound logits, or the pinned prefix
    /// when forced). In `Hard` mode every weight is sliced to the cached
    /// binary masks, which are constant with respect to the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: ForwardMode) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != self.spec.input.shape.len() + 1 || xs[1..] != self.spec.input.shape[..] {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match per-sample shape {:?}", xs, self.spec.input.shape),
            ));
        }
        let mut soft_w: Vec<Option<Var>> = vec![None; self.groups.len()];
        if mode == ForwardMode::Soft {
            for (gi, g) in self.groups.iter().enumerate() {
                if g.is_fixed() {
                    continue;
                }
                soft_w[gi] = Some(if g.is_forced() {
                    tape.constant(Tensor::vector(g.w().to_vec()))
                } else {
                    let slot = self.logit_slot(gi).expect("prunable group");
                    relax_mask(tape, bound.logits[slot])?
                });
            }
        }

        let mut slots: Vec<Var> = Vec::with_capacity(self.plan.nodes.len() + 1);
        slots.push(x);
        for node in &self.plan.nodes {
            let src = slots[node.inputs[0]];
            let out = match node.op {
                NodeOp::Linear { param } | NodeOp::Conv { param, .. } => {
                    let mut weight = bound.theta[2 * param];
                    let mut bias = bound.theta[2 * param + 1];
                    let in_value = &self.plan.values[node.inputs[0]];
                    if mode == ForwardMode::Hard {
                        let out_c = self.groups[node.out_group].channels();
                        let out_k = self.groups[node.out_group].kept();
                        let in_c = self.groups[in_value.group].channels() * in_value.multiplicity;
                        let in_k = self.groups[in_value.group].kept() * in_value.multiplicity;
                        if out_k < out_c {
                            weight = tape.narrow(weight, 0, 0, out_k)?;
                            bias = tape.narrow(bias, 0, 0, out_k)?;
                        }
                        // Flattened features are channel-major, so the first
                        // `kept * multiplicity` columns belong to kept channels.
                        if in_k < in_c {
                            weight = tape.narrow(weight, 1, 0, in_k)?;
                        }
                    }
                    let scale = soft_w[node.out_group];
                    match (&node.op, &self.params[param]) {
                        (NodeOp::Linear { .. }, _) => linear_forward(tape, weight, bias, src, scale)?,
                        (NodeOp::Conv { .. }, LayerParams::Conv(c)) => {
                            conv2d_forward(tape, weight, bias, c.stride, c.padding, src, scale)?
                        }
                        _ => unreachable!("conv node bound to linear params"),
                    }
                }
                NodeOp::Relu => tape.relu(src)?,
                NodeOp::Add => tape.add(src, slots[node.inputs[1]])?,
                NodeOp::Flatten => {
                    let s = tape.shape(src);
                    let flat = s[1..].iter().product();
                    let b = s[0];
                    tape.reshape(src, vec![b, flat])?
                }
            };
            slots.push(out);
        }
        Ok(*slots.last().expect("non-empty graph"))
    }

    /// Constant-tape evaluation of the logits.
    pub fn logits_for(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    fn flops_with(&self, count: impl Fn(usize) -> f64) -> f64 {
        let mut total = 0.0;
        for &(_, go, gi, per_pair) in &self.plan.layer_flops {
            total += count(go) * count(gi) * per_pair as f64;
        }
        total
    }

    /// Multiply-accumulate count per sample, bias excluded.
    pub fn compute_flops(&self, mode: ForwardMode) -> f64 {
        match mode {
            ForwardMode::Full => self.flops_with(|g| self.groups[g].channels() as f64),
            ForwardMode::Hard => self.flops_with(|g| self.groups[g].kept() as f64),
            ForwardMode::Soft => self.flops_with(|g| self.groups[g].soft_count_value()),
        }
    }

    /// `compute_flops(mode) / compute_flops(Full)`.
    pub fn flops_ratio(&self, mode: ForwardMode) -> f64 {
        self.compute_flops(mode) / self.compute_flops(ForwardMode::Full)
    }

    /// Ratio when every prunable group keeps `kept[g]` channels.
    pub fn ratio_for_counts(&self, kept: &[usize]) -> f64 {
        self.flops_with(|g| kept[g] as f64) / self.compute_flops(ForwardMode::Full)
    }

    /// Smallest reachable hard ratio (one channel per prunable group).
    pub fn min_flops_ratio(&self) -> f64 {
        let kept: Vec<usize> = self
            .groups
            .iter()
            .map(|g| if g.is_fixed() { g.channels() } else { 1 })
            .collect();
        self.ratio_for_counts(&kept)
    }

    /// Differentiable `FP_soft / FP_all` on the tape.
    pub fn soft_flops_ratio(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let mut counts: Vec<Var> = Vec::with_capacity(self.groups.len());
        for (gi, g) in self.groups.iter().enumerate() {
            let c = match self.logit_slot(gi) {
                Some(slot) if !g.is_forced() => soft_channel_count(tape, bound.logits[slot])?,
                _ => tape.constant(Tensor::scalar(g.soft_count_value())),
            };
            counts.push(c);
        }
        let mut total: Option<Var> = None;
        for &(_, go, gi, per_pair) in &self.plan.layer_flops {
            let pair = tape.mul(counts[go], counts[gi])?;
            let layer = tape.scale(pair, per_pair as f64)?;
            total = Some(match total {
                Some(t) => tape.add(t, layer)?,
                None => layer,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("model has no width-bearing layers".into()))?;
        tape.scale(total, 1.0 / self.compute_flops(ForwardMode::Full))
    }

    /// Physically slices every layer to the retained channels.
    pub fn export_compact(&self) -> Result<CompactModel> {
        let mut spec = self.spec.clone();
        for (gs, g) in spec.groups.iter_mut().zip(&self.groups) {
            gs.channels = g.kept();
            gs.fixed = true;
        }
        if let [_, ..] = spec.input.shape[..] {
            spec.input.shape[0] = self.groups[self.plan.values[0].group].kept();
        }
        for l in &mut spec.layers {
            l.in_features = None;
        }
        let plan = compile(&spec).map_err(Error::InvalidModel)?;

        let mut params = Vec::with_capacity(self.params.len());
        for node in &self.plan.nodes {
            let param = match node.op {
                NodeOp::Linear { param } | NodeOp::Conv { param, .. } => param,
                _ => continue,
            };
            let in_value = &self.plan.values[node.inputs[0]];
            let out_k = self.groups[node.out_group].kept();
            let in_k = self.groups[in_value.group].kept();
            let sliced = match &self.params[param] {
                LayerParams::Linear(l) => LayerParams::Linear(LinearLayer::new(
                    l.weight.narrow(0, 0, out_k)?.narrow(1, 0, in_k * in_value.multiplicity)?,
                    l.bias.narrow(0, 0, out_k)?,
                )?),
                LayerParams::Conv(c) => LayerParams::Conv(ConvLayer::new(
                    c.weight.narrow(0, 0, out_k)?.narrow(1, 0, in_k)?,
                    c.bias.narrow(0, 0, out_k)?,
                    c.stride,
                    c.padding,
                )?),
            };
            params.push(sliced);
        }
        let groups = spec
            .groups
            .iter()
            .map(|g| GroupMask::new(g.id.clone(), g.channels, true))
            .collect::<Result<Vec<_>>>()?;
        let provenance = Provenance {
            source_hash: self.spec.hash(),
            kept: self.groups.iter().map(|g| (g.id.clone(), g.kept())).collect(),
        };
        Ok(CompactModel {
            graph: ModelGraph {
                spec,
                plan,
                params,
                groups,
            },
            provenance,
        })
    }

    /// Builds a graph from explicit parameters (e.g. loaded from disk).
    pub fn from_parts(spec: ModelSpec, theta: Vec<Tensor>, logits: Vec<Vec<f64>>) -> Result<Self> {
        let mut g = ModelGraph::new(spec, 0)?;
        g.load_theta(theta)?;
        g.load_logits(logits)?;
        Ok(g)
    }

    /// Rejection-samples prefix lengths (at least one per prunable group)
    /// until the hard FLOPs ratio lies within `tol` of `target`.
    pub fn random_prefix_masks(
        &self,
        target: f64,
        tol: f64,
        seed: u64,
        max_attempts: usize,
    ) -> Result<BTreeMap<String, usize>> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(Error::config("target", format!("target ratio {target} outside (0, 1]")));
        }
        let mut rng = stream_rng(seed, Stream::RandomMasks, 0);
        let prunable = self.prunable_groups();
        let mut kept: Vec<usize> = self.groups.iter().map(|g| g.channels()).collect();
        let mut closest = f64::NAN;
        for _ in 0..max_attempts {
            for &gi in &prunable {
                kept[gi] = rng.random_range(1..=self.groups[gi].channels());
            }
            let r = self.ratio_for_counts(&kept);
            if (r - target).abs() <= tol {
                return Ok(prunable.iter().map(|&gi| (self.groups[gi].id.clone(), kept[gi])).collect());
            }
            if closest.is_nan() || (r - target).abs() < (closest - target).abs() {
                closest = r;
            }
        }
        Err(Error::Infeasible(format!(
            "no prefix assignment within {tol} of {target} after {max_attempts} attempts (closest ratio {closest})"
        )))
    }

    /// Pins each listed group to a binary prefix of the given length.
    pub fn apply_prefix_assignment(&mut self, kept: &BTreeMap<String, usize>) -> Result<()> {
        for (id, &k) in kept {
            let g = self
                .group_mut(id)
                .ok_or_else(|| Error::Contract(format!("no group named `{id}`")))?;
            if g.is_fixed() {
                return Err(Error::Contract(format!("group `{id}` is fixed")));
            }
            g.force_binary_prefix(k)?;
        }
        Ok(())
    }
}

fn init_params<R: Rng + ?Sized>(shape: &ParamShape, rng: &mut R) -> Result<LayerParams> {
    Ok(match *shape {
        ParamShape::Linear { c_out, c_in } => LayerParams::Linear(LinearLayer::init(c_in, c_out, rng)),
        ParamShape::Conv {
            c_out,
            c_in,
            kernel,
            stride,
            padding,
        } => LayerParams::Conv(ConvLayer::init(c_in, c_out, kernel, stride, padding, rng)?),
    })
}

/// Where a compact model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_hash: String,
    /// Retained channels per group of the source.
    pub kept: BTreeMap<String, usize>,
}

/// A hard network with pruned channels physically removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub graph: ModelGraph,
    pub provenance: Provenance,
}

impl CompactModel {
    pub fn logits_for(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.logits_for(x, ForwardMode::Full)
    }

    pub fn flops(&self) -> f64 {
        self.graph.compute_flops(ForwardMode::Full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn mlp442() -> ModelGraph {
        ModelGraph::new(ModelSpec::mlp(4, &[4], 2), 1).unwrap()
    }

    fn rules(spec: &ModelSpec) -> Vec<Rule> {
        validate_model(spec).unwrap_err().into_iter().map(|d| d.rule).collect()
    }

    fn residual_spec() -> ModelSpec {
        // fc1 -> relu -> fc2 (same group) -> add(fc1, fc2) -> head
        ModelSpec {
            input: InputSpec {
                shape: vec![3],
                group: "in".into(),
            },
            num_classes: 2,
            groups: vec![
                GroupSpec { id: "in".into(), channels: 3, fixed: true },
                GroupSpec { id: "res".into(), channels: 5, fixed: false },
                GroupSpec { id: "out".into(), channels: 2, fixed: true },
            ],
            layers: vec![
                LayerSpec::linear("fc1", "res"),
                LayerSpec::unary("r1", LayerKind::Relu),
                LayerSpec::linear("fc2", "res"),
                LayerSpec::unary("sum", LayerKind::Add).with_inputs(&["fc1", "fc2"]),
                LayerSpec::unary("r2", LayerKind::Relu),
                LayerSpec::linear("head", "out"),
            ],
        }
    }

    #[test]
    fn mlp_validates() {
        assert!(validate_model(&ModelSpec::mlp(4, &[4], 2)).is_ok());
        assert!(validate_model(&ModelSpec::mlp(2, &[32, 32], 3)).is_ok());
        assert!(validate_model(&residual_spec()).is_ok());
    }

    #[test]
    fn residual_add_with_mismatched_groups() {
        let mut spec = residual_spec();
        spec.groups.push(GroupSpec { id: "other".into(), channels: 5, fixed: false });
        spec.layers[2].group = Some("other".into());
        assert_eq!(rules(&spec), vec![Rule::GroupMismatch]);
        let d = &validate_model(&spec).unwrap_err()[0];
        assert_eq!(d.node, "sum");
    }

    #[test]
    fn consumer_width_mismatch() {
        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.layers[2].in_features = Some(3);
        assert_eq!(rules(&spec), vec![Rule::ShapeMismatch]);
    }

    #[test]
    fn structural_rule_violations() {
        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.groups[0].fixed = false;
        spec.groups[2].fixed = false;
        assert_eq!(rules(&spec), vec![Rule::InputGroupNotFixed, Rule::OutputGroupNotFixed]);

        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.layers[0].inputs = vec!["relu1".into()];
        assert!(rules(&spec).contains(&Rule::Cycle));

        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.layers[1].inputs = vec!["nope".into()];
        assert_eq!(rules(&spec), vec![Rule::UnknownInput]);

        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.layers[0].group = Some("missing".into());
        assert_eq!(rules(&spec), vec![Rule::UnknownGroup]);

        let mut spec = ModelSpec::mlp(4, &[4], 2);
        spec.num_classes = 3;
        assert_eq!(rules(&spec), vec![Rule::OutputWidth]);
    }

    #[test]
    fn flops_of_small_mlp() {
        let mut g = mlp442();
        assert_eq!(g.compute_flops(ForwardMode::Full), 24.0);
        // Zero logits: soft count 2.5, hard keeps 2.
        assert_eq!(g.compute_flops(ForwardMode::Soft), 15.0);
        assert_eq!(g.flops_ratio(ForwardMode::Soft), 0.625);
        assert_eq!(g.compute_flops(ForwardMode::Hard), 12.0);
        assert_eq!(g.flops_ratio(ForwardMode::Hard), 0.5);
        assert_eq!(g.flops_ratio(ForwardMode::Full), 1.0);

        g.group_mut("h1").unwrap().force_binary_prefix(4).unwrap();
        assert_eq!(g.flops_ratio(ForwardMode::Hard), 1.0);
    }

    #[test]
    fn soft_flops_gradient_matches_fd() {
        let g = mlp442();
        let f = |t: &mut Tape, u: Var| {
            let mut b = g.bind_constants(t);
            b.logits = vec![u];
            g.soft_flops_ratio(t, &b)
        };
        let u = Tensor::vector(vec![0.4, -0.3, 1.1, 0.0]);
        let r = grad_check(f, &u, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6);

        let mut t = Tape::new();
        let b = g.bind(&mut t);
        let v = g.soft_flops_ratio(&mut t, &b).unwrap();
        assert_eq!(t.value(v).item(), 0.625);
    }

    #[test]
    fn full_masks_export_identical_parameters() {
        let mut g = mlp442();
        g.group_mut("h1").unwrap().force_binary_prefix(4).unwrap();
        let c = g.export_compact().unwrap();
        assert_eq!(c.graph.params(), g.params());
        assert_eq!(c.provenance.kept["h1"], 4);
        assert_eq!(c.provenance.source_hash, g.spec().hash());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let g = mlp442();
        assert!(matches!(
            g.logits_for(&Tensor::zeros(&[2, 3]), ForwardMode::Full),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn random_prefix_masks_contract() {
        let g = mlp442();
        let full = g.random_prefix_masks(1.0, 0.0, 3, 100_000).unwrap();
        assert_eq!(full["h1"], 4);

        // Exhaustive enumeration over prefix lengths 1..=4 of the hidden
        // group gives ratios (4k + 2k) / 24 = k / 4, so 0.5 is met only by k=2.
        let hits: Vec<usize> = (1..=4).filter(|&k| (6 * k) as f64 / 24.0 == 0.5).collect();
        assert_eq!(hits, vec![2]);
        let a = g.random_prefix_masks(0.5, 0.0, 9, 100_000).unwrap();
        assert_eq!(a["h1"], 2);

        let big = ModelGraph::new(ModelSpec::mlp(2, &[32, 32], 3), 0).unwrap();
        let x = big.random_prefix_masks(0.15, 0.01, 42, 100_000).unwrap();
        let y = big.random_prefix_masks(0.15, 0.01, 42, 100_000).unwrap();
        assert_eq!(x, y);

        assert!(matches!(g.random_prefix_masks(0.3, 0.0, 1, 1000), Err(Error::Infeasible(_))));
    }
}
