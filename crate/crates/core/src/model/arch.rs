//! Declarative layer graphs and the RFBSNet desk topology.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ops::{check_conv_config, conv_out_extent};
use crate::tensor::Shape;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Kernel 2, stride 2, no padding.
    TransposedConv {
        in_channels: usize,
        out_channels: usize,
    },
    MaxPool2x2,
    Relu,
    Concat,
    /// Elementwise sum of two or more operands.
    Add,
    /// Top-left spatial crop of input 0 to the extent of input 1.
    Crop,
    UpsampleNearest2x,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::TransposedConv { .. } => "tconv",
            LayerKind::MaxPool2x2 => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::Crop => "crop",
            LayerKind::UpsampleNearest2x => "upsample_nearest",
            LayerKind::Softmax => "softmax",
        }
    }

    /// `(weight shape, bias shape)` for learnable layers.
    pub fn param_shapes(&self) -> Option<([usize; 4], [usize; 1])> {
        match *self {
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                Some(([out_channels, in_channels, kernel, kernel], [out_channels]))
            }
            LayerKind::TransposedConv { in_channels, out_channels } => {
                Some(([in_channels, out_channels, 2, 2], [out_channels]))
            }
            _ => None,
        }
    }

    /// Number of inputs, or `None` for variadic kinds.
    fn arity(&self) -> Option<usize> {
        match self {
            LayerKind::Input { .. } => Some(0),
            LayerKind::Concat | LayerKind::Crop => Some(2),
            LayerKind::Add => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

impl Node {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Acyclic layer graph in topological order with a single input node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    id: String,
    nodes: Vec<Node>,
    input: NodeId,
    output: NodeId,
    downsampling_factor: usize,
}

impl ArchitectureSpec {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_channels(&self) -> usize {
        match self.nodes[self.input].kind {
            LayerKind::Input { channels } => channels,
            _ => unreachable!("input node has Input kind"),
        }
    }

    /// Ratio of input resolution to the coarsest feature-map resolution.
    pub fn downsampling_factor(&self) -> usize {
        self.downsampling_factor
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Learnable tensors `(name, dims)` in node order, weight before bias.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some((w, b)) = node.kind.param_shapes() {
                out.push((node.weight_name(), w.to_vec()));
                out.push((node.bias_name(), b.to_vec()));
            }
        }
        out
    }

    /// Canonical text form; the config hash is taken over it.
    pub fn describe(&self) -> String {
        let mut s = format!("arch {} m={}\n", self.id, self.downsampling_factor);
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {:?} <- {:?}", n.name, n.kind, n.inputs);
        }
        let _ = writeln!(s, "output {}", self.output);
        s
    }

    /// FNV-1a (32-bit) of [`describe`](Self::describe).
    pub fn config_hash(&self) -> u32 {
        self.describe().bytes().fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
    }

    /// Index of the last node consuming each node's output.
    pub(crate) fn last_use(&self) -> Vec<Option<NodeId>> {
        let mut last = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last[j] = Some(i);
            }
        }
        last
    }
}

/// Incrementally assembles an [`ArchitectureSpec`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: LayerKind, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node { name: name.to_string(), kind, inputs: inputs.to_vec() });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        self.add("input", LayerKind::Input { channels }, &[])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.add(name, LayerKind::Conv { in_channels: cin, out_channels: cout, kernel, stride, padding }, &[x])
    }

    pub fn tconv(&mut self, name: &str, x: NodeId, cin: usize, cout: usize) -> NodeId {
        self.add(name, LayerKind::TransposedConv { in_channels: cin, out_channels: cout }, &[x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.add(name, LayerKind::Relu, &[x])
    }

    pub fn finish(self, id: &str, output: NodeId, downsampling_factor: usize) -> Result<ArchitectureSpec> {
        let mut names = HashSet::new();
        let mut input = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if !names.insert(n.name.as_str()) {
                return Err(Error::node(&n.name, "duplicate node name"));
            }
            if let Some(a) = n.kind.arity() {
                if n.inputs.len() != a {
                    return Err(Error::node(&n.name, format!("expects {a} inputs, has {}", n.inputs.len())));
                }
            } else if n.inputs.len() < 2 {
                return Err(Error::node(&n.name, "add needs at least two inputs"));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::node(&n.name, format!("input {bad} does not precede node {i}")));
            }
            if let LayerKind::Input { channels } = n.kind {
                if input.replace(i).is_some() {
                    return Err(Error::node(&n.name, "second input node"));
                }
                if channels == 0 {
                    return Err(Error::node(&n.name, "input needs at least one channel"));
                }
            }
            if let LayerKind::Conv { kernel, stride, padding, .. } = n.kind {
                check_conv_config((kernel, kernel), (stride, stride), (padding, padding))
                    .map_err(|e| Error::node(&n.name, e.to_string()))?;
            }
        }
        let input = input.ok_or_else(|| Error::InvalidArgument("graph has no input node".into()))?;
        if output >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("output node {output} does not exist")));
        }
        if downsampling_factor == 0 {
            return Err(Error::InvalidArgument("downsampling factor must be positive".into()));
        }
        Ok(ArchitectureSpec { id: id.to_string(), nodes: self.nodes, input, output, downsampling_factor })
    }
}

/// Output shape of every node for an `(N, C, H, W)` input. Errors name the
/// first inconsistent node.
pub fn infer_shapes(spec: &ArchitectureSpec, input_dims: &[usize]) -> Result<Vec<Shape>> {
    let input_shape = Shape::new(input_dims)?;
    let (_, c, _, _) = input_shape.nchw()?;
    let mut shapes: Vec<Shape> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let fail = |msg: String| Error::node(&node.name, msg);
        let ins: Vec<&Shape> = node.inputs.iter().map(|&j| &shapes[j]).collect();
        let nchw = |s: &Shape| s.nchw().map_err(|e| fail(e.to_string()));
        let shape = match node.kind {
            LayerKind::Input { channels } => {
                if channels != c {
                    return Err(fail(format!("expects {channels} channels, input has {c}")));
                }
                input_shape.clone()
            }
            LayerKind::Conv { in_channels, out_channels, kernel, stride, padding } => {
                let (n, ci, h, w) = nchw(ins[0])?;
                if ci != in_channels {
                    return Err(fail(format!("expects {in_channels} input channels, got {ci}")));
                }
                let ho = conv_out_extent(h, kernel, stride, padding);
                let wo = conv_out_extent(w, kernel, stride, padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Shape::new(&[n, out_channels, ho, wo])?,
                    _ => return Err(fail(format!("non-positive output extent for input {}", ins[0]))),
                }
            }
            LayerKind::TransposedConv { in_channels, out_channels } => {
                let (n, ci, h, w) = nchw(ins[0])?;
                if ci != in_channels {
                    return Err(fail(format!("expects {in_channels} input channels, got {ci}")));
                }
                Shape::new(&[n, out_channels, 2 * h, 2 * w])?
            }
            LayerKind::MaxPool2x2 => {
                let (n, ci, h, w) = nchw(ins[0])?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(fail(format!("max-pool needs even extents, got {}", ins[0])));
                }
                Shape::new(&[n, ci, h / 2, w / 2])?
            }
            LayerKind::Relu | LayerKind::Softmax => ins[0].clone(),
            LayerKind::UpsampleNearest2x => {
                let (n, ci, h, w) = nchw(ins[0])?;
                Shape::new(&[n, ci, 2 * h, 2 * w])?
            }
            LayerKind::Concat => {
                let (na, ca, ha, wa) = nchw(ins[0])?;
                let (nb, cb, hb, wb) = nchw(ins[1])?;
                if (na, ha, wa) != (nb, hb, wb) {
                    return Err(fail(format!("cannot concat {} with {}", ins[0], ins[1])));
                }
                Shape::new(&[na, ca + cb, ha, wa])?
            }
            LayerKind::Add => {
                if let Some(bad) = ins.iter().find(|s| **s != ins[0]) {
                    return Err(fail(format!("operand shapes differ: {} vs {}", ins[0], bad)));
                }
                ins[0].clone()
            }
            LayerKind::Crop => {
                let (n, ci, h, w) = nchw(ins[0])?;
                let (_, _, ht, wt) = nchw(ins[1])?;
                if ht > h || wt > w {
                    return Err(fail(format!("cannot crop {} to {}x{}", ins[0], ht, wt)));
                }
                Shape::new(&[n, ci, ht, wt])?
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Options for [`build_rfbsnet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfbsConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Use a learnable 2×2 transposed conv instead of nearest-neighbour
    /// upsampling in the classifier head.
    pub learnable_head_upsample: bool,
}

impl Default for RfbsConfig {
    fn default() -> Self {
        RfbsConfig { in_channels: 1, num_classes: 2, learnable_head_upsample: false }
    }
}

pub const DESK_ARCH_ID: &str = "rfbsnet-desk";
pub const DESK_TCONV_HEAD_ARCH_ID: &str = "rfbsnet-desk-tconv-head";

/// Width of the downsampler output and of every tensor in the final fusion.
pub const FUSED_CHANNELS: usize = 16;

/// Architecture ids accepted by [`build_by_id`].
pub fn known_arch_ids() -> &'static [&'static str] {
    &[DESK_ARCH_ID, DESK_TCONV_HEAD_ARCH_ID]
}

pub fn build_by_id(id: &str) -> Result<ArchitectureSpec> {
    match id {
        DESK_ARCH_ID => build_rfbsnet(RfbsConfig::default()),
        DESK_TCONV_HEAD_ARCH_ID => build_rfbsnet(RfbsConfig { learnable_head_upsample: true, ..RfbsConfig::default() }),
        other => Err(Error::InvalidArgument(format!(
            "unknown architecture {other:?} (known: {})",
            known_arch_ids().join(", ")
        ))),
    }
}

pub fn build_rfbsnet_desk(in_channels: usize, num_classes: usize) -> Result<ArchitectureSpec> {
    build_rfbsnet(RfbsConfig { in_channels, num_classes, learnable_head_upsample: false })
}

/// RFBSNet desk topology:
///
/// ```text
/// input ─┬─ conv3 s2 (16−Cin) ─┐
///        └─ maxpool 2×2 (Cin) ─┴─ concat ─ relu ══ D (16 @ H/2)
/// D ─ conv3 ─ relu ══ S (16 @ H/2)                          shallow branch
/// D ─ [conv3 s2, relu, conv3, relu] × 3 ══ E1 32@H/4, E2 64@H/8, E3 128@H/16
/// E3 ─ tconv ─ +E2 ─ conv3 ─ relu ─ tconv ─ +E1 ─ conv3 ─ relu ─ tconv ══ U (16 @ H/2)
/// U + S + D ─ upsample ×2 ─ conv1 (classes) ─ softmax
/// ```
///
/// Each transposed conv output is cropped to its skip partner so that any
/// even input extent reproduces the input resolution at the output.
pub fn build_rfbsnet(cfg: RfbsConfig) -> Result<ArchitectureSpec> {
    if cfg.in_channels == 0 || cfg.in_channels >= FUSED_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "in_channels must be in 1..{FUSED_CHANNELS}, got {}",
            cfg.in_channels
        )));
    }
    if cfg.num_classes < 2 {
        return Err(Error::InvalidArgument(format!("num_classes must be >= 2, got {}", cfg.num_classes)));
    }
    let f = FUSED_CHANNELS;
    let mut g = GraphBuilder::new();
    let x = g.input(cfg.in_channels);

    let conv_path = g.conv("down.conv", x, cfg.in_channels, f - cfg.in_channels, 3, 2, 1);
    let pool_path = g.add("down.pool", LayerKind::MaxPool2x2, &[x]);
    let cat = g.add("down.concat", LayerKind::Concat, &[conv_path, pool_path]);
    let down = g.relu("down.relu", cat);

    let s = g.conv("shallow.conv", down, f, f, 3, 1, 1);
    let shallow = g.relu("shallow.relu", s);

    let mut stages = Vec::new();
    let mut prev = down;
    let mut cin = f;
    for (i, cout) in [32usize, 64, 128].into_iter().enumerate() {
        let p = format!("enc{}", i + 1);
        let a = g.conv(&format!("{p}.conv1"), prev, cin, cout, 3, 2, 1);
        let a = g.relu(&format!("{p}.relu1"), a);
        let b = g.conv(&format!("{p}.conv2"), a, cout, cout, 3, 1, 1);
        prev = g.relu(&format!("{p}.relu2"), b);
        stages.push(prev);
        cin = cout;
    }

    let mut y = stages[2];
    for (i, (skip, c)) in [(stages[1], 64usize), (stages[0], 32)].into_iter().enumerate() {
        let p = format!("dec{}", i + 1);
        let up = g.tconv(&format!("{p}.up"), y, 2 * c, c);
        let up = g.add(&format!("{p}.crop"), LayerKind::Crop, &[up, skip]);
        let sum = g.add(&format!("{p}.add"), LayerKind::Add, &[up, skip]);
        let conv = g.conv(&format!("{p}.conv"), sum, c, c, 3, 1, 1);
        y = g.relu(&format!("{p}.relu"), conv);
    }
    let up = g.tconv("dec3.up", y, 32, f);
    let up = g.add("dec3.crop", LayerKind::Crop, &[up, down]);

    let fused = g.add("fuse.add", LayerKind::Add, &[up, shallow, down]);
    let upsampled = if cfg.learnable_head_upsample {
        g.tconv("head.up", fused, f, f)
    } else {
        g.add("head.upsample", LayerKind::UpsampleNearest2x, &[fused])
    };
    let logits = g.conv("head.conv", upsampled, f, cfg.num_classes, 1, 1, 0);
    let out = g.add("head.softmax", LayerKind::Softmax, &[logits]);

    let id = if cfg.learnable_head_upsample { DESK_TCONV_HEAD_ARCH_ID } else { DESK_ARCH_ID };
    let id = if cfg.in_channels == 1 && cfg.num_classes == 2 {
        id.to_string()
    } else {
        format!("{id}-c{}-k{}", cfg.in_channels, cfg.num_classes)
    };
    g.finish(&id, out, 16)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape_of(spec: &ArchitectureSpec, shapes: &[Shape], name: &str) -> Vec<usize> {
        shapes[spec.find(name).unwrap()].dims().to_vec()
    }

    #[test]
    fn desk_shapes_at_256() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        let shapes = infer_shapes(&spec, &[1, 1, 256, 256]).unwrap();
        assert_eq!(shapes[spec.output()].dims(), &[1, 2, 256, 256]);
        assert_eq!(shape_of(&spec, &shapes, "down.conv"), vec![1, 15, 128, 128]);
        assert_eq!(shape_of(&spec, &shapes, "down.pool"), vec![1, 1, 128, 128]);
        assert_eq!(shape_of(&spec, &shapes, "down.relu"), vec![1, 16, 128, 128]);
        assert_eq!(shape_of(&spec, &shapes, "enc3.relu2"), vec![1, 128, 16, 16]);
        assert_eq!(shape_of(&spec, &shapes, "fuse.add"), vec![1, 16, 128, 128]);
        assert_eq!(spec.downsampling_factor(), 16);
        assert_eq!(256 / spec.downsampling_factor(), 16);
    }

    #[test]
    fn odd_multiples_still_round_trip() {
        let spec = build_rfbsnet_desk(1, 2).unwrap();
        for &(h, w) in &[(34, 32), (50, 98), (130, 254), (32, 32)] {
            let shapes = infer_shapes(&spec, &[2, 1, h, w]).unwrap();
            assert_eq!(shapes[spec.output()].dims(), &[2, 2, h, w]);
        }
        assert!(infer_shapes(&spec, &[1, 1, 33, 32]).is_err());
        assert!(infer_shapes(&spec, &[1, 2, 32, 32]).is_err());
    }

    #[test]
    fn mismatched_add_names_node() {
        let mut g = GraphBuilder::new();
        let x = g.input(1);
        let a = g.conv("a", x, 1, 16, 3, 1, 1);
        let b = g.conv("b", x, 1, 32, 3, 1, 1);
        let s = g.add("bad_sum", LayerKind::Add, &[a, b]);
        let spec = g.finish("t", s, 1).unwrap();
        match infer_shapes(&spec, &[1, 1, 128, 128]) {
            Err(Error::Node { node, .. }) => assert_eq!(node, "bad_sum"),
            other => panic!("expected node error, got {other:?}"),
        }
    }

    #[test]
    fn builder_validation() {
        let mut g = GraphBuilder::new();
        let x = g.input(1);
        g.add("r", LayerKind::Relu, &[x + 5]);
        assert!(g.finish("t", 1, 1).is_err());

        let mut g = GraphBuilder::new();
        let x = g.input(1);
        g.conv("c", x, 1, 2, 5, 1, 2);
        assert!(g.finish("t", 1, 1).is_err());

        let mut g = GraphBuilder::new();
        let x = g.input(1);
        let r = g.relu("r", x);
        g.relu("r", r);
        assert!(g.finish("t", 2, 1).is_err());
    }

    #[test]
    fn config_hash_tracks_topology() {
        let a = build_rfbsnet_desk(1, 2).unwrap();
        let b = build_rfbsnet_desk(1, 2).unwrap();
        let c = build_by_id(DESK_TCONV_HEAD_ARCH_ID).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert!(build_by_id("unet").is_err());
        assert!(build_rfbsnet_desk(1, 1).is_err());
        assert!(build_rfbsnet_desk(0, 2).is_err());
    }

    #[test]
    fn learnable_head_variant() {
        let spec = build_by_id(DESK_TCONV_HEAD_ARCH_ID).unwrap();
        let shapes = infer_shapes(&spec, &[1, 1, 64, 64]).unwrap();
        assert_eq!(shapes[spec.output()].dims(), &[1, 2, 64, 64]);
        assert!(spec.param_shapes().iter().any(|(n, _)| n == "head.up.weight"));
    }
}
