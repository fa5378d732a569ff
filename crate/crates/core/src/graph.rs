//! Spatio-temporal graph construction.
//!
//! Each keyframe contributes foreground nodes (one per actor/object box),
//! implicit context nodes (one per spatial cell of the time-averaged feature
//! grid) and explicit context nodes (one per region proposal). Only
//! foreground nodes have neighborhoods: the spatial neighborhood is every node
//! of the same keyframe, the temporal one is every foreground node in the
//! keyframes at offsets `t * tau_s`, `t != 0`, inside the `tau_c` window.
//!
//! Global node order is keyframe by keyframe; within a keyframe foreground
//! nodes come first, then implicit, then explicit context nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::passing::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backbone feature volume of shape `t x h x w x c` for one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    values: Tensor<T>,
    keyframe_id: i64,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(values: Tensor<T>, keyframe_id: i64) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Validation(format!(
                "feature grid must be t x h x w x c with every dimension >= 1, got {s:?}"
            )));
        }
        Ok(Self {
            values,
            keyframe_id,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.dims().3
    }

    pub fn keyframe_id(&self) -> i64 {
        self.keyframe_id
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    fn cell(&self, t: usize, row: usize, col: usize) -> &[T] {
        let (_, h, w, c) = self.dims();
        let start = ((t * h + row) * w + col) * c;
        &self.values.data()[start..start + c]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            values: self.values.cast(),
            keyframe_id: self.keyframe_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxRole {
    Foreground,
    Proposal,
}

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub keyframe_id: i64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub role: BoxRole,
}

impl BBox {
    pub fn new(keyframe_id: i64, coords: [f64; 4], role: BoxRole) -> Result<Self> {
        let b = Self {
            keyframe_id,
            x1: coords[0],
            y1: coords[1],
            x2: coords[2],
            y2: coords[3],
            role,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "box {c:?} on keyframe {} has coordinates outside [0, 1]",
                self.keyframe_id
            )));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Validation(format!(
                "box {c:?} on keyframe {} is degenerate (need x1 < x2 and y1 < y2)",
                self.keyframe_id
            )));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Foreground,
    ContextImplicit,
    ContextExplicit,
}

/// Where a node's features came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSource {
    Box(BBox),
    Cell {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

impl NodeSource {
    /// Normalized `[x1, y1, x2, y2]` footprint.
    pub fn geometry(&self) -> [f64; 4] {
        match *self {
            NodeSource::Box(b) => b.coords(),
            NodeSource::Cell {
                row,
                col,
                height,
                width,
            } => [
                col as f64 / width as f64,
                row as f64 / height as f64,
                (col + 1) as f64 / width as f64,
                (row + 1) as f64 / height as f64,
            ],
        }
    }
}

/// Node metadata; states live in [`SpatioTemporalGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Position of the keyframe within the clip.
    pub keyframe_index: usize,
    pub keyframe_id: i64,
    pub source: NodeSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub info: NodeInfo,
    pub state: Tensor<T>,
}

/// Mean channel vector over every `t` and every cell whose center lies inside
/// `bbox` (edges inclusive). When no center is covered the cell whose center is
/// nearest the box center is used instead.
pub fn pool_box_features<T: Scalar>(grid: &FeatureGrid<T>, bbox: &BBox) -> Result<Tensor<T>> {
    bbox.validate()?;
    let (t, h, w, c) = grid.dims();
    let mut covered = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let cx = (col as f64 + 0.5) / w as f64;
            let cy = (row as f64 + 0.5) / h as f64;
            if bbox.contains(cx, cy) {
                covered.push((row, col));
            }
        }
    }
    if covered.is_empty() {
        let (bx, by) = bbox.center();
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for row in 0..h {
            for col in 0..w {
                let dx = (col as f64 + 0.5) / w as f64 - bx;
                let dy = (row as f64 + 0.5) / h as f64 - by;
                let d = dx * dx + dy * dy;
                if d < best_d {
                    best_d = d;
                    best = (row, col);
                }
            }
        }
        covered.push(best);
    }
    let mut acc = vec![T::zero(); c];
    for ti in 0..t {
        for &(row, col) in &covered {
            for (a, &v) in acc.iter_mut().zip(grid.cell(ti, row, col)) {
                *a = *a + v;
            }
        }
    }
    let count = T::lit((t * covered.len()) as f64);
    Ok(Tensor::vector(acc.into_iter().map(|a| a / count).collect()))
}

/// One `c`-vector per spatial cell of the time-averaged grid, row-major.
pub fn implicit_context_features<T: Scalar>(grid: &FeatureGrid<T>) -> Vec<Tensor<T>> {
    let (t, h, w, c) = grid.dims();
    let tn = T::lit(t as f64);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut acc = vec![T::zero(); c];
            for ti in 0..t {
                for (a, &v) in acc.iter_mut().zip(grid.cell(ti, row, col)) {
                    *a = *a + v;
                }
            }
            out.push(Tensor::vector(acc.into_iter().map(|a| a / tn).collect()));
        }
    }
    out
}

/// One keyframe's worth of raw inputs.
#[derive(Clone, Copy, Debug)]
pub struct KeyframeInput<'a, T> {
    pub grid: &'a FeatureGrid<T>,
    pub foreground: &'a [BBox],
    pub proposals: &'a [BBox],
}

fn keyframe_features<T: Scalar>(
    input: &KeyframeInput<'_, T>,
    keyframe_index: usize,
    first_id: NodeId,
) -> Result<(Vec<NodeInfo>, Vec<Tensor<T>>)> {
    let grid = input.grid;
    if input.foreground.is_empty() {
        return Err(Error::NoForeground(grid.keyframe_id()));
    }
    let (_, h, w, _) = grid.dims();
    let mut infos = Vec::new();
    let mut feats = Vec::new();
    let mut push = |kind, source, feat| {
        infos.push(NodeInfo {
            id: first_id + infos.len(),
            kind,
            keyframe_index,
            keyframe_id: grid.keyframe_id(),
            source,
        });
        feats.push(feat);
    };
    for b in input.foreground {
        push(
            NodeKind::Foreground,
            NodeSource::Box(*b),
            pool_box_features(grid, b)?,
        );
    }
    for (i, f) in implicit_context_features(grid).into_iter().enumerate() {
        let source = NodeSource::Cell {
            row: i / w,
            col: i % w,
            height: h,
            width: w,
        };
        push(NodeKind::ContextImplicit, source, f);
    }
    for b in input.proposals {
        push(
            NodeKind::ContextExplicit,
            NodeSource::Box(*b),
            pool_box_features(grid, b)?,
        );
    }
    Ok((infos, feats))
}

fn project<T: Scalar>(features: &Tensor<T>, proj: &Linear<Tensor<T>>) -> Result<Tensor<T>> {
    let mut out = features.matmul(&proj.w)?;
    let d = out.cols();
    if proj.b.numel() != d {
        return Err(Error::shape(
            "projection bias",
            proj.w.shape(),
            proj.b.shape(),
        ));
    }
    for row in out.data_mut().chunks_mut(d) {
        for (o, &b) in row.iter_mut().zip(proj.b.data()) {
            *o = *o + b;
        }
    }
    out.check_finite("projection")
}

fn stack_rows<T: Scalar>(rows: &[Tensor<T>], cols: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_parts(vec![rows.len(), cols], data)
}

/// Nodes for one keyframe with states `features @ W + b`.
pub fn init_nodes<T: Scalar>(
    input: &KeyframeInput<'_, T>,
    proj: &Linear<Tensor<T>>,
    keyframe_index: usize,
    first_id: NodeId,
) -> Result<Vec<Node<T>>> {
    let (infos, feats) = keyframe_features(input, keyframe_index, first_id)?;
    let c = input.grid.channels();
    if proj.w.rows() != c {
        return Err(Error::shape("init_nodes projection", &[c], proj.w.shape()));
    }
    let states = project(&stack_rows(&feats, c), proj)?;
    Ok(infos
        .into_iter()
        .enumerate()
        .map(|(i, info)| Node {
            info,
            state: Tensor::vector(states.row(i).to_vec()),
        })
        .collect())
}

/// Spatial neighborhoods for the nodes of one keyframe, indexed like `nodes`.
/// Foreground nodes see every node of the keyframe (themselves included);
/// context nodes see nothing.
pub fn build_spatial_neighborhoods(nodes: &[NodeInfo]) -> Vec<Vec<NodeId>> {
    let all: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
    nodes
        .iter()
        .map(|n| {
            if n.kind == NodeKind::Foreground {
                all.clone()
            } else {
                Vec::new()
            }
        })
        .collect()
}

pub fn check_tau(tau_c: usize, tau_s: usize) -> Result<()> {
    if tau_c == 0 || tau_c.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "tau_c must be an odd positive integer, got {tau_c}"
        )));
    }
    if tau_s == 0 {
        return Err(Error::Config("tau_s must be >= 1".into()));
    }
    Ok(())
}

/// Keyframe offsets `t * tau_s` for `t` in `[ceil(-tau_c/2), floor(tau_c/2)]`,
/// `t != 0`, that land inside `0..num_keyframes` from `position`.
pub fn temporal_offsets(
    position: usize,
    num_keyframes: usize,
    tau_c: usize,
    tau_s: usize,
) -> Result<Vec<i64>> {
    check_tau(tau_c, tau_s)?;
    let half = (tau_c / 2) as i64;
    Ok((-half..=half)
        .filter(|&t| t != 0)
        .map(|t| t * tau_s as i64)
        .filter(|&off| {
            let target = position as i64 + off;
            target >= 0 && target < num_keyframes as i64
        })
        .collect())
}

/// Foreground node ids of one keyframe, tagged with the keyframe position.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeGroup {
    pub position: usize,
    pub keyframe_id: i64,
    pub foreground: Vec<NodeId>,
    pub context: Vec<NodeId>,
}

impl KeyframeGroup {
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.foreground.iter().chain(&self.context).copied()
    }
}

/// Temporal neighborhoods indexed by node id (`node_count` entries). Context
/// nodes never appear, either as keys or as neighbors.
pub fn build_temporal_neighborhoods(
    keyframes: &[KeyframeGroup],
    num_positions: usize,
    node_count: usize,
    tau_c: usize,
    tau_s: usize,
) -> Result<Vec<Vec<NodeId>>> {
    check_tau(tau_c, tau_s)?;
    let mut by_position: Vec<Option<&KeyframeGroup>> = vec![None; num_positions];
    for g in keyframes {
        if g.position >= num_positions {
            return Err(Error::Validation(format!(
                "keyframe position {} outside clip of {num_positions}",
                g.position
            )));
        }
        by_position[g.position] = Some(g);
    }
    let mut out = vec![Vec::new(); node_count];
    for g in keyframes {
        let mut neighbors = Vec::new();
        for off in temporal_offsets(g.position, num_positions, tau_c, tau_s)? {
            let target = (g.position as i64 + off) as usize;
            if let Some(other) = by_position[target] {
                neighbors.extend_from_slice(&other.foreground);
            }
        }
        for &v in &g.foreground {
            out[v] = neighbors.clone();
        }
    }
    Ok(out)
}

/// Graph topology plus the raw pooled features of every node.
#[derive(Clone, Debug)]
pub struct GraphLayout<T> {
    nodes: Vec<NodeInfo>,
    features: Tensor<T>,
    keyframes: Vec<KeyframeGroup>,
    spatial: Vec<Vec<NodeId>>,
    temporal: Vec<Vec<NodeId>>,
    tau_c: usize,
    tau_s: usize,
}

impl<T: Scalar> GraphLayout<T> {
    /// `inputs[i]` is the keyframe at clip position `i`. Keyframes without
    /// foreground boxes contribute no nodes but keep their position.
    pub fn build(inputs: &[KeyframeInput<'_, T>], tau_c: usize, tau_s: usize) -> Result<Self> {
        check_tau(tau_c, tau_s)?;
        let channels = inputs
            .first()
            .ok_or_else(|| Error::Validation("clip has no keyframes".into()))?
            .grid
            .channels();
        let mut nodes = Vec::new();
        let mut feats = Vec::new();
        let mut keyframes = Vec::new();
        let mut spatial = Vec::new();
        for (position, input) in inputs.iter().enumerate() {
            if input.grid.channels() != channels {
                return Err(Error::Validation(format!(
                    "keyframe {} has {} channels, expected {channels}",
                    input.grid.keyframe_id(),
                    input.grid.channels()
                )));
            }
            if input.foreground.is_empty() {
                continue;
            }
            let (infos, f) = keyframe_features(input, position, nodes.len())?;
            spatial.extend(build_spatial_neighborhoods(&infos));
            keyframes.push(KeyframeGroup {
                position,
                keyframe_id: input.grid.keyframe_id(),
                foreground: infos
                    .iter()
                    .filter(|n| n.kind == NodeKind::Foreground)
                    .map(|n| n.id)
                    .collect(),
                context: infos
                    .iter()
                    .filter(|n| n.kind != NodeKind::Foreground)
                    .map(|n| n.id)
                    .collect(),
            });
            nodes.extend(infos);
            feats.extend(f);
        }
        if nodes.is_empty() {
            return Err(Error::Validation("clip has no foreground boxes".into()));
        }
        let temporal =
            build_temporal_neighborhoods(&keyframes, inputs.len(), nodes.len(), tau_c, tau_s)?;
        Ok(Self {
            features: stack_rows(&feats, channels),
            nodes,
            keyframes,
            spatial,
            temporal,
            tau_c,
            tau_s,
        })
    }

    pub fn nodes(&self) -> &[NodeInfo] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `node_count x c` pooled features.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn keyframes(&self) -> &[KeyframeGroup] {
        &self.keyframes
    }

    pub fn spatial_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.spatial[v]
    }

    pub fn temporal_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.temporal[v]
    }

    pub fn foreground(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Foreground)
            .map(|n| n.id)
    }

    pub fn tau(&self) -> (usize, usize) {
        (self.tau_c, self.tau_s)
    }

    pub fn project(self, proj: &Linear<Tensor<T>>) -> Result<SpatioTemporalGraph<T>> {
        if proj.w.rows() != self.features.cols() {
            return Err(Error::shape(
                "graph projection",
                self.features.shape(),
                proj.w.shape(),
            ));
        }
        let states = project(&self.features, proj)?;
        Ok(SpatioTemporalGraph {
            layout: self,
            states,
        })
    }
}

/// Layout plus projected initial node states (`node_count x d`).
#[derive(Clone, Debug)]
pub struct SpatioTemporalGraph<T> {
    layout: GraphLayout<T>,
    states: Tensor<T>,
}

impl<T: Scalar> SpatioTemporalGraph<T> {
    pub fn build(
        inputs: &[KeyframeInput<'_, T>],
        proj: &Linear<Tensor<T>>,
        tau_c: usize,
        tau_s: usize,
    ) -> Result<Self> {
        GraphLayout::build(inputs, tau_c, tau_s)?.project(proj)
    }

    /// Uses caller-provided initial states instead of a projection.
    pub fn from_states(layout: GraphLayout<T>, states: Tensor<T>) -> Result<Self> {
        if states.rows() != layout.node_count() || states.shape().len() != 2 {
            return Err(Error::shape(
                "graph states",
                states.shape(),
                &[layout.node_count()],
            ));
        }
        Ok(Self { layout, states })
    }

    pub fn layout(&self) -> &GraphLayout<T> {
        &self.layout
    }

    pub fn states(&self) -> &Tensor<T> {
        &self.states
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn node(&self, v: NodeId) -> Node<T> {
        Node {
            info: self.layout.nodes[v].clone(),
            state: Tensor::vector(self.states.row(v).to_vec()),
        }
    }
}
