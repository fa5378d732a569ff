//! Message passing over a [`GraphLayout`].
//!
//! Each iteration runs a spatial phase then a temporal phase. In a phase every
//! foreground node with a nonempty neighborhood receives one message per head
//! (Non-local and/or GAT), the messages are mixed by a learned softmax gate
//! when there is more than one, and the node is updated with
//! `LN(h + m)`. Updates are synchronous: all messages of a phase read the
//! pre-phase states. Context nodes are never written.
//!
//! Parameter containers are generic over their leaf type so the same tree
//! holds plain tensors (storage, checkpoints) or tape variables (training).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{check_tau, GraphLayout, NodeId, SpatioTemporalGraph};
use crate::heads::ReadoutKind;
use crate::numgrad::{Tape, Var, DEFAULT_LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Visitor<'a, P> = dyn FnMut(&str, &P) + 'a;
pub type VisitorMut<'a, P> = dyn FnMut(&str, &mut P) + 'a;
pub type Mapper<'a, P, Q> = dyn FnMut(&str, &P) -> Result<Q> + 'a;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `x @ w + b` with `w: in x out`, `b: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, P>) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, P>) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut Mapper<'_, P, Q>) -> Result<Linear<Q>> {
        Ok(Linear {
            w: f(&join(prefix, "w"), &self.w)?,
            b: f(&join(prefix, "b"), &self.b)?,
        })
    }
}

impl<'t, T: Scalar> Linear<Var<'t, T>> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.w)?.add_row_vector(self.b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageFn {
    NonLocal,
    Gat,
}

impl MessageFn {
    pub fn name(self) -> &'static str {
        match self {
            MessageFn::NonLocal => "nonlocal",
            MessageFn::Gat => "gat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Spatial,
    Temporal,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Spatial => "spatial",
            Phase::Temporal => "temporal",
        }
    }
}

/// Query, key and value projections, each `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalWeights<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
}

/// `w_a: d x d` value transform, `w_b: 2d` scoring vector over `[h_v || h_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatWeights<P> {
    pub w_a: P,
    pub w_b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadWeights<P> {
    NonLocal(NonLocalWeights<P>),
    Gat(GatWeights<P>),
}

impl<P> HeadWeights<P> {
    pub fn function(&self) -> MessageFn {
        match self {
            HeadWeights::NonLocal(_) => MessageFn::NonLocal,
            HeadWeights::Gat(_) => MessageFn::Gat,
        }
    }

    fn fields(&self) -> Vec<(&'static str, &P)> {
        match self {
            HeadWeights::NonLocal(w) => vec![("w_q", &w.w_q), ("w_k", &w.w_k), ("w_v", &w.w_v)],
            HeadWeights::Gat(w) => vec![("w_a", &w.w_a), ("w_b", &w.w_b)],
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, P>) {
        for (name, p) in self.fields() {
            f(&join(prefix, name), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, P>) {
        match self {
            HeadWeights::NonLocal(w) => {
                f(&join(prefix, "w_q"), &mut w.w_q);
                f(&join(prefix, "w_k"), &mut w.w_k);
                f(&join(prefix, "w_v"), &mut w.w_v);
            }
            HeadWeights::Gat(w) => {
                f(&join(prefix, "w_a"), &mut w.w_a);
                f(&join(prefix, "w_b"), &mut w.w_b);
            }
        }
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut Mapper<'_, P, Q>) -> Result<HeadWeights<Q>> {
        Ok(match self {
            HeadWeights::NonLocal(w) => HeadWeights::NonLocal(NonLocalWeights {
                w_q: f(&join(prefix, "w_q"), &w.w_q)?,
                w_k: f(&join(prefix, "w_k"), &w.w_k)?,
                w_v: f(&join(prefix, "w_v"), &w.w_v)?,
            }),
            HeadWeights::Gat(w) => HeadWeights::Gat(GatWeights {
                w_a: f(&join(prefix, "w_a"), &w.w_a)?,
                w_b: f(&join(prefix, "w_b"), &w.w_b)?,
            }),
        })
    }
}

/// Weights of one (iteration, phase).
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseParams<P> {
    pub heads: Vec<HeadWeights<P>>,
    /// `2d` gating vector, present only with more than one head.
    pub gate: Option<P>,
    pub ln_scale: P,
    pub ln_shift: P,
}

impl<P> PhaseParams<P> {
    fn head_prefix(prefix: &str, k: usize, h: &HeadWeights<P>) -> String {
        join(prefix, &format!("head{k}.{}", h.function().name()))
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, P>) {
        for (k, h) in self.heads.iter().enumerate() {
            h.visit(&Self::head_prefix(prefix, k, h), f);
        }
        if let Some(g) = &self.gate {
            f(&join(prefix, "gate"), g);
        }
        f(&join(prefix, "ln.scale"), &self.ln_scale);
        f(&join(prefix, "ln.shift"), &self.ln_shift);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, P>) {
        for (k, h) in self.heads.iter_mut().enumerate() {
            let p = Self::head_prefix(prefix, k, h);
            h.visit_mut(&p, f);
        }
        if let Some(g) = &mut self.gate {
            f(&join(prefix, "gate"), g);
        }
        f(&join(prefix, "ln.scale"), &mut self.ln_scale);
        f(&join(prefix, "ln.shift"), &mut self.ln_shift);
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut Mapper<'_, P, Q>) -> Result<PhaseParams<Q>> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| h.try_map(&Self::head_prefix(prefix, k, h), f))
            .collect::<Result<_>>()?;
        let gate = match &self.gate {
            Some(g) => Some(f(&join(prefix, "gate"), g)?),
            None => None,
        };
        Ok(PhaseParams {
            heads,
            gate,
            ln_scale: f(&join(prefix, "ln.scale"), &self.ln_scale)?,
            ln_shift: f(&join(prefix, "ln.shift"), &self.ln_shift)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationParams<P> {
    pub spatial: PhaseParams<P>,
    pub temporal: PhaseParams<P>,
}

impl<P> IterationParams<P> {
    pub fn phase(&self, phase: Phase) -> &PhaseParams<P> {
        match phase {
            Phase::Spatial => &self.spatial,
            Phase::Temporal => &self.temporal,
        }
    }
}

/// Input projection plus untied per-iteration message weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageParams<P> {
    pub input: Linear<P>,
    pub iterations: Vec<IterationParams<P>>,
}

impl<P> MessageParams<P> {
    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, P>) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, it) in self.iterations.iter().enumerate() {
            it.spatial
                .visit(&join(prefix, &format!("iter{i}.spatial")), f);
            it.temporal
                .visit(&join(prefix, &format!("iter{i}.temporal")), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, P>) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, it) in self.iterations.iter_mut().enumerate() {
            it.spatial
                .visit_mut(&join(prefix, &format!("iter{i}.spatial")), f);
            it.temporal
                .visit_mut(&join(prefix, &format!("iter{i}.temporal")), f);
        }
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut Mapper<'_, P, Q>) -> Result<MessageParams<Q>> {
        let input = self.input.try_map(&join(prefix, "input"), f)?;
        let iterations = self
            .iterations
            .iter()
            .enumerate()
            .map(|(i, it)| {
                Ok(IterationParams {
                    spatial: it
                        .spatial
                        .try_map(&join(prefix, &format!("iter{i}.spatial")), f)?,
                    temporal: it
                        .temporal
                        .try_map(&join(prefix, &format!("iter{i}.temporal")), f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MessageParams { input, iterations })
    }
}

impl<T: Scalar> MessageParams<Tensor<T>> {
    /// Every `(name, shape)` the configuration requires, in visit order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        Self::zeros(config).visit("", &mut |name, t| {
            out.push((name.to_string(), t.shape().to_vec()))
        });
        out
    }

    /// All-zero weights with unit layer-norm scale.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d;
        let phase = || PhaseParams {
            heads: config
                .head_functions()
                .into_iter()
                .map(|f| match f {
                    MessageFn::NonLocal => HeadWeights::NonLocal(NonLocalWeights {
                        w_q: Tensor::zeros(&[d, d]),
                        w_k: Tensor::zeros(&[d, d]),
                        w_v: Tensor::zeros(&[d, d]),
                    }),
                    MessageFn::Gat => HeadWeights::Gat(GatWeights {
                        w_a: Tensor::zeros(&[d, d]),
                        w_b: Tensor::zeros(&[2 * d]),
                    }),
                })
                .collect(),
            gate: (config.message_count() > 1).then(|| Tensor::zeros(&[2 * d])),
            ln_scale: Tensor::ones(&[d]),
            ln_shift: Tensor::zeros(&[d]),
        };
        MessageParams {
            input: Linear {
                w: Tensor::zeros(&[config.channels, d]),
                b: Tensor::zeros(&[d]),
            },
            iterations: (0..config.iterations)
                .map(|_| IterationParams {
                    spatial: phase(),
                    temporal: phase(),
                })
                .collect(),
        }
    }

    /// Checks head layout and every tensor shape against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config);
        let mut want = Vec::new();
        expected.visit("", &mut |n, t| {
            want.push((n.to_string(), t.shape().to_vec()))
        });
        let mut have = Vec::new();
        self.visit("", &mut |n, t| {
            have.push((n.to_string(), t.shape().to_vec()))
        });
        if want != have {
            let first = want
                .iter()
                .zip(&have)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", want.len(), have.len())
                });
            return Err(Error::Config(format!(
                "message parameters do not match config: {first}"
            )));
        }
        Ok(())
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> Result<MessageParams<Var<'t, T>>> {
        self.try_map("", &mut |_, t| Ok(tape.constant(t.clone())))
    }
}

fn default_eps() -> f64 {
    DEFAULT_LN_EPS
}

/// Architecture and graph hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels `c` of the input feature grids.
    pub channels: usize,
    /// Node state dimension.
    pub d: usize,
    /// Heads per message function.
    pub heads: usize,
    pub iterations: usize,
    pub message_fns: Vec<MessageFn>,
    pub tau_c: usize,
    pub tau_s: usize,
    pub readout: ReadoutKind,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(channels: usize, readout: ReadoutKind) -> Self {
        Self {
            channels,
            d: 16,
            heads: 4,
            iterations: 1,
            message_fns: vec![MessageFn::Gat],
            tau_c: 3,
            tau_s: 1,
            readout,
            seed: 0,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d == 0 {
            return Err(Error::Config("channels and d must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.message_fns.is_empty() {
            return Err(Error::Config(
                "at least one message function is required".into(),
            ));
        }
        for (i, f) in self.message_fns.iter().enumerate() {
            if self.message_fns[..i].contains(f) {
                return Err(Error::Config(format!(
                    "message function {} listed twice",
                    f.name()
                )));
            }
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("ln_eps must be finite and >= 0".into()));
        }
        self.readout.validate()?;
        check_tau(self.tau_c, self.tau_s)
    }

    /// Message function of every parallel head, in parameter order.
    pub fn head_functions(&self) -> Vec<MessageFn> {
        self.message_fns
            .iter()
            .flat_map(|&f| std::iter::repeat_n(f, self.heads))
            .collect()
    }

    /// Parallel messages per node per phase.
    pub fn message_count(&self) -> usize {
        self.heads * self.message_fns.len()
    }
}

/// Per-(iteration, phase, head, node) attention weights over the neighbors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub head: usize,
    pub function: MessageFn,
    pub node: NodeId,
    pub neighbors: Vec<NodeId>,
    pub weights: Vec<f64>,
}

/// Per-(iteration, phase, node) mixing weights over the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub node: NodeId,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub attention: Vec<AttentionRecord>,
    pub gates: Vec<GateRecord>,
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

fn split_halves<'t, T: Scalar>(v: Var<'t, T>, d: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if v.value().numel() != 2 * d {
        return Err(Error::shape("split 2d vector", &v.shape(), &[2 * d]));
    }
    let col = v.reshape(&[2 * d, 1])?;
    let first: Vec<usize> = (0..d).collect();
    let second: Vec<usize> = (d..2 * d).collect();
    Ok((col.gather_rows(&first)?, col.gather_rows(&second)?))
}

fn check_square<T: Scalar>(w: Var<'_, T>, d: usize, what: &'static str) -> Result<()> {
    if w.shape() != [d, d] {
        return Err(Error::shape(what, &w.shape(), &[d, d]));
    }
    Ok(())
}

/// Non-local messages for queries `fg` (`n x d`) over neighbors `all`
/// (`k x d`): `softmax(Q K^T / sqrt(d)) V`. Returns messages and attention.
pub fn nonlocal_attend<'t, T: Scalar>(
    fg: Var<'t, T>,
    all: Var<'t, T>,
    w: &NonLocalWeights<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = fg.shape()[1];
    if all.shape()[1] != d {
        return Err(Error::shape("nonlocal", &fg.shape(), &all.shape()));
    }
    check_square(w.w_q, d, "nonlocal w_q")?;
    check_square(w.w_k, d, "nonlocal w_k")?;
    check_square(w.w_v, d, "nonlocal w_v")?;
    let q = fg.matmul(w.w_q)?;
    let k = all.matmul(w.w_k)?;
    let v = all.matmul(w.w_v)?;
    let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
    let attn = q.matmul_nt(k)?.scale(inv_sqrt_d)?.softmax_rows()?;
    Ok((attn.matmul(v)?, attn))
}

/// GAT messages for queries `fg` over neighbors `nbrs`:
/// `e_ij = ReLU(w_b . [h_i || h_j])`, `alpha = softmax_j(e)`,
/// `m_i = ReLU(sum_j alpha_ij W_a h_j)`.
pub fn gat_attend<'t, T: Scalar>(
    fg: Var<'t, T>,
    nbrs: Var<'t, T>,
    w: &GatWeights<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = fg.shape()[1];
    if nbrs.shape()[1] != d {
        return Err(Error::shape("gat", &fg.shape(), &nbrs.shape()));
    }
    check_square(w.w_a, d, "gat w_a")?;
    let (w_self, w_nbr) = split_halves(w.w_b, d)?;
    let scores = fg.matmul(w_self)?.outer_add(nbrs.matmul(w_nbr)?)?.relu()?;
    let alpha = scores.softmax_rows()?;
    let transformed = nbrs.matmul_nt(w.w_a)?;
    Ok((alpha.matmul(transformed)?.relu()?, alpha))
}

/// Convex combination of per-head messages with weights
/// `softmax_k(ReLU(g . [h || m_k]))`. Returns the mix and the `n x K` weights.
pub fn gate_messages<'t, T: Scalar>(
    h: Var<'t, T>,
    messages: &[Var<'t, T>],
    gate: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = h.shape()[1];
    let (g_self, g_msg) = split_halves(gate, d)?;
    let base = h.matmul(g_self)?;
    let scores = messages
        .iter()
        .map(|m| {
            if m.shape() != h.shape() {
                return Err(Error::shape("combine_parallel", &h.shape(), &m.shape()));
            }
            base.add(m.matmul(g_msg)?)?.relu()
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = Var::concat_cols(&scores)?.softmax_rows()?;
    let mut out: Option<Var<'t, T>> = None;
    for (k, m) in messages.iter().enumerate() {
        let term = m.scale_rows(weights.gather_cols(&[k])?)?;
        out = Some(match out {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok((out.expect("at least one message"), weights))
}

struct TraceSink<'a> {
    trace: &'a mut AttentionTrace,
    iteration: usize,
    phase: Phase,
}

fn phase_update<'t, T: Scalar>(
    states: Var<'t, T>,
    members: &[NodeId],
    nbrs: &[NodeId],
    params: &PhaseParams<Var<'t, T>>,
    eps: T,
    mut sink: Option<&mut TraceSink<'_>>,
) -> Result<Var<'t, T>> {
    let hq = states.gather_rows(members)?;
    let hn = states.gather_rows(nbrs)?;
    let mut messages = Vec::with_capacity(params.heads.len());
    for (k, head) in params.heads.iter().enumerate() {
        let (m, attn) = match head {
            HeadWeights::NonLocal(w) => nonlocal_attend(hq, hn, w)?,
            HeadWeights::Gat(w) => gat_attend(hq, hn, w)?,
        };
        if let Some(s) = sink.as_deref_mut() {
            for (r, weights) in rows_f64(&attn.value()).into_iter().enumerate() {
                s.trace.attention.push(AttentionRecord {
                    iteration: s.iteration,
                    phase: s.phase,
                    head: k,
                    function: head.function(),
                    node: members[r],
                    neighbors: nbrs.to_vec(),
                    weights,
                });
            }
        }
        messages.push(m);
    }
    let combined = match (&params.gate, messages.len()) {
        (_, 1) => messages[0],
        (Some(g), _) => {
            let (mix, weights) = gate_messages(hq, &messages, *g)?;
            if let Some(s) = sink {
                for (r, w) in rows_f64(&weights.value()).into_iter().enumerate() {
                    s.trace.gates.push(GateRecord {
                        iteration: s.iteration,
                        phase: s.phase,
                        node: members[r],
                        weights: w,
                    });
                }
            }
            mix
        }
        (None, _) => return Err(Error::Config("multiple heads without a gate vector".into())),
    };
    hq.add(combined)?
        .layer_norm_rows(params.ln_scale, params.ln_shift, eps)
}

/// Foreground nodes grouped by identical neighbor lists, in first-seen order.
/// Nodes with empty neighborhoods are dropped.
fn neighbor_groups<T: Scalar>(
    layout: &GraphLayout<T>,
    phase: Phase,
) -> Vec<(&[NodeId], Vec<NodeId>)> {
    let mut groups: Vec<(&[NodeId], Vec<NodeId>)> = Vec::new();
    for v in layout.foreground() {
        let nbrs = match phase {
            Phase::Spatial => layout.spatial_neighbors(v),
            Phase::Temporal => layout.temporal_neighbors(v),
        };
        if nbrs.is_empty() {
            continue;
        }
        match groups.iter_mut().find(|(n, _)| *n == nbrs) {
            Some((_, members)) => members.push(v),
            None => groups.push((nbrs, vec![v])),
        }
    }
    groups
}

/// Differentiable message passing. `states` is `node_count x d`; returns the
/// updated matrix (context rows unchanged bit for bit).
pub fn propagate<'t, T: Scalar>(
    layout: &GraphLayout<T>,
    states: Var<'t, T>,
    params: &MessageParams<Var<'t, T>>,
    config: &ModelConfig,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var<'t, T>> {
    if states.shape() != [layout.node_count(), config.d] {
        return Err(Error::shape(
            "propagate states",
            &states.shape(),
            &[layout.node_count(), config.d],
        ));
    }
    if params.iterations.len() != config.iterations {
        return Err(Error::Config(format!(
            "config wants {} iterations, parameters have {}",
            config.iterations,
            params.iterations.len()
        )));
    }
    let eps = T::lit(config.ln_eps);
    let mut h = states;
    for (i, it) in params.iterations.iter().enumerate() {
        for phase in [Phase::Spatial, Phase::Temporal] {
            let pp = it.phase(phase);
            let before = h;
            let mut after = h;
            for (nbrs, members) in neighbor_groups(layout, phase) {
                let mut sink = trace.as_deref_mut().map(|trace| TraceSink {
                    trace,
                    iteration: i,
                    phase,
                });
                let updated = phase_update(before, &members, nbrs, pp, eps, sink.as_mut())?;
                after = after.scatter_rows(&members, updated)?;
            }
            h = after;
        }
    }
    Ok(h)
}

/// Result of [`run_inference`].
#[derive(Clone, Debug)]
pub struct Inference<T> {
    /// `node_count x d`; context rows equal the input states.
    pub states: Tensor<T>,
    pub trace: AttentionTrace,
}

/// Evaluation-mode message passing with attention traces.
pub fn run_inference<T: Scalar>(
    graph: &SpatioTemporalGraph<T>,
    params: &MessageParams<Tensor<T>>,
    config: &ModelConfig,
) -> Result<Inference<T>> {
    config.validate()?;
    params.check(config)?;
    if graph.layout().tau() != (config.tau_c, config.tau_s) {
        return Err(Error::Config(format!(
            "graph built with tau {:?}, config has ({}, {})",
            graph.layout().tau(),
            config.tau_c,
            config.tau_s
        )));
    }
    let tape = Tape::new();
    let vars = params.on_tape(&tape)?;
    let mut trace = AttentionTrace::default();
    let out = propagate(
        graph.layout(),
        tape.constant(graph.states().clone()),
        &vars,
        config,
        Some(&mut trace),
    )?;
    let states = (*out.value()).clone();
    Ok(Inference { states, trace })
}

fn single_row<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    v.reshape(&[1, v.numel()])
}

/// Non-local messages `M` (`n x d`) and attention (`n x (n+m)`) for
/// foreground rows `fg` over `all = [fg || context]`.
pub fn nonlocal_messages<T: Scalar>(
    fg: &Tensor<T>,
    all: &Tensor<T>,
    w: &NonLocalWeights<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let w = NonLocalWeights {
        w_q: tape.constant(w.w_q.clone()),
        w_k: tape.constant(w.w_k.clone()),
        w_v: tape.constant(w.w_v.clone()),
    };
    let (m, a) = nonlocal_attend(tape.constant(fg.clone()), tape.constant(all.clone()), &w)?;
    let (m, a) = ((*m.value()).clone(), (*a.value()).clone());
    Ok((m, a))
}

/// GAT message for one node and its attention weights over `neighbors`.
pub fn gat_messages<T: Scalar>(
    v_state: &Tensor<T>,
    neighbors: &[Tensor<T>],
    w: &GatWeights<Tensor<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    if neighbors.is_empty() {
        return Err(Error::Contract(
            "GAT message needs at least one neighbor".into(),
        ));
    }
    let tape = Tape::new();
    let rows = neighbors
        .iter()
        .map(|n| Ok(tape.constant(single_row(n)?)))
        .collect::<Result<Vec<_>>>()?;
    let w = GatWeights {
        w_a: tape.constant(w.w_a.clone()),
        w_b: tape.constant(w.w_b.clone()),
    };
    let (m, alpha) = gat_attend(
        tape.constant(single_row(v_state)?),
        Var::concat_rows(&rows)?,
        &w,
    )?;
    let m = m.value().reshape(v_state.shape())?;
    let alpha = alpha.value().data().to_vec();
    Ok((m, alpha))
}

/// Attention-weighted convex combination of parallel messages for node `h_v`.
/// With one message the gate is not needed and may be `None`.
pub fn combine_parallel<T: Scalar>(
    messages: &[Tensor<T>],
    h_v: &Tensor<T>,
    gate: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match (messages, gate) {
        ([], _) => Err(Error::Contract(
            "combine_parallel needs at least one message".into(),
        )),
        ([only], _) => {
            if only.shape() != h_v.shape() {
                return Err(Error::shape("combine_parallel", h_v.shape(), only.shape()));
            }
            Ok(only.clone())
        }
        (_, None) => Err(Error::Contract(
            "several messages need a gate vector".into(),
        )),
        (_, Some(g)) => {
            let tape = Tape::new();
            let ms = messages
                .iter()
                .map(|m| {
                    if m.shape() != h_v.shape() {
                        return Err(Error::shape("combine_parallel", h_v.shape(), m.shape()));
                    }
                    Ok(tape.constant(single_row(m)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (out, _) = gate_messages(
                tape.constant(single_row(h_v)?),
                &ms,
                tape.constant(g.clone()),
            )?;
            let v = out.value();
            v.reshape(h_v.shape())
        }
    }
}

/// `LN(h + m)`.
pub fn update_node<T: Scalar>(
    h: &Tensor<T>,
    m: &Tensor<T>,
    ln_scale: &Tensor<T>,
    ln_shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    crate::numgrad::layer_norm(&h.add(m)?, ln_scale, ln_shift, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::layer_norm;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn nonlocal_single_node() {
        let h = t(&[1, 2], &[0.3, -0.7]);
        let w = NonLocalWeights {
            w_q: t(&[2, 2], &[1., 2., 3., 4.]),
            w_k: t(&[2, 2], &[0.5, 0., 0., 0.5]),
            w_v: t(&[2, 2], &[1., -1., 2., 0.]),
        };
        let (m, a) = nonlocal_messages(&h, &h, &w).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(m, h.matmul(&w.w_v).unwrap());
    }

    #[test]
    fn nonlocal_zero_query_is_uniform() {
        let fg = t(&[2, 2], &[0.1, 0.2, -0.3, 0.4]);
        let all = t(&[4, 2], &[0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.5]);
        let w = NonLocalWeights {
            w_q: Tensor::zeros(&[2, 2]),
            w_k: t(&[2, 2], &[1., 2., 3., 4.]),
            w_v: t(&[2, 2], &[1., 0.5, -0.5, 2.]),
        };
        let (m, a) = nonlocal_messages(&fg, &all, &w).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let v = all.matmul(&w.w_v).unwrap();
        for j in 0..2 {
            let mean = (0..4).map(|i| v.at(i, j)).sum::<f64>() / 4.0;
            assert!((m.at(0, j) - mean).abs() < 1e-14);
            assert!((m.at(1, j) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn gat_single_neighbor_and_zero_scores() {
        let w = GatWeights {
            w_a: t(&[2, 2], &[1., 0., 0., 1.]),
            w_b: t(&[4], &[0.3, -0.2, 0.9, 0.1]),
        };
        let (_, alpha) = gat_messages(&t(&[2], &[1., 2.]), &[t(&[2], &[3., 4.])], &w).unwrap();
        assert_eq!(alpha, vec![1.0]);

        let w0 = GatWeights {
            w_a: w.w_a.clone(),
            w_b: Tensor::zeros(&[4]),
        };
        let nbrs = [t(&[2], &[1., 0.]), t(&[2], &[0., 1.]), t(&[2], &[2., 2.])];
        let (m, alpha) = gat_messages(&t(&[2], &[1., 2.]), &nbrs, &w0).unwrap();
        assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert!((m.data()[0] - 1.0).abs() < 1e-15 && (m.data()[1] - 1.0).abs() < 1e-15);

        assert!(matches!(
            gat_messages(&t(&[2], &[1., 2.]), &[], &w),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn combine_examples() {
        let h = t(&[2], &[0.5, -0.5]);
        let m1 = t(&[2], &[1., 2.]);
        let m2 = t(&[2], &[3., -4.]);
        assert_eq!(
            combine_parallel(std::slice::from_ref(&m1), &h, None).unwrap(),
            m1
        );
        let g = t(&[4], &[0.2, 0.3, -0.1, 0.7]);
        let same = combine_parallel(&[m1.clone(), m1.clone(), m1.clone()], &h, Some(&g)).unwrap();
        assert!(same.max_abs_diff(&m1).unwrap() < 1e-15);
        let mean = combine_parallel(&[m1, m2], &h, Some(&Tensor::zeros(&[4]))).unwrap();
        assert_eq!(mean.data(), &[2.0, -1.0]);
        assert!(combine_parallel(&[t(&[3], &[1., 2., 3.])], &h, None).is_err());
    }

    #[test]
    fn update_examples() {
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let h = t(&[3], &[0.2, 1.4, -0.6]);
        let out = update_node(&h, &zeros, &ones, &zeros, 1e-5).unwrap();
        assert_eq!(out, layer_norm(&h, &ones, &zeros, 1e-5).unwrap());
        assert_ne!(out, h);

        let shift = t(&[3], &[0.1, 0.2, 0.3]);
        let minus = h.scale(-1.0);
        let out = update_node(&h, &minus, &ones, &shift, 1e-5).unwrap();
        assert_eq!(out, shift);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(4, ReadoutKind::Action { classes: 3 });
        assert!(c.validate().is_ok());
        assert_eq!(c.heads, 4);
        c.tau_c = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.tau_c = 3;
        c.message_fns.clear();
        assert!(c.validate().is_err());
        c.message_fns = vec![MessageFn::Gat, MessageFn::Gat];
        assert!(c.validate().is_err());
        c.message_fns = vec![MessageFn::NonLocal, MessageFn::Gat];
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_check_detects_mismatch() {
        let mut c = ModelConfig::new(3, ReadoutKind::Action { classes: 2 });
        c.d = 4;
        c.heads = 2;
        let p = MessageParams::<Tensor<f64>>::zeros(&c);
        assert!(p.check(&c).is_ok());
        c.heads = 3;
        assert!(matches!(p.check(&c), Err(Error::Config(_))));
    }
}
