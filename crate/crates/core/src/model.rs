//! The full model: input projection, message passing and readout over one clip.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClipRecord, ForegroundLabel, TaskSchema};
use crate::error::{Error, Result};
use crate::graph::{BBox, GraphLayout, KeyframeInput, NodeId};
use crate::heads::{
    action_loss_var, action_probabilities, pair_index, scene_graph_logits, sg_loss_var,
    ActionPrediction, ReadoutKind, ReadoutParams, SceneGraphPrediction,
};
use crate::metrics::{
    frame_ap, mean_recall, recall_at_k, training_samples, DetectionRecord, EmptyRecall,
    GroundTruthBox, RecallMode, Triplet, FRAME_AP_IOU, LABEL_ASSIGN_IOU,
};
use crate::numgrad::{Tape, Var};
use crate::passing::{
    propagate, AttentionTrace, Mapper, MessageParams, ModelConfig, Visitor, VisitorMut,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [10, 20, 50];

/// Message-passing weights plus the task readout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub message: MessageParams<P>,
    pub readout: ReadoutParams<P>,
}

impl<P> ModelParams<P> {
    pub fn visit(&self, f: &mut Visitor<'_, P>) {
        self.message.visit("", f);
        self.readout.visit("readout", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_, P>) {
        self.message.visit_mut("", f);
        self.readout.visit_mut("readout", f);
    }

    pub fn try_map<Q>(&self, f: &mut Mapper<'_, P, Q>) -> Result<ModelParams<Q>> {
        Ok(ModelParams {
            message: self.message.try_map("", f)?,
            readout: self.readout.try_map("readout", f)?,
        })
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Zero weights with unit layer-norm scales.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            message: MessageParams::zeros(config),
            readout: ReadoutParams::zeros(&config.readout, config.d),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = Self::zeros(config).shapes();
        let have = self.shapes();
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
                "parameters do not match config: {first}"
            )));
        }
        Ok(())
    }

    /// Registers every tensor as a named tape parameter.
    pub fn register<'t>(&self, tape: &'t Tape<T>) -> Result<ModelParams<Var<'t, T>>> {
        self.try_map(&mut |n, t| tape.param(n, t.clone()))
    }

    pub fn constants<'t>(&self, tape: &'t Tape<T>) -> Result<ModelParams<Var<'t, T>>> {
        self.try_map(&mut |_, t| Ok(tape.constant(t.clone())))
    }

    /// Builds parameters from a name-to-tensor map laid out for `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut named: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let out = Self::zeros(config).try_map(&mut |n, z| {
            let t = named
                .remove(n)
                .ok_or_else(|| Error::Config(format!("missing parameter `{n}`")))?;
            if t.shape() != z.shape() {
                return Err(Error::Config(format!(
                    "parameter `{n}` has shape {:?}, config needs {:?}",
                    t.shape(),
                    z.shape()
                )));
            }
            Ok(t)
        })?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(out)
    }
}

/// Supervision for the foreground nodes of one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Action {
        /// `n_fg x C` binary labels of the foreground nodes.
        labels: Tensor<T>,
        /// Ground-truth boxes used for Frame AP.
        ground_truth: Vec<(BBox, Vec<usize>)>,
    },
    SceneGraph {
        /// `n_fg x C_obj` one-hot.
        objects: Tensor<T>,
        /// `n_fg(n_fg-1)/2 x R` binary, canonical pair order.
        relations: Tensor<T>,
        object_classes: Vec<usize>,
        triplets: Vec<Triplet>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedKeyframe<T> {
    pub keyframe_id: i64,
    pub position: usize,
    /// Graph node of every foreground box, in box order.
    pub nodes: Vec<NodeId>,
    pub boxes: Vec<BBox>,
    /// `None` for context-only keyframes.
    pub targets: Option<Targets<T>>,
}

/// A clip turned into a graph layout plus per-keyframe supervision.
#[derive(Clone, Debug)]
pub struct PreparedClip<T> {
    pub clip_id: String,
    pub layout: GraphLayout<T>,
    pub keyframes: Vec<PreparedKeyframe<T>>,
}

impl<T: Scalar> PreparedClip<T> {
    pub fn labeled(&self) -> impl Iterator<Item = (&PreparedKeyframe<T>, &Targets<T>)> {
        self.keyframes
            .iter()
            .filter_map(|k| k.targets.as_ref().map(|t| (k, t)))
    }
}

/// Which foreground boxes become graph nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Ground-truth boxes plus detections labeled by IoU assignment.
    Train,
    /// Detections when present, otherwise the ground-truth boxes.
    Eval,
}

/// Errors unless the readout in `config` matches the dataset label schema.
pub fn check_schema(config: &ModelConfig, schema: &TaskSchema) -> Result<()> {
    let ok = match (&config.readout, schema) {
        (ReadoutKind::Action { classes }, TaskSchema::Action { classes: c }) => classes == c,
        (
            ReadoutKind::SceneGraph {
                objects, relations, ..
            },
            TaskSchema::SceneGraph {
                objects: o,
                relations: r,
            },
        ) => objects == o && relations == r,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "model readout {:?} does not match dataset schema {:?}",
            config.readout, schema
        )))
    }
}

fn one_hot_rows<T: Scalar>(rows: &[Vec<usize>], width: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows.len() * width];
    for (i, r) in rows.iter().enumerate() {
        for &c in r {
            data[i * width + c] = T::one();
        }
    }
    Tensor::new(vec![rows.len(), width], data).expect("finite labels")
}

fn action_boxes(
    kf: &crate::dataset::KeyframeRecord,
    split: Split,
) -> Result<(Vec<BBox>, Vec<Vec<usize>>, Vec<(BBox, Vec<usize>)>)> {
    let gt = kf
        .foreground
        .iter()
        .map(|f| match &f.label {
            ForegroundLabel::Actions(a) => Ok((f.bbox, a.clone())),
            ForegroundLabel::Object(_) => {
                Err(Error::Validation("object label in action dataset".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = match split {
        Split::Train => training_samples(&kf.detections, &gt, LABEL_ASSIGN_IOU),
        Split::Eval if kf.detections.is_empty() => gt.clone(),
        Split::Eval => {
            let labels = crate::metrics::assign_labels(&kf.detections, &gt, LABEL_ASSIGN_IOU);
            kf.detections.iter().copied().zip(labels).collect()
        }
    };
    let (boxes, labels) = samples.into_iter().unzip();
    Ok((boxes, labels, gt))
}

/// Builds the graph layout and targets of one clip.
pub fn prepare_clip<T: Scalar>(
    clip: &ClipRecord,
    config: &ModelConfig,
    split: Split,
) -> Result<PreparedClip<T>> {
    let ctx = |e: Error| Error::Validation(format!("clip `{}`: {e}", clip.clip_id));
    let grids: Vec<_> = clip.keyframes.iter().map(|k| k.grid.cast::<T>()).collect();
    let mut boxes = Vec::with_capacity(clip.keyframes.len());
    let mut targets = Vec::with_capacity(clip.keyframes.len());
    for kf in &clip.keyframes {
        match &config.readout {
            ReadoutKind::Action { classes } => {
                let (b, labels, gt) = action_boxes(kf, split).map_err(ctx)?;
                if labels.iter().flatten().any(|&c| c >= *classes) {
                    return Err(ctx(Error::Validation(format!(
                        "keyframe {}: action class out of range",
                        kf.keyframe_id
                    ))));
                }
                targets.push(kf.labeled.then(|| Targets::Action {
                    labels: one_hot_rows(&labels, *classes),
                    ground_truth: gt,
                }));
                boxes.push(b);
            }
            ReadoutKind::SceneGraph {
                objects, relations, ..
            } => {
                let classes = kf
                    .foreground
                    .iter()
                    .map(|f| match f.label {
                        ForegroundLabel::Object(o) if o < *objects => Ok(o),
                        _ => Err(ctx(Error::Validation(format!(
                            "keyframe {}: foreground label invalid for the scene-graph task",
                            kf.keyframe_id
                        )))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let n = classes.len();
                let mut rel = vec![T::zero(); n * n.saturating_sub(1) / 2 * relations];
                let mut triplets = Vec::new();
                for r in &kf.relations {
                    let p = pair_index(r.subject, r.object)
                        .filter(|_| r.subject < n && r.object < n)
                        .ok_or_else(|| {
                            ctx(Error::Validation(format!(
                                "keyframe {}: bad relation",
                                kf.keyframe_id
                            )))
                        })?;
                    for &pred in &r.predicates {
                        if pred >= *relations {
                            return Err(ctx(Error::Validation(format!(
                                "keyframe {}: predicate {pred} out of range",
                                kf.keyframe_id
                            ))));
                        }
                        rel[p * relations + pred] = T::one();
                        triplets.push(Triplet {
                            subject_index: r.subject,
                            object_index: r.object,
                            subject_class: classes[r.subject],
                            object_class: classes[r.object],
                            predicate_class: pred,
                            score: 1.0,
                        });
                    }
                }
                let one_hot: Vec<Vec<usize>> = classes.iter().map(|&c| vec![c]).collect();
                targets.push(kf.labeled.then(|| {
                    Targets::SceneGraph {
                        objects: one_hot_rows(&one_hot, *objects),
                        relations: Tensor::new(vec![n * n.saturating_sub(1) / 2, *relations], rel)
                            .expect("finite"),
                        object_classes: classes.clone(),
                        triplets,
                    }
                }));
                boxes.push(kf.foreground.iter().map(|f| f.bbox).collect());
            }
        }
    }
    let inputs: Vec<KeyframeInput<'_, T>> = clip
        .keyframes
        .iter()
        .zip(&grids)
        .zip(&boxes)
        .map(|((kf, grid), fg)| KeyframeInput {
            grid,
            foreground: fg,
            proposals: &kf.proposals,
        })
        .collect();
    let layout = GraphLayout::build(&inputs, config.tau_c, config.tau_s).map_err(ctx)?;
    if layout.features().cols() != config.channels {
        return Err(ctx(Error::Validation(format!(
            "grids have {} channels, config expects {}",
            layout.features().cols(),
            config.channels
        ))));
    }
    let mut keyframes = Vec::new();
    for group in layout.keyframes() {
        let kf = &clip.keyframes[group.position];
        keyframes.push(PreparedKeyframe {
            keyframe_id: kf.keyframe_id,
            position: group.position,
            nodes: group.foreground.clone(),
            boxes: boxes[group.position].clone(),
            targets: targets[group.position].take(),
        });
    }
    Ok(PreparedClip {
        clip_id: clip.clip_id.clone(),
        layout,
        keyframes,
    })
}

/// Prepares every clip, in order, in parallel.
pub fn prepare_clips<T: Scalar>(
    clips: &[ClipRecord],
    config: &ModelConfig,
    split: Split,
) -> Result<Vec<PreparedClip<T>>> {
    clips
        .par_iter()
        .map(|c| prepare_clip(c, config, split))
        .collect()
}

/// Readout output for one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyframeOutput<T> {
    Action(Vec<ActionPrediction>),
    SceneGraph(SceneGraphPrediction<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframePrediction<T> {
    pub keyframe_id: i64,
    pub output: KeyframeOutput<T>,
}

#[derive(Clone, Debug)]
pub struct ClipPrediction<T> {
    pub clip_id: String,
    /// `node_count x d` final states.
    pub states: Tensor<T>,
    pub trace: AttentionTrace,
    pub keyframes: Vec<KeyframePrediction<T>>,
}

/// Configuration plus concrete parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// Initial states then message passing; returns final `node_count x d` states.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &ModelParams<Var<'t, T>>,
        clip: &PreparedClip<T>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var<'t, T>> {
        let features = tape.constant(clip.layout.features().clone());
        let h0 = params.message.input.apply(features)?;
        propagate(&clip.layout, h0, &params.message, &self.config, trace)
    }

    /// Per-clip loss on the tape, `None` when no keyframe is labeled.
    /// Action: mean BCE over every labeled foreground node. Scene graph:
    /// mean over labeled keyframes of the composite loss.
    pub fn clip_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &ModelParams<Var<'t, T>>,
        clip: &PreparedClip<T>,
    ) -> Result<Option<Var<'t, T>>> {
        if clip.labeled().next().is_none() {
            return Ok(None);
        }
        let states = self.forward(tape, params, clip, None)?;
        match (&params.readout, &self.config.readout) {
            (ReadoutParams::Action(lin), _) => {
                let mut nodes = Vec::new();
                let mut labels = Vec::new();
                for (kf, t) in clip.labeled() {
                    let Targets::Action { labels: l, .. } = t else {
                        return Err(Error::Contract(
                            "action model with scene-graph targets".into(),
                        ));
                    };
                    nodes.extend_from_slice(&kf.nodes);
                    labels.extend_from_slice(l.data());
                }
                let classes = lin.b.shape()[0];
                let labels = Tensor::new(vec![nodes.len(), classes], labels)?;
                let logits = lin.apply(states.gather_rows(&nodes)?)?;
                action_loss_var(logits, &labels).map(Some)
            }
            (
                ReadoutParams::SceneGraph { object, relation },
                ReadoutKind::SceneGraph { lambda, .. },
            ) => {
                let mut total: Option<Var<'t, T>> = None;
                let mut count = 0usize;
                for (kf, t) in clip.labeled() {
                    let Targets::SceneGraph {
                        objects, relations, ..
                    } = t
                    else {
                        return Err(Error::Contract(
                            "scene-graph model with action targets".into(),
                        ));
                    };
                    let (o, r) =
                        scene_graph_logits(states.gather_rows(&kf.nodes)?, object, relation)?;
                    let l = sg_loss_var(o, r, objects, relations, T::lit(*lambda))?;
                    total = Some(match total {
                        Some(acc) => acc.add(l)?,
                        None => l,
                    });
                    count += 1;
                }
                let total = total.expect("labeled keyframe present");
                total.scale(T::one() / T::lit(count as f64)).map(Some)
            }
            _ => Err(Error::Contract(
                "readout parameters do not match config".into(),
            )),
        }
    }

    /// Clip loss and its gradient for every parameter (zeros when unlabeled).
    pub fn loss_and_grad(
        &self,
        clip: &PreparedClip<T>,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
        let tape = Tape::new();
        let vars = self.params.register(&tape)?;
        match self.clip_loss(&tape, &vars, clip)? {
            Some(loss) => {
                let value = loss.value().value();
                Ok((value, tape.grad(loss)?))
            }
            None => Ok((
                T::zero(),
                self.params
                    .named()
                    .into_iter()
                    .map(|(n, t)| (n, Tensor::zeros(t.shape())))
                    .collect(),
            )),
        }
    }

    pub fn loss(&self, clip: &PreparedClip<T>) -> Result<T> {
        let tape = Tape::new();
        let vars = self.params.constants(&tape)?;
        Ok(self
            .clip_loss(&tape, &vars, clip)?
            .map(|l| l.value().value())
            .unwrap_or_else(T::zero))
    }

    /// Final states, attention trace and readout for every keyframe with
    /// foreground boxes.
    pub fn predict(&self, clip: &PreparedClip<T>) -> Result<ClipPrediction<T>> {
        let tape = Tape::new();
        let vars = self.params.constants(&tape)?;
        let mut trace = AttentionTrace::default();
        let states = self.forward(&tape, &vars, clip, Some(&mut trace))?;
        let states = (*states.value()).clone();
        let mut keyframes = Vec::with_capacity(clip.keyframes.len());
        for kf in &clip.keyframes {
            let rows: Vec<Vec<T>> = kf.nodes.iter().map(|&v| states.row(v).to_vec()).collect();
            let fg = Tensor::from_rows(&rows)?;
            let output = match &self.params.readout {
                ReadoutParams::Action(lin) => {
                    let logits = fg.matmul(&lin.w)?;
                    let preds = kf
                        .boxes
                        .iter()
                        .enumerate()
                        .map(|(i, b)| {
                            let row: Vec<T> = logits
                                .row(i)
                                .iter()
                                .zip(lin.b.data())
                                .map(|(&x, &b)| x + b)
                                .collect();
                            ActionPrediction {
                                bbox: *b,
                                scores: action_probabilities(&Tensor::vector(row)),
                            }
                        })
                        .collect();
                    KeyframeOutput::Action(preds)
                }
                ReadoutParams::SceneGraph { object, relation } => {
                    KeyframeOutput::SceneGraph(crate::heads::sg_readout(&fg, object, relation)?)
                }
            };
            keyframes.push(KeyframePrediction {
                keyframe_id: kf.keyframe_id,
                output,
            });
        }
        Ok(ClipPrediction {
            clip_id: clip.clip_id.clone(),
            states,
            trace,
            keyframes,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .try_map(&mut |_, t| Ok(t.cast()))
                .expect("cast is infallible"),
        }
    }
}

/// Evaluation summary. `metrics` keys are stable and sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub clips: usize,
    pub keyframes: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "task={}\nclips={}\nkeyframes={}\n",
            self.task, self.clips, self.keyframes
        );
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v:.6}\n"));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        self.metrics
            .get(key)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("metric `{key}`")))
    }
}

/// Loss, then Frame mAP (action) or Recall@{10,20,50} in SGCls and PredCls
/// (scene graph), over the labeled keyframes of `clips`.
pub fn evaluate<T: Scalar>(model: &Model<T>, clips: &[PreparedClip<T>]) -> Result<EvalReport> {
    let outputs: Vec<(T, ClipPrediction<T>)> = clips
        .par_iter()
        .map(|c| Ok((model.loss(c)?, model.predict(c)?)))
        .collect::<Result<_>>()?;
    let mut metrics = BTreeMap::new();
    let labeled: usize = clips.iter().map(|c| c.labeled().count()).sum();
    let with_loss = clips
        .iter()
        .filter(|c| c.labeled().next().is_some())
        .count();
    let loss_sum: f64 = outputs.iter().map(|(l, _)| l.to_f64_lossy()).sum();
    metrics.insert("loss".to_string(), loss_sum / with_loss.max(1) as f64);
    match &model.config.readout {
        ReadoutKind::Action { classes } => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for (clip, (_, out)) in clips.iter().zip(&outputs) {
                for (kf, kp) in clip.keyframes.iter().zip(&out.keyframes) {
                    let (Some(Targets::Action { ground_truth, .. }), KeyframeOutput::Action(ap)) =
                        (&kf.targets, &kp.output)
                    else {
                        continue;
                    };
                    for p in ap {
                        for (class, &score) in p.scores.iter().enumerate() {
                            preds.push(DetectionRecord {
                                clip_id: clip.clip_id.clone(),
                                keyframe_id: kf.keyframe_id,
                                bbox: p.bbox,
                                class,
                                score,
                            });
                        }
                    }
                    for (b, labels) in ground_truth {
                        for &class in labels {
                            gts.push(GroundTruthBox {
                                clip_id: clip.clip_id.clone(),
                                keyframe_id: kf.keyframe_id,
                                bbox: *b,
                                class,
                            });
                        }
                    }
                }
            }
            let report = frame_ap(&preds, &gts, *classes, FRAME_AP_IOU)?;
            metrics.insert("frame_map".to_string(), report.mean_ap);
            for (c, ap) in report.per_class.iter().enumerate() {
                if let Some(ap) = ap {
                    metrics.insert(format!("ap.class{c:02}"), *ap);
                }
            }
        }
        ReadoutKind::SceneGraph { .. } => {
            for (mode, name) in [
                (RecallMode::SgCls, "sgcls"),
                (RecallMode::PredCls, "predcls"),
            ] {
                for k in RECALL_KS {
                    let mut per_kf = Vec::new();
                    for (clip, (_, out)) in clips.iter().zip(&outputs) {
                        for (kf, kp) in clip.keyframes.iter().zip(&out.keyframes) {
                            let (
                                Some(Targets::SceneGraph {
                                    object_classes,
                                    triplets,
                                    ..
                                }),
                                KeyframeOutput::SceneGraph(sg),
                            ) = (&kf.targets, &kp.output)
                            else {
                                continue;
                            };
                            per_kf.push(recall_at_k(
                                sg,
                                object_classes,
                                triplets,
                                k,
                                mode,
                                EmptyRecall::One,
                            )?);
                        }
                    }
                    if let Some(r) = mean_recall(&per_kf) {
                        metrics.insert(format!("{name}.r@{k}"), r);
                    }
                }
            }
        }
    }
    Ok(EvalReport {
        task: model.config.readout.task_name().to_string(),
        clips: clips.len(),
        keyframes: labeled,
        metrics,
    })
}
