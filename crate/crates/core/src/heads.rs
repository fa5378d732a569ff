//! Readouts and losses for action detection and scene-graph classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BBox;
use crate::numgrad::{sigmoid, Tape, Var};
use crate::passing::{Linear, Mapper, Visitor, VisitorMut};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Which readout sits on top of the foreground states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ReadoutKind {
    Action {
        classes: usize,
    },
    SceneGraph {
        objects: usize,
        relations: usize,
        /// Weight of the object loss.
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
}

impl ReadoutKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReadoutKind::Action { classes } if classes == 0 => {
                Err(Error::Config("action readout needs >= 1 class".into()))
            }
            ReadoutKind::SceneGraph {
                objects,
                relations,
                lambda,
            } => {
                if objects == 0 || relations == 0 {
                    return Err(Error::Config(
                        "scene-graph readout needs >= 1 object and relation class".into(),
                    ));
                }
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Config(format!(
                        "lambda must be finite and >= 0, got {lambda}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            ReadoutKind::Action { .. } => "action",
            ReadoutKind::SceneGraph { .. } => "scenegraph",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReadoutParams<P> {
    Action(Linear<P>),
    SceneGraph {
        object: Linear<P>,
        /// Linear layer over `[h_i || h_j]` (`2d x R`).
        relation: Linear<P>,
    },
}

impl<P> ReadoutParams<P> {
    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, P>) {
        match self {
            ReadoutParams::Action(l) => l.visit(&format!("{prefix}.action"), f),
            ReadoutParams::SceneGraph { object, relation } => {
                object.visit(&format!("{prefix}.object"), f);
                relation.visit(&format!("{prefix}.relation"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, P>) {
        match self {
            ReadoutParams::Action(l) => l.visit_mut(&format!("{prefix}.action"), f),
            ReadoutParams::SceneGraph { object, relation } => {
                object.visit_mut(&format!("{prefix}.object"), f);
                relation.visit_mut(&format!("{prefix}.relation"), f);
            }
        }
    }

    pub fn try_map<Q>(&self, prefix: &str, f: &mut Mapper<'_, P, Q>) -> Result<ReadoutParams<Q>> {
        Ok(match self {
            ReadoutParams::Action(l) => {
                ReadoutParams::Action(l.try_map(&format!("{prefix}.action"), f)?)
            }
            ReadoutParams::SceneGraph { object, relation } => ReadoutParams::SceneGraph {
                object: object.try_map(&format!("{prefix}.object"), f)?,
                relation: relation.try_map(&format!("{prefix}.relation"), f)?,
            },
        })
    }
}

impl<T: Scalar> ReadoutParams<Tensor<T>> {
    pub fn zeros(kind: &ReadoutKind, d: usize) -> Self {
        let lin = |i: usize, o: usize| Linear {
            w: Tensor::zeros(&[i, o]),
            b: Tensor::zeros(&[o]),
        };
        match *kind {
            ReadoutKind::Action { classes } => ReadoutParams::Action(lin(d, classes)),
            ReadoutKind::SceneGraph {
                objects, relations, ..
            } => ReadoutParams::SceneGraph {
                object: lin(d, objects),
                relation: lin(2 * d, relations),
            },
        }
    }
}

/// Canonical unordered pairs `(i, j)` with `i > j`, ordered by `i` then `j`.
pub fn canonical_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

/// Row of `(i, j)` (either order) in the canonical pair list.
pub fn pair_index(i: usize, j: usize) -> Option<usize> {
    if i == j {
        return None;
    }
    let (hi, lo) = if i > j { (i, j) } else { (j, i) };
    Some(hi * (hi - 1) / 2 + lo)
}

/// Object logits (`N x C_obj`) and relation logits for every canonical pair.
pub fn scene_graph_logits<'t, T: Scalar>(
    fg: Var<'t, T>,
    object: &Linear<Var<'t, T>>,
    relation: &Linear<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let n = fg.shape()[0];
    let (hi, lo): (Vec<usize>, Vec<usize>) = canonical_pairs(n).into_iter().unzip();
    let pair_states = Var::concat_cols(&[fg.gather_rows(&hi)?, fg.gather_rows(&lo)?])?;
    Ok((object.apply(fg)?, relation.apply(pair_states)?))
}

/// Mean binary cross-entropy over classes, in stable logit form.
pub fn action_loss_var<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &Tensor<T>,
) -> Result<Var<'t, T>> {
    check_binary(labels, "action labels")?;
    logits.sigmoid_xent_mean(labels)
}

/// `lambda * L_object + L_rel`.
pub fn sg_loss_var<'t, T: Scalar>(
    object_logits: Var<'t, T>,
    relation_logits: Var<'t, T>,
    objects: &Tensor<T>,
    relations: &Tensor<T>,
    lambda: T,
) -> Result<Var<'t, T>> {
    check_one_hot(objects)?;
    check_binary(relations, "relation labels")?;
    let n = objects.rows();
    if relations.rows() != n * n.saturating_sub(1) / 2 {
        return Err(Error::shape(
            "relation labels",
            relations.shape(),
            &[n * n.saturating_sub(1) / 2],
        ));
    }
    let obj = object_logits.softmax_xent_mean(objects)?.scale(lambda)?;
    let rel = relation_logits.sigmoid_xent_mean(relations)?;
    obj.add(rel)
}

fn check_binary<T: Scalar>(labels: &Tensor<T>, what: &str) -> Result<()> {
    if labels
        .data()
        .iter()
        .all(|&x| x == T::zero() || x == T::one())
    {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} must be 0 or 1")))
    }
}

fn check_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    check_binary(y, "object labels")?;
    for i in 0..y.rows() {
        if y.row(i).iter().filter(|&&x| x == T::one()).count() != 1 {
            return Err(Error::Validation(format!(
                "object label row {i} is not one-hot"
            )));
        }
    }
    Ok(())
}

/// Per-class probabilities for one foreground box.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPrediction {
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

/// Logits for the objects of one keyframe and their unordered pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraphPrediction<T> {
    /// `N x C_obj`.
    pub object_logits: Tensor<T>,
    /// `N(N-1)/2 x R`, rows in [`canonical_pairs`] order.
    pub relation_logits: Tensor<T>,
}

impl<T: Scalar> SceneGraphPrediction<T> {
    pub fn num_objects(&self) -> usize {
        self.object_logits.rows()
    }

    /// Logits for the pair `{i, j}`; `None` when `i == j`.
    pub fn relation(&self, i: usize, j: usize) -> Option<&[T]> {
        let n = self.num_objects();
        if i >= n || j >= n {
            return None;
        }
        pair_index(i, j).map(|p| self.relation_logits.row(p))
    }
}

/// `W^T h + b`.
pub fn action_readout<T: Scalar>(
    fg_state: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let lin = Linear {
        w: tape.constant(w.clone()),
        b: tape.constant(b.clone()),
    };
    let row = tape.constant(fg_state.reshape(&[1, fg_state.numel()])?);
    let out = lin.apply(row)?;
    let v = out.value();
    Ok(Tensor::vector(v.data().to_vec()))
}

pub fn action_probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .iter()
        .map(|&x| sigmoid(x).to_f64_lossy())
        .collect()
}

/// `-(1/C) sum_i [y_i log s(x_i) + (1-y_i) log(1-s(x_i))]`.
pub fn action_loss<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    let tape = Tape::new();
    let l = action_loss_var(tape.constant(logits.clone()), labels)?;
    let v = l.value().value();
    Ok(v)
}

pub fn sg_readout<T: Scalar>(
    fg_states: &Tensor<T>,
    object: &Linear<Tensor<T>>,
    relation: &Linear<Tensor<T>>,
) -> Result<SceneGraphPrediction<T>> {
    if fg_states.rows() == 0 {
        return Err(Error::Contract("scene-graph readout needs N >= 1".into()));
    }
    let tape = Tape::new();
    let c = |l: &Linear<Tensor<T>>| Linear {
        w: tape.constant(l.w.clone()),
        b: tape.constant(l.b.clone()),
    };
    let (o, r) = scene_graph_logits(tape.constant(fg_states.clone()), &c(object), &c(relation))?;
    let (o, r) = ((*o.value()).clone(), (*r.value()).clone());
    Ok(SceneGraphPrediction {
        object_logits: o,
        relation_logits: r,
    })
}

/// Scene-graph training loss; `objects` one-hot `N x C_obj`, `relations`
/// binary `N(N-1)/2 x R` in canonical pair order.
pub fn sg_loss<T: Scalar>(
    object_logits: &Tensor<T>,
    relation_logits: &Tensor<T>,
    objects: &Tensor<T>,
    relations: &Tensor<T>,
    lambda: T,
) -> Result<T> {
    let tape = Tape::new();
    let l = sg_loss_var(
        tape.constant(object_logits.clone()),
        tape.constant(relation_logits.clone()),
        objects,
        relations,
        lambda,
    )?;
    let v = l.value().value();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn action_readout_examples() {
        let h = t(&[2], &[0.5, -1.0]);
        let zero = action_readout(&h, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(zero.data(), &[0.0; 3]);
        assert_eq!(action_probabilities(&zero), vec![0.5; 3]);

        let b = t(&[3], &[0.1, 0.2, 0.3]);
        let w = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(action_readout(&Tensor::zeros(&[2]), &w, &b).unwrap(), b);

        // hand 2x2: W^T h + b, W = [[1,2],[3,4]], h = [1,1], b = [0.5, -0.5]
        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        let out = action_readout(&t(&[2], &[1., 1.]), &w, &t(&[2], &[0.5, -0.5])).unwrap();
        assert_eq!(out.data(), &[4.5, 5.5]);
    }

    #[test]
    fn action_loss_examples() {
        let l = action_loss(&Tensor::zeros(&[4]), &t(&[4], &[1., 0., 1., 1.])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = action_loss(&t(&[3], &[20.; 3]), &Tensor::ones(&[3])).unwrap();
        assert!((0.0..1e-8).contains(&l));
        let l = action_loss(&t(&[2], &[1., -1.]), &t(&[2], &[1., 0.])).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15, "{l} vs {expect}");
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(action_loss(&t(&[1], &[0.]), &t(&[1], &[0.5])).is_err());
    }

    #[test]
    fn sg_readout_counts() {
        let d = 2;
        let obj = Linear {
            w: Tensor::zeros(&[d, 3]),
            b: Tensor::zeros(&[3]),
        };
        let rel = Linear {
            w: Tensor::zeros(&[2 * d, 4]),
            b: Tensor::zeros(&[4]),
        };
        let p = sg_readout(&t(&[1, 2], &[1., 2.]), &obj, &rel).unwrap();
        assert_eq!(p.object_logits.shape(), &[1, 3]);
        assert_eq!(p.relation_logits.rows(), 0);
        let p = sg_readout(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), &obj, &rel).unwrap();
        assert_eq!(p.relation_logits.rows(), 3);
        assert!(p.object_logits.data().iter().all(|&x| x == 0.0));
        assert!(p.relation_logits.data().iter().all(|&x| x == 0.0));
        assert!(p.relation(1, 1).is_none());
        assert_eq!(p.relation(0, 2), p.relation(2, 0));
    }

    #[test]
    fn pair_index_matches_canonical_order() {
        for (k, (i, j)) in canonical_pairs(6).into_iter().enumerate() {
            assert_eq!(pair_index(i, j), Some(k));
            assert_eq!(pair_index(j, i), Some(k));
        }
    }

    #[test]
    fn sg_loss_trivial_cases() {
        let y = t(&[2, 5], &[1., 0., 0., 0., 0., 0., 0., 0., 1., 0.]);
        let z = Tensor::zeros(&[1, 3]);
        let rel = Tensor::zeros(&[1, 3]);
        let obj = Tensor::filled(&[2, 5], 0.7);
        let l = sg_loss(&obj, &rel, &y, &z, 1.0).unwrap();
        assert!((l - (5f64.ln() + 2f64.ln())).abs() < 1e-14);
        let only_rel = sg_loss(&obj, &rel, &y, &z, 0.0).unwrap();
        assert!((only_rel - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sg_loss_rejects_non_one_hot() {
        let y = t(&[1, 3], &[1., 1., 0.]);
        let r = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            sg_loss(&Tensor::zeros(&[1, 3]), &r, &y, &r, 0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn readout_kind_validation() {
        assert!(ReadoutKind::Action { classes: 0 }.validate().is_err());
        let sg = ReadoutKind::SceneGraph {
            objects: 35,
            relations: 25,
            lambda: DEFAULT_LAMBDA,
        };
        assert!(sg.validate().is_ok());
        let json = serde_json::to_string(&sg).unwrap();
        let back: ReadoutKind = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sg);
    }
}
