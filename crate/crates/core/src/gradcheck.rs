//! Central finite-difference check of the full model gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PreparedClip};
use crate::numgrad::relative_error;
use crate::train::batch_gradients;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so vanishing gradients compare in absolute terms.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    /// Parameter tensor name.
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

fn total_loss(model: &Model<f64>, clips: &[PreparedClip<f64>]) -> Result<f64> {
    clips.iter().map(|c| model.loss(c)).sum()
}

/// Compares the taped gradient of the summed clip loss with
/// `(L(p + h) - L(p - h)) / 2h` for every entry of every parameter.
pub fn gradcheck(
    model: &Model<f64>,
    clips: &[PreparedClip<f64>],
    step: f64,
    floor: f64,
) -> Result<GradcheckReport> {
    if clips.is_empty() {
        return Err(Error::Validation(
            "gradcheck needs at least one clip".into(),
        ));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let (_, analytic) = batch_gradients(model, clips)?;
    let named = model.params.named();
    let mut groups = Vec::with_capacity(named.len());
    for (name, tensor) in &named {
        let grad = &analytic[name];
        let errs: Vec<(f64, f64)> = (0..tensor.numel())
            .into_par_iter()
            .map(|i| {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params.visit_mut(&mut |n, t| {
                        if n == name {
                            t.data_mut()[i] += delta;
                        }
                    });
                    total_loss(&m, clips)
                };
                let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
                let a = grad.data()[i];
                Ok((relative_error(a, numeric, floor), (a - numeric).abs()))
            })
            .collect::<Result<_>>()?;
        groups.push(GroupError {
            group: name.clone(),
            entries: errs.len(),
            max_rel_err: errs.iter().map(|e| e.0).fold(0.0, f64::max),
            max_abs_err: errs.iter().map(|e| e.1).fold(0.0, f64::max),
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        step,
        groups,
        max_rel_err,
    })
}
