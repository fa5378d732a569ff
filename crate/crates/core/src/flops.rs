//! Closed-form multiply-add counts for one forward pass of the graph model.
//!
//! Counts cover matrix products only (layer norm, softmax and ReLU are
//! elementwise and left out). Each keyframe has `n` foreground and `m`
//! context nodes; in the temporal phase every foreground node attends over
//! the `n (tau_c - 1)` foreground nodes of the other keyframes, so the count
//! grows linearly with the keyframes processed and never sees `tau_s`.

use serde::{Deserialize, Serialize};

use crate::heads::ReadoutKind;
use crate::passing::{MessageFn, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneShape {
    pub n_fg: u64,
    pub n_context: u64,
    pub keyframes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub projection: u64,
    pub nonlocal_spatial: u64,
    pub nonlocal_temporal: u64,
    pub gat_spatial: u64,
    pub gat_temporal: u64,
    pub combine: u64,
    pub readout: u64,
    pub total: u64,
}

impl FlopReport {
    pub fn nonlocal(&self) -> u64 {
        self.nonlocal_spatial + self.nonlocal_temporal
    }

    pub fn gat(&self) -> u64 {
        self.gat_spatial + self.gat_temporal
    }

    pub fn temporal(&self) -> u64 {
        self.nonlocal_temporal + self.gat_temporal
    }
}

/// Q for `q` queries, K and V for `k` neighbors, scores and aggregation.
fn nonlocal(q: u64, k: u64, d: u64) -> u64 {
    q * d * d + 2 * k * d * d + 2 * q * k * d
}

/// Split score vector on both sides, `W_a` on neighbors, aggregation.
fn gat(q: u64, k: u64, d: u64) -> u64 {
    q * d + k * d + k * d * d + q * k * d
}

pub fn estimate_flops(config: &ModelConfig, shape: SceneShape) -> FlopReport {
    let d = config.d as u64;
    let n = shape.n_fg;
    let kf = shape.keyframes;
    let heads = config.heads as u64;
    let iters = config.iterations as u64;
    let spatial_k = n + shape.n_context;
    let temporal_k = n * (config.tau_c as u64 - 1);
    let phase_count = if temporal_k > 0 { 2 } else { 1 };

    let mut r = FlopReport {
        projection: kf * spatial_k * config.channels as u64 * d,
        ..FlopReport::default()
    };
    let per = |f: fn(u64, u64, u64) -> u64, k: u64| kf * iters * heads * f(n, k, d);
    for f in &config.message_fns {
        match f {
            MessageFn::NonLocal => {
                r.nonlocal_spatial = per(nonlocal, spatial_k);
                r.nonlocal_temporal = if temporal_k > 0 {
                    per(nonlocal, temporal_k)
                } else {
                    0
                };
            }
            MessageFn::Gat => {
                r.gat_spatial = per(gat, spatial_k);
                r.gat_temporal = if temporal_k > 0 {
                    per(gat, temporal_k)
                } else {
                    0
                };
            }
        }
    }
    let messages = config.message_count() as u64;
    if messages > 1 {
        // g . h once, g . m_k and the weighted sum per message.
        r.combine = kf * iters * phase_count * n * (d + 2 * messages * d);
    }
    r.readout = kf
        * match config.readout {
            ReadoutKind::Action { classes } => n * d * classes as u64,
            ReadoutKind::SceneGraph {
                objects, relations, ..
            } => n * d * objects as u64 + n * n.saturating_sub(1) / 2 * 2 * d * relations as u64,
        };
    r.total = r.projection + r.nonlocal() + r.gat() + r.combine + r.readout;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::new(4, ReadoutKind::Action { classes: 3 });
        c.d = 4;
        c.heads = 1;
        c
    }

    #[test]
    fn tiny_config_by_hand() {
        let shape = SceneShape {
            n_fg: 2,
            n_context: 3,
            keyframes: 1,
        };
        let r = estimate_flops(&tiny(), shape);
        // 5 nodes x (4 -> 4) projection.
        assert_eq!(r.projection, 80);
        // w_b halves 2*4 + 5*4, W_a on 5 neighbors 5*16, aggregation 2*5*4.
        assert_eq!(r.gat_spatial, 148);
        // Temporal neighbors: 2 * (3 - 1) = 4.
        assert_eq!(r.gat_temporal, 8 + 16 + 64 + 32);
        assert_eq!(r.combine, 0);
        assert_eq!(r.readout, 24);
        assert_eq!(r.total, 372);
    }

    #[test]
    fn linear_in_keyframes_and_blind_to_stride() {
        let mut cfg = tiny();
        cfg.message_fns = vec![MessageFn::NonLocal, MessageFn::Gat];
        let one = estimate_flops(
            &cfg,
            SceneShape {
                n_fg: 3,
                n_context: 17,
                keyframes: 4,
            },
        );
        let two = estimate_flops(
            &cfg,
            SceneShape {
                n_fg: 3,
                n_context: 17,
                keyframes: 8,
            },
        );
        assert_eq!(two.temporal(), 2 * one.temporal());
        assert_eq!(two.total, 2 * one.total);
        cfg.tau_s = 5;
        let strided = estimate_flops(
            &cfg,
            SceneShape {
                n_fg: 3,
                n_context: 17,
                keyframes: 4,
            },
        );
        assert_eq!(strided, one);
    }
}
