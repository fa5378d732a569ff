//! Seeded synthetic datasets.
//!
//! Grids are `2 x 4 x 4 x 8`. Boxes occupy one 2x2-cell quadrant each, so
//! pooling a box reads exactly its own cells. Every cell carries small uniform
//! noise; foreground and proposal cells additionally carry a task signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    ClipRecord, Dataset, ForegroundLabel, ForegroundRecord, KeyframeRecord, RelationRecord,
    TaskSchema,
};
use crate::graph::{BBox, BoxRole, FeatureGrid};
use crate::tensor::Tensor;

pub const GRID_T: usize = 2;
pub const GRID_H: usize = 4;
pub const GRID_W: usize = 4;
pub const CHANNELS: usize = 8;
const NOISE: f32 = 0.1;
/// Channel marking proposal (object) boxes.
const PROPOSAL_CHANNEL: usize = 6;
/// Channel marking actor boxes.
const ACTOR_CHANNEL: usize = 7;

fn quadrant_box(kf: i64, q: usize, role: BoxRole) -> BBox {
    let (r, c) = (q / 2, q % 2);
    let (x, y) = (c as f64 * 0.5, r as f64 * 0.5);
    BBox::new(kf, [x, y, x + 0.5, y + 0.5], role).expect("quadrant boxes are valid")
}

struct GridBuilder {
    data: Vec<f32>,
}

impl GridBuilder {
    fn noise(rng: &mut ChaCha8Rng) -> Self {
        let n = GRID_T * GRID_H * GRID_W * CHANNELS;
        Self {
            data: (0..n).map(|_| rng.gen_range(-NOISE..=NOISE)).collect(),
        }
    }

    /// Adds `signal` to every cell of quadrant `q` at every time step.
    fn paint(&mut self, q: usize, signal: &[(usize, f32)]) {
        let (r0, c0) = ((q / 2) * 2, (q % 2) * 2);
        for t in 0..GRID_T {
            for r in r0..r0 + 2 {
                for c in c0..c0 + 2 {
                    let base = ((t * GRID_H + r) * GRID_W + c) * CHANNELS;
                    for &(ch, v) in signal {
                        self.data[base + ch] += v;
                    }
                }
            }
        }
    }

    fn build(self, kf: i64) -> FeatureGrid<f32> {
        let t =
            Tensor::new(vec![GRID_T, GRID_H, GRID_W, CHANNELS], self.data).expect("finite noise");
        FeatureGrid::new(t, kf).expect("valid grid")
    }
}

fn keyframe(
    clip_id: &str,
    kf: i64,
    grid: FeatureGrid<f32>,
    labeled: bool,
    foreground: Vec<ForegroundRecord>,
    proposals: Vec<BBox>,
    relations: Vec<RelationRecord>,
) -> KeyframeRecord {
    KeyframeRecord {
        keyframe_id: kf,
        grid_path: format!("grids/{clip_id}_{kf}.bin"),
        grid,
        labeled,
        foreground,
        detections: Vec::new(),
        proposals,
        relations,
    }
}

fn proposal(rng: &mut ChaCha8Rng, g: &mut GridBuilder, kf: i64, q: usize) -> BBox {
    g.paint(
        q,
        &[(PROPOSAL_CHANNEL, 1.0), (5, rng.gen_range(-0.5..=0.5))],
    );
    quadrant_box(kf, q, BoxRole::Proposal)
}

/// `clips` clips of three keyframes, each with one or two actors whose
/// features carry `+1`/`-1` per action class (`classes <= 5`).
pub fn action_dataset(seed: u64, clips: usize, classes: usize) -> Dataset {
    assert!(
        (1..=5).contains(&classes),
        "action synth supports 1..=5 classes"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clips);
    for ci in 0..clips {
        let clip_id = format!("action{ci:04}");
        let mut keyframes = Vec::new();
        for kf in 0..3i64 {
            let mut quads = [0, 1, 2, 3];
            quads.shuffle(&mut rng);
            let actors = rng.gen_range(1..=2);
            let mut g = GridBuilder::noise(&mut rng);
            let mut fg = Vec::new();
            for &q in &quads[..actors] {
                let mut labels: Vec<usize> = (0..classes).filter(|_| rng.gen_bool(0.5)).collect();
                if labels.is_empty() {
                    labels.push(rng.gen_range(0..classes));
                }
                let mut signal: Vec<(usize, f32)> = (0..classes)
                    .map(|k| (k, if labels.contains(&k) { 1.0 } else { -1.0 }))
                    .collect();
                signal.push((ACTOR_CHANNEL, 1.0));
                g.paint(q, &signal);
                fg.push(ForegroundRecord {
                    bbox: quadrant_box(kf, q, BoxRole::Foreground),
                    label: ForegroundLabel::Actions(labels),
                });
            }
            let props = vec![proposal(&mut rng, &mut g, kf, quads[actors])];
            keyframes.push(keyframe(
                &clip_id,
                kf,
                g.build(kf),
                true,
                fg,
                props,
                Vec::new(),
            ));
        }
        out.push(ClipRecord { clip_id, keyframes });
    }
    Dataset {
        schema: TaskSchema::Action { classes },
        clips: out,
    }
}

/// `2 tau_s + 1` keyframes with one actor each, in a shared quadrant. The
/// actors at the first and last keyframes carry a sign `s` in channel 0; the
/// center actor carries none and is the only labeled one: class 0 when both
/// signs are `+1`, class 1 when both are `-1`, no action otherwise.
pub fn temporal_dataset(seed: u64, clips: usize, tau_s: usize) -> Dataset {
    assert!(tau_s >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clips);
    let len = 2 * tau_s + 1;
    for ci in 0..clips {
        let clip_id = format!("temporal{ci:04}");
        let q = rng.gen_range(0..4);
        let p = (q + rng.gen_range(1..4)) % 4;
        let before: f32 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let after: f32 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let labels = match (before > 0.0, after > 0.0) {
            (true, true) => vec![0],
            (false, false) => vec![1],
            _ => vec![],
        };
        let mut keyframes = Vec::with_capacity(len);
        for pos in 0..len {
            let kf = pos as i64;
            let mut g = GridBuilder::noise(&mut rng);
            let sign = match pos {
                0 => before,
                _ if pos == len - 1 => after,
                _ => 0.0,
            };
            g.paint(q, &[(0, sign), (ACTOR_CHANNEL, 1.0)]);
            let center = pos == tau_s;
            let fg = vec![ForegroundRecord {
                bbox: quadrant_box(kf, q, BoxRole::Foreground),
                label: ForegroundLabel::Actions(if center { labels.clone() } else { Vec::new() }),
            }];
            let props = vec![proposal(&mut rng, &mut g, kf, p)];
            keyframes.push(keyframe(
                &clip_id,
                kf,
                g.build(kf),
                center,
                fg,
                props,
                Vec::new(),
            ));
        }
        out.push(ClipRecord { clip_id, keyframes });
    }
    Dataset {
        schema: TaskSchema::Action { classes: 2 },
        clips: out,
    }
}

/// Two labeled keyframes per clip with two or three objects whose class is a
/// one-hot code in channels `0..objects` (`objects <= 5`). Every pair holds
/// predicate `(c_i + c_j) % relations`.
pub fn scene_graph_dataset(seed: u64, clips: usize, objects: usize, relations: usize) -> Dataset {
    assert!((1..=5).contains(&objects) && relations >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clips);
    for ci in 0..clips {
        let clip_id = format!("scene{ci:04}");
        let mut keyframes = Vec::new();
        for kf in 0..2i64 {
            let mut quads = [0, 1, 2, 3];
            quads.shuffle(&mut rng);
            let n = rng.gen_range(2..=3);
            let mut g = GridBuilder::noise(&mut rng);
            let mut fg = Vec::new();
            let mut classes = Vec::new();
            for &q in &quads[..n] {
                let c = rng.gen_range(0..objects);
                g.paint(q, &[(c, 1.0), (ACTOR_CHANNEL, 1.0)]);
                classes.push(c);
                fg.push(ForegroundRecord {
                    bbox: quadrant_box(kf, q, BoxRole::Foreground),
                    label: ForegroundLabel::Object(c),
                });
            }
            let mut rels = Vec::new();
            for i in 1..n {
                for j in 0..i {
                    rels.push(RelationRecord {
                        subject: i,
                        object: j,
                        predicates: vec![(classes[i] + classes[j]) % relations],
                    });
                }
            }
            let props = vec![proposal(&mut rng, &mut g, kf, quads[n])];
            keyframes.push(keyframe(&clip_id, kf, g.build(kf), true, fg, props, rels));
        }
        out.push(ClipRecord { clip_id, keyframes });
    }
    Dataset {
        schema: TaskSchema::SceneGraph { objects, relations },
        clips: out,
    }
}

/// Two keyframes on a `1 x 1 x 2 x 8` grid with two foreground boxes (the
/// left and right halves) each: eight nodes in total, every one of them
/// within reach of both message phases when `tau_c >= 3`.
pub fn tiny_dataset(seed: u64, schema: &TaskSchema) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyframes = Vec::new();
    for kf in 0..2i64 {
        let data: Vec<f32> = (0..2 * CHANNELS)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let grid = FeatureGrid::new(
            Tensor::new(vec![1, 1, 2, CHANNELS], data).expect("finite"),
            kf,
        )
        .expect("valid grid");
        let halves = [[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]];
        let mut fg = Vec::new();
        let mut relations = Vec::new();
        for h in halves {
            let label = match schema {
                TaskSchema::Action { classes } => {
                    ForegroundLabel::Actions((0..*classes).filter(|_| rng.gen_bool(0.5)).collect())
                }
                TaskSchema::SceneGraph { objects, .. } => {
                    ForegroundLabel::Object(rng.gen_range(0..*objects))
                }
            };
            fg.push(ForegroundRecord {
                bbox: BBox::new(kf, h, BoxRole::Foreground).expect("valid box"),
                label,
            });
        }
        if let TaskSchema::SceneGraph { relations: r, .. } = schema {
            let predicates: Vec<usize> = (0..*r).filter(|_| rng.gen_bool(0.5)).collect();
            relations.push(RelationRecord {
                subject: 1,
                object: 0,
                predicates,
            });
        }
        keyframes.push(KeyframeRecord {
            keyframe_id: kf,
            grid_path: format!("grids/tiny_{kf}.bin"),
            grid,
            labeled: true,
            foreground: fg,
            detections: Vec::new(),
            proposals: Vec::new(),
            relations,
        });
    }
    Dataset {
        schema: schema.clone(),
        clips: vec![ClipRecord {
            clip_id: "tiny".into(),
            keyframes,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_valid() {
        for ds in [
            action_dataset(3, 5, 3),
            temporal_dataset(3, 5, 1),
            scene_graph_dataset(3, 5, 4, 3),
            tiny_dataset(3, &TaskSchema::Action { classes: 3 }),
            tiny_dataset(
                3,
                &TaskSchema::SceneGraph {
                    objects: 4,
                    relations: 3,
                },
            ),
        ] {
            ds.validate().unwrap();
        }
        assert_eq!(action_dataset(9, 4, 3), action_dataset(9, 4, 3));
        assert_ne!(action_dataset(9, 4, 3), action_dataset(10, 4, 3));
    }

    #[test]
    fn temporal_center_is_only_labeled_keyframe() {
        let ds = temporal_dataset(1, 3, 2);
        for clip in &ds.clips {
            let labeled: Vec<bool> = clip.keyframes.iter().map(|k| k.labeled).collect();
            assert_eq!(labeled, vec![false, false, true, false, false]);
        }
    }
}
