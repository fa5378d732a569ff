//! Attention export for offline visualization.
//!
//! One JSON object per line. `"record": "attention"` lines hold the weights
//! one head of one phase and iteration put on each neighbor of a foreground
//! node, with enough geometry to draw them on the frame; `"record": "gate"`
//! lines hold the per-node head-mixing weights.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind, NodeSource};
use crate::model::{Model, PreparedClip};
use crate::passing::{MessageFn, Phase};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeight {
    pub id: NodeId,
    pub kind: NodeKind,
    pub keyframe_id: i64,
    /// Normalized `[x1, y1, x2, y2]` of the box or grid cell.
    pub geometry: [f64; 4],
    /// `[row, col]` for implicit context cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<[usize; 2]>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ExportRecord {
    Attention {
        clip_id: String,
        keyframe_id: i64,
        iteration: usize,
        phase: Phase,
        head: usize,
        function: MessageFn,
        node: NodeId,
        geometry: [f64; 4],
        neighbors: Vec<NeighborWeight>,
    },
    Gate {
        clip_id: String,
        keyframe_id: i64,
        iteration: usize,
        phase: Phase,
        node: NodeId,
        weights: Vec<f64>,
    },
}

/// Attention and gate records for the foreground nodes of one keyframe.
pub fn attention_records<T: Scalar>(
    model: &Model<T>,
    clip: &PreparedClip<T>,
    keyframe_id: i64,
) -> Result<Vec<ExportRecord>> {
    if !clip.keyframes.iter().any(|k| k.keyframe_id == keyframe_id) {
        return Err(Error::Lookup(format!(
            "keyframe {keyframe_id} with foreground boxes in clip `{}`",
            clip.clip_id
        )));
    }
    let pred = model.predict(clip)?;
    let nodes = clip.layout.nodes();
    let on_keyframe = |v: NodeId| nodes[v].keyframe_id == keyframe_id;
    let mut out = Vec::new();
    for a in &pred.trace.attention {
        if !on_keyframe(a.node) {
            continue;
        }
        let neighbors = a
            .neighbors
            .iter()
            .zip(&a.weights)
            .map(|(&id, &alpha)| {
                let info = &nodes[id];
                NeighborWeight {
                    id,
                    kind: info.kind,
                    keyframe_id: info.keyframe_id,
                    geometry: info.source.geometry(),
                    cell: match info.source {
                        NodeSource::Cell { row, col, .. } => Some([row, col]),
                        NodeSource::Box(_) => None,
                    },
                    alpha,
                }
            })
            .collect();
        out.push(ExportRecord::Attention {
            clip_id: clip.clip_id.clone(),
            keyframe_id,
            iteration: a.iteration,
            phase: a.phase,
            head: a.head,
            function: a.function,
            node: a.node,
            geometry: nodes[a.node].source.geometry(),
            neighbors,
        });
    }
    for g in &pred.trace.gates {
        if on_keyframe(g.node) {
            out.push(ExportRecord::Gate {
                clip_id: clip.clip_id.clone(),
                keyframe_id,
                iteration: g.iteration,
                phase: g.phase,
                node: g.node,
                weights: g.weights.clone(),
            });
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[ExportRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExportRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
