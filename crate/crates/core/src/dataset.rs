//! Clip manifests and feature-grid blobs.
//!
//! A manifest is a JSON-lines file. The first record is a header naming the
//! task and class counts; every following non-blank line is one clip:
//!
//! ```text
//! {"format":"stgraph-manifest","version":1,"task":"action","classes":3}
//! {"clip_id":"c0","keyframes":[{"keyframe_id":0,"grid":"grids/c0_0.bin",
//!   "foreground":[{"box":[0.1,0.1,0.4,0.9],"actions":[2]}],"proposals":[]}]}
//! ```
//!
//! Grid paths are relative to the manifest. A grid blob is a 32-byte header of
//! eight little-endian `u32` words (magic, version, t, h, w, c, keyframe id,
//! CRC-32 of the payload) followed by `t*h*w*c` little-endian `f32` values.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BBox, BoxRole, FeatureGrid};
use crate::tensor::Tensor;

pub const GRID_MAGIC: u32 = u32::from_le_bytes(*b"STGR");
pub const GRID_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "stgraph-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Label schema declared by the manifest header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSchema {
    Action {
        classes: usize,
    },
    #[serde(rename = "scenegraph")]
    SceneGraph {
        objects: usize,
        relations: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    #[serde(flatten)]
    schema: TaskSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ForegroundLine {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<usize>,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct KeyframeLine {
    keyframe_id: i64,
    grid: String,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    labeled: bool,
    foreground: Vec<ForegroundLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    detections: Vec<[f64; 4]>,
    #[serde(default)]
    proposals: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    relations: Vec<RelationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClipLine {
    clip_id: String,
    keyframes: Vec<KeyframeLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ForegroundLabel {
    /// Multi-label action classes.
    Actions(Vec<usize>),
    /// Single object class.
    Object(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundRecord {
    pub bbox: BBox,
    pub label: ForegroundLabel,
}

/// Predicates holding between two foreground boxes of one keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub subject: usize,
    pub object: usize,
    pub predicates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeRecord {
    pub keyframe_id: i64,
    /// Relative to the manifest directory.
    pub grid_path: String,
    pub grid: FeatureGrid<f32>,
    /// Unlabeled keyframes provide graph context only.
    pub labeled: bool,
    pub foreground: Vec<ForegroundRecord>,
    /// Unlabeled person detections; labels come from IoU matching.
    pub detections: Vec<BBox>,
    pub proposals: Vec<BBox>,
    pub relations: Vec<RelationRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub keyframes: Vec<KeyframeRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: TaskSchema,
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn clip(&self, clip_id: &str) -> Result<&ClipRecord> {
        self.clips
            .iter()
            .find(|c| c.clip_id == clip_id)
            .ok_or_else(|| Error::Lookup(format!("clip `{clip_id}`")))
    }

    /// `(h, w, c)` shared by every grid.
    pub fn grid_shape(&self) -> Option<(usize, usize, usize)> {
        let (_, h, w, c) = self.clips.first()?.keyframes.first()?.grid.dims();
        Some((h, w, c))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::Validation("no clips".into()));
        }
        let shape = self.grid_shape();
        for clip in &self.clips {
            validate_clip(clip, &self.schema, shape)
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
        Ok(())
    }
}

fn validate_clip(
    clip: &ClipRecord,
    schema: &TaskSchema,
    shape: Option<(usize, usize, usize)>,
) -> Result<()> {
    let fail = |kf: Option<i64>, msg: String| {
        Err(Error::Validation(match kf {
            Some(k) => format!("clip `{}` keyframe {k}: {msg}", clip.clip_id),
            None => format!("clip `{}`: {msg}", clip.clip_id),
        }))
    };
    if clip.keyframes.is_empty() {
        return fail(None, "no keyframes".into());
    }
    for (i, kf) in clip.keyframes.iter().enumerate() {
        let id = Some(kf.keyframe_id);
        if i > 0 && kf.keyframe_id <= clip.keyframes[i - 1].keyframe_id {
            return fail(id, "keyframe ids must be strictly increasing".into());
        }
        let (_, h, w, c) = kf.grid.dims();
        if let Some(s) = shape {
            if (h, w, c) != s {
                return fail(
                    id,
                    format!("grid shape {:?} differs from dataset {:?}", (h, w, c), s),
                );
            }
        }
        if kf.grid.keyframe_id() != kf.keyframe_id {
            return fail(
                id,
                format!("grid blob is for keyframe {}", kf.grid.keyframe_id()),
            );
        }
        let boxes = kf
            .foreground
            .iter()
            .map(|f| &f.bbox)
            .chain(&kf.detections)
            .chain(&kf.proposals);
        for b in boxes {
            if let Err(e) = b.validate() {
                return fail(id, e.to_string());
            }
        }
        for f in &kf.foreground {
            match (&f.label, schema) {
                (ForegroundLabel::Actions(a), TaskSchema::Action { classes }) => {
                    if let Some(bad) = a.iter().find(|&&x| x >= *classes) {
                        return fail(id, format!("unknown action class {bad}"));
                    }
                }
                (ForegroundLabel::Object(o), TaskSchema::SceneGraph { objects, .. }) => {
                    if o >= objects {
                        return fail(id, format!("unknown object class {o}"));
                    }
                }
                _ => return fail(id, "foreground label does not match the task".into()),
            }
        }
        if !kf.relations.is_empty() {
            let TaskSchema::SceneGraph { relations, .. } = schema else {
                return fail(
                    id,
                    "relations are only valid for the scenegraph task".into(),
                );
            };
            let n = kf.foreground.len();
            for r in &kf.relations {
                if r.subject == r.object || r.subject >= n || r.object >= n {
                    return fail(
                        id,
                        format!(
                            "relation ({}, {}) invalid for {n} boxes",
                            r.subject, r.object
                        ),
                    );
                }
                if let Some(bad) = r.predicates.iter().find(|&&p| p >= *relations) {
                    return fail(id, format!("unknown predicate class {bad}"));
                }
            }
        }
        if !kf.detections.is_empty() && !matches!(schema, TaskSchema::Action { .. }) {
            return fail(id, "detections are only valid for the action task".into());
        }
    }
    Ok(())
}

/// Writes a grid blob.
pub fn write_grid(path: &Path, grid: &FeatureGrid<f32>) -> Result<()> {
    let (t, h, w, c) = grid.dims();
    let mut payload = Vec::with_capacity(grid.values().numel() * 4);
    for v in grid.values().data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = [
        GRID_MAGIC,
        GRID_VERSION,
        t as u32,
        h as u32,
        w as u32,
        c as u32,
        grid.keyframe_id() as i32 as u32,
        crc32fast::hash(&payload),
    ];
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(32 + payload.len());
    for word in header {
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<FeatureGrid<f32>> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Validation(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated grid header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != GRID_MAGIC {
        return Err(bad("bad grid magic".into()));
    }
    if word(1) != GRID_VERSION {
        return Err(bad(format!("unsupported grid version {}", word(1))));
    }
    let dims = [word(2), word(3), word(4), word(5)].map(|x| x as usize);
    let numel: usize = dims.iter().product();
    let payload = &bytes[32..];
    if payload.len() != numel * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            numel * 4,
            payload.len()
        )));
    }
    if crc32fast::hash(payload) != word(7) {
        return Err(bad("grid checksum mismatch".into()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    let tensor = Tensor::new(dims.to_vec(), values).map_err(|e| bad(e.to_string()))?;
    FeatureGrid::new(tensor, word(6) as i32 as i64).map_err(|e| bad(e.to_string()))
}

fn to_box(kf: i64, c: [f64; 4], role: BoxRole) -> Result<BBox> {
    BBox::new(kf, c, role)
}

fn parse_clip(line: ClipLine, base: &Path) -> Result<ClipRecord> {
    let mut keyframes = Vec::with_capacity(line.keyframes.len());
    for kf in line.keyframes {
        let ctx = |e: Error| {
            Error::Validation(format!(
                "clip `{}` keyframe {}: {e}",
                line.clip_id, kf.keyframe_id
            ))
        };
        let grid = read_grid(&base.join(&kf.grid)).map_err(ctx)?;
        let id = kf.keyframe_id;
        let foreground = kf
            .foreground
            .into_iter()
            .map(|f| {
                let label = match (f.actions, f.object) {
                    (Some(a), None) => ForegroundLabel::Actions(a),
                    (None, Some(o)) => ForegroundLabel::Object(o),
                    _ => {
                        return Err(Error::Validation(
                            "foreground box needs exactly one of `actions` or `object`".into(),
                        ))
                    }
                };
                Ok(ForegroundRecord {
                    bbox: to_box(id, f.bbox, BoxRole::Foreground)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        let detections = kf
            .detections
            .iter()
            .map(|&c| to_box(id, c, BoxRole::Foreground))
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        let proposals = kf
            .proposals
            .iter()
            .map(|&c| to_box(id, c, BoxRole::Proposal))
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        keyframes.push(KeyframeRecord {
            keyframe_id: id,
            grid_path: kf.grid,
            grid,
            labeled: kf.labeled,
            foreground,
            detections,
            proposals,
            relations: kf.relations,
        });
    }
    Ok(ClipRecord {
        clip_id: line.clip_id,
        keyframes,
    })
}

/// Reads and validates a manifest and every grid it references.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let path_str = manifest.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path_str.clone(),
        line,
        msg,
    };
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(manifest)?);
    let mut schema: Option<TaskSchema> = None;
    let mut clips = Vec::new();
    let mut shape = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(schema) = &schema else {
            let h: HeaderLine = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            if h.format != MANIFEST_FORMAT || h.version != MANIFEST_VERSION {
                return Err(parse_err(
                    lineno,
                    format!("unsupported manifest {} v{}", h.format, h.version),
                ));
            }
            schema = Some(h.schema);
            continue;
        };
        let raw: ClipLine = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("malformed clip: {e}")))?;
        let clip = parse_clip(raw, &base).map_err(|e| parse_err(lineno, e.to_string()))?;
        if shape.is_none() {
            shape = clip.keyframes.first().map(|k| {
                let (_, h, w, c) = k.grid.dims();
                (h, w, c)
            });
        }
        validate_clip(&clip, schema, shape).map_err(|e| parse_err(lineno, e.to_string()))?;
        if clips.iter().any(|c: &ClipRecord| c.clip_id == clip.clip_id) {
            return Err(parse_err(
                lineno,
                format!("duplicate clip id `{}`", clip.clip_id),
            ));
        }
        clips.push(clip);
    }
    let schema = schema.ok_or_else(|| parse_err(0, "no clips: manifest is empty".into()))?;
    if clips.is_empty() {
        return Err(parse_err(0, "no clips".into()));
    }
    Ok(Dataset { schema, clips })
}

fn clip_line(clip: &ClipRecord) -> ClipLine {
    ClipLine {
        clip_id: clip.clip_id.clone(),
        keyframes: clip
            .keyframes
            .iter()
            .map(|kf| KeyframeLine {
                keyframe_id: kf.keyframe_id,
                grid: kf.grid_path.clone(),
                labeled: kf.labeled,
                foreground: kf
                    .foreground
                    .iter()
                    .map(|f| ForegroundLine {
                        bbox: f.bbox.coords(),
                        actions: match &f.label {
                            ForegroundLabel::Actions(a) => Some(a.clone()),
                            ForegroundLabel::Object(_) => None,
                        },
                        object: match f.label {
                            ForegroundLabel::Object(o) => Some(o),
                            ForegroundLabel::Actions(_) => None,
                        },
                    })
                    .collect(),
                detections: kf.detections.iter().map(BBox::coords).collect(),
                proposals: kf.proposals.iter().map(BBox::coords).collect(),
                relations: kf.relations.clone(),
            })
            .collect(),
    }
}

/// Writes `manifest` and every grid blob (paths relative to its directory).
pub fn save_dataset(dataset: &Dataset, manifest: &Path) -> Result<()> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base)?;
    }
    let mut out = fs::File::create(manifest)?;
    let header = HeaderLine {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        schema: dataset.schema.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for clip in &dataset.clips {
        for kf in &clip.keyframes {
            write_grid(&base.join(&kf.grid_path), &kf.grid)?;
        }
        writeln!(out, "{}", serde_json::to_string(&clip_line(clip))?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(kf: i64) -> FeatureGrid<f32> {
        let v: Vec<f32> = (0..2 * 2 * 2 * 3).map(|i| i as f32 * 0.25 - 1.0).collect();
        FeatureGrid::new(Tensor::new(vec![2, 2, 2, 3], v).unwrap(), kf).unwrap()
    }

    #[test]
    fn grid_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let g = grid(-3);
        write_grid(&p, &g).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);

        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        let msg = read_grid(&p).unwrap_err().to_string();
        assert!(msg.contains("checksum"), "{msg}");
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        let msg = load_dataset(&p).unwrap_err().to_string();
        assert!(msg.contains("no clips"), "{msg}");
    }

    fn write_manifest(dir: &Path, clip_json: &str) -> PathBuf {
        write_grid(&dir.join("g0.bin"), &grid(0)).unwrap();
        let p = dir.join("m.jsonl");
        fs::write(
            &p,
            format!(
                "{{\"format\":\"stgraph-manifest\",\"version\":1,\"task\":\"action\",\"classes\":3}}\n{clip_json}\n"
            ),
        )
        .unwrap();
        p
    }

    #[test]
    fn one_valid_clip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"clip_id":"a","keyframes":[{"keyframe_id":0,"grid":"g0.bin","foreground":[{"box":[0.1,0.1,0.5,0.5],"actions":[1]}]}]}"#,
        );
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.clips.len(), 1);
        assert_eq!(ds.schema, TaskSchema::Action { classes: 3 });
    }

    #[test]
    fn inverted_box_names_line_clip_and_keyframe() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"clip_id":"bad","keyframes":[{"keyframe_id":0,"grid":"g0.bin","foreground":[{"box":[0.6,0.1,0.5,0.5],"actions":[1]}]}]}"#,
        );
        let msg = load_dataset(&p).unwrap_err().to_string();
        assert!(
            msg.contains(":2:") && msg.contains("bad") && msg.contains("keyframe 0"),
            "{msg}"
        );
    }

    #[test]
    fn unknown_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"clip_id":"a","keyframes":[{"keyframe_id":0,"grid":"g0.bin","foreground":[{"box":[0.1,0.1,0.5,0.5],"actions":[7]}]}]}"#,
        );
        let msg = load_dataset(&p).unwrap_err().to_string();
        assert!(msg.contains("unknown action class 7"), "{msg}");
    }
}
