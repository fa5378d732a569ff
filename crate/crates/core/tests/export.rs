use stgraph::dataset::TaskSchema;
use stgraph::export::{attention_records, read_records, write_records, ExportRecord};
use stgraph::heads::ReadoutKind;
use stgraph::model::{prepare_clips, Model, PreparedClip, Split};
use stgraph::passing::{MessageFn, ModelConfig, Phase};
use stgraph::synth::{action_dataset, tiny_dataset, CHANNELS};
use stgraph::train::init_params;

fn model(fns: Vec<MessageFn>) -> Model<f64> {
    let mut cfg = ModelConfig::new(CHANNELS, ReadoutKind::Action { classes: 3 });
    cfg.iterations = 2;
    cfg.heads = 2;
    cfg.message_fns = fns;
    Model::new(cfg.clone(), init_params(&cfg, 3).unwrap()).unwrap()
}

fn clips(m: &Model<f64>) -> Vec<PreparedClip<f64>> {
    prepare_clips(&action_dataset(2, 2, 3).clips, &m.config, Split::Eval).unwrap()
}

#[test]
fn one_row_per_foreground_node_head_phase_and_iteration() {
    let m = model(vec![MessageFn::Gat]);
    let clip = &clips(&m)[0];
    let kf = &clip.keyframes[1];
    let n_fg = clip
        .layout
        .foreground()
        .filter(|&v| clip.layout.nodes()[v].keyframe_id == kf.keyframe_id)
        .count();
    let records = attention_records(&m, clip, kf.keyframe_id).unwrap();
    let spatial = records
        .iter()
        .filter(|r| {
            matches!(
                r,
                ExportRecord::Attention {
                    phase: Phase::Spatial,
                    ..
                }
            )
        })
        .count();
    assert_eq!(spatial, n_fg * 2 * 2);
    // Middle keyframe has temporal neighbors on both sides.
    let attention = records
        .iter()
        .filter(|r| matches!(r, ExportRecord::Attention { .. }))
        .count();
    assert_eq!(attention, 2 * spatial);
    // Two heads share each phase, so every node also gets a gate row.
    assert_eq!(records.len() - attention, n_fg * 2 * 2);
    for r in &records {
        match r {
            ExportRecord::Attention { neighbors, .. } => {
                let s: f64 = neighbors.iter().map(|n| n.alpha).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            ExportRecord::Gate { weights, .. } => {
                assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(records
        .iter()
        .any(|r| matches!(r, ExportRecord::Gate { .. })));
}

#[test]
fn records_survive_a_file_round_trip() {
    let m = model(vec![MessageFn::NonLocal, MessageFn::Gat]);
    let clip = &clips(&m)[1];
    let records = attention_records(&m, clip, clip.keyframes[0].keyframe_id).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/attention.jsonl");
    write_records(&path, &records).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        match (a, b) {
            (
                ExportRecord::Attention { neighbors: x, .. },
                ExportRecord::Attention { neighbors: y, .. },
            ) => {
                for (p, q) in x.iter().zip(y) {
                    assert_eq!((p.id, p.kind, p.cell), (q.id, q.kind, q.cell));
                    assert!((p.alpha - q.alpha).abs() <= 1e-9);
                }
            }
            (ExportRecord::Gate { weights: x, .. }, ExportRecord::Gate { weights: y, .. }) => {
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() <= 1e-9);
                }
            }
            _ => panic!("record kinds differ"),
        }
    }
}

#[test]
fn a_lone_temporal_neighbor_gets_all_the_weight() {
    let mut ds = tiny_dataset(1, &TaskSchema::Action { classes: 3 });
    for kf in &mut ds.clips[0].keyframes {
        kf.foreground.truncate(1);
    }
    let m = model(vec![MessageFn::Gat]);
    let clip = &prepare_clips::<f64>(&ds.clips, &m.config, Split::Eval).unwrap()[0];
    let records = attention_records(&m, clip, 0).unwrap();
    let temporal: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            ExportRecord::Attention {
                phase: Phase::Temporal,
                neighbors,
                ..
            } => Some(neighbors),
            _ => None,
        })
        .collect();
    assert_eq!(temporal.len(), 4);
    for n in temporal {
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].alpha, 1.0);
        assert_eq!(n[0].keyframe_id, 1);
    }
}

#[test]
fn unknown_keyframe_is_an_error() {
    let m = model(vec![MessageFn::Gat]);
    let clip = &clips(&m)[0];
    assert!(attention_records(&m, clip, 999).is_err());
}
