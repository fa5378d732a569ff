use stgraph::heads::ReadoutKind;
use stgraph::model::{evaluate, prepare_clips, Model, Split};
use stgraph::passing::{MessageFn, ModelConfig};
use stgraph::synth::{action_dataset, scene_graph_dataset, CHANNELS};
use stgraph::train::{checkpoint_json, init_params, parse_checkpoint};

fn model(readout: ReadoutKind) -> Model<f64> {
    let mut cfg = ModelConfig::new(CHANNELS, readout);
    cfg.message_fns = vec![MessageFn::NonLocal, MessageFn::Gat];
    Model::new(cfg.clone(), init_params(&cfg, 9).unwrap()).unwrap()
}

#[test]
fn single_precision_tracks_double_precision() {
    let m = model(ReadoutKind::Action { classes: 3 });
    let ds = action_dataset(3, 3, 3);
    let c64 = prepare_clips::<f64>(&ds.clips, &m.config, Split::Train).unwrap();
    let c32 = prepare_clips::<f32>(&ds.clips, &m.config, Split::Train).unwrap();
    let m32 = m.cast::<f32>();
    for (a, b) in c64.iter().zip(&c32) {
        let (l64, l32) = (m.loss(a).unwrap(), m32.loss(b).unwrap() as f64);
        assert!(
            (l64 - l32).abs() < 1e-4 * l64.abs().max(1.0),
            "{l64} vs {l32}"
        );
    }
}

#[test]
fn checkpoints_restore_bit_identical_parameters() {
    for readout in [
        ReadoutKind::Action { classes: 3 },
        ReadoutKind::SceneGraph {
            objects: 4,
            relations: 3,
            lambda: 0.25,
        },
    ] {
        let m = model(readout);
        let back: Model<f64> = parse_checkpoint(&checkpoint_json(&m).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
    }
}

#[test]
fn checkpoint_for_another_scalar_type_is_refused() {
    let m = model(ReadoutKind::Action { classes: 3 });
    let text = checkpoint_json(&m.cast::<f32>()).unwrap();
    assert!(parse_checkpoint::<f64>(&text).is_err());
}

#[test]
fn scene_graph_report_has_both_protocols() {
    let m = model(ReadoutKind::SceneGraph {
        objects: 4,
        relations: 3,
        lambda: 0.5,
    });
    let ds = scene_graph_dataset(1, 2, 4, 3);
    let clips = prepare_clips::<f64>(&ds.clips, &m.config, Split::Eval).unwrap();
    let report = evaluate(&m, &clips).unwrap();
    for k in [10, 20, 50] {
        for mode in ["sgcls", "predcls"] {
            let r = report.get(&format!("{mode}.r@{k}")).unwrap();
            assert!((0.0..=1.0).contains(&r));
        }
    }
    // Few enough candidates that K = 50 ranks them all.
    assert_eq!(report.get("predcls.r@50").unwrap(), 1.0);
}
