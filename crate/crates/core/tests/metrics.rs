use proptest::prelude::*;
use stgraph::graph::{BBox, BoxRole};
use stgraph::heads::SceneGraphPrediction;
use stgraph::metrics::{assign_labels, iou, recall_at_k, EmptyRecall, RecallMode, Triplet};
use stgraph::Tensor;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..0.8, 0.0f64..0.8, 0.01f64..0.2, 0.01f64..0.2)
        .prop_map(|(x, y, w, h)| BBox::new(0, [x, y, x + w, y + h], BoxRole::Proposal).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_one_on_itself(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assigned_labels_never_come_from_below_threshold(
        preds in prop::collection::vec(bbox(), 1..6),
        gts in prop::collection::vec(bbox(), 0..4),
        thr in 0.1f64..0.9,
    ) {
        let gt: Vec<(BBox, Vec<usize>)> = gts.iter().enumerate().map(|(i, b)| (*b, vec![i])).collect();
        for (p, labels) in preds.iter().zip(assign_labels(&preds, &gt, thr)) {
            if let Some(&i) = labels.first() {
                prop_assert!(iou(p, &gt[i].0) >= thr);
                for g in &gt {
                    prop_assert!(iou(p, &g.0) <= iou(p, &gt[i].0));
                }
            } else {
                prop_assert!(gt.iter().all(|g| iou(p, &g.0) < thr));
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k(
        n in 2usize..5,
        seed in prop::collection::vec(-3.0f64..3.0, 64),
        picks in prop::collection::vec((0usize..5, 0usize..5, 0usize..3), 1..5),
    ) {
        let pairs = n * (n - 1) / 2;
        let object_logits = Tensor::new(vec![n, 3], seed[..n * 3].to_vec()).unwrap();
        let relation_logits = Tensor::new(vec![pairs, 3], seed[16..16 + pairs * 3].to_vec()).unwrap();
        let pred = SceneGraphPrediction { object_logits, relation_logits };
        let objects: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let gt: Vec<Triplet> = picks
            .iter()
            .filter(|(s, o, _)| s % n != o % n)
            .map(|&(s, o, r)| Triplet {
                subject_index: s % n,
                object_index: o % n,
                subject_class: objects[s % n],
                object_class: objects[o % n],
                predicate_class: r,
                score: 1.0,
            })
            .collect();
        for mode in [RecallMode::SgCls, RecallMode::PredCls] {
            let mut last = 0.0;
            for k in 1..=pairs * 3 + 1 {
                let r = recall_at_k(&pred, &objects, &gt, k, mode, EmptyRecall::One).unwrap().unwrap();
                prop_assert!(r >= last);
                prop_assert!((0.0..=1.0).contains(&r));
                last = r;
            }
            if mode == RecallMode::PredCls {
                // Every candidate is ranked once K covers them all.
                prop_assert_eq!(last, 1.0);
            }
        }
    }
}

#[test]
fn empty_ground_truth_policy() {
    let pred = SceneGraphPrediction {
        object_logits: Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(),
        relation_logits: Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap(),
    };
    let one = recall_at_k(
        &pred,
        &[0, 1],
        &[],
        5,
        RecallMode::PredCls,
        EmptyRecall::One,
    )
    .unwrap();
    let skip = recall_at_k(
        &pred,
        &[0, 1],
        &[],
        5,
        RecallMode::PredCls,
        EmptyRecall::Skip,
    )
    .unwrap();
    assert_eq!(one, Some(1.0));
    assert_eq!(skip, None);
    assert!(recall_at_k(
        &pred,
        &[0, 1],
        &[],
        0,
        RecallMode::PredCls,
        EmptyRecall::One
    )
    .is_err());
}
