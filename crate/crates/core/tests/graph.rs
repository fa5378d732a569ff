use proptest::prelude::*;
use stgraph::graph::{
    temporal_offsets, BBox, BoxRole, FeatureGrid, GraphLayout, KeyframeInput, NodeKind,
};
use stgraph::Tensor;

#[derive(Debug, Clone)]
struct Clip {
    h: usize,
    w: usize,
    fg: Vec<usize>,
    proposals: Vec<usize>,
    tau_c: usize,
    tau_s: usize,
}

fn clip() -> impl Strategy<Value = Clip> {
    (1usize..=3, 1usize..=3, 1usize..=5).prop_flat_map(|(h, w, k)| {
        (
            prop::collection::vec(0usize..=3, k)
                .prop_filter("some foreground", |f| f.iter().any(|&n| n > 0)),
            prop::collection::vec(0usize..=2, k),
            prop::sample::select(vec![1usize, 3, 5]),
            1usize..=3,
        )
            .prop_map(move |(fg, proposals, tau_c, tau_s)| Clip {
                h,
                w,
                fg,
                proposals,
                tau_c,
                tau_s,
            })
    })
}

fn boxes(k: i64, n: usize, role: BoxRole) -> Vec<BBox> {
    (0..n)
        .map(|i| {
            let x = i as f64 * 0.2;
            BBox::new(k, [x, 0.1, x + 0.3, 0.9], role).unwrap()
        })
        .collect()
}

fn try_layout(c: &Clip) -> stgraph::Result<GraphLayout<f64>> {
    let grids: Vec<FeatureGrid<f64>> = (0..c.fg.len())
        .map(|k| {
            let data = (0..c.h * c.w * 2).map(|i| (i + k) as f64 * 0.1).collect();
            FeatureGrid::new(Tensor::new(vec![1, c.h, c.w, 2], data).unwrap(), k as i64).unwrap()
        })
        .collect();
    let fg: Vec<_> =
        c.fg.iter()
            .enumerate()
            .map(|(k, &n)| boxes(k as i64, n, BoxRole::Foreground))
            .collect();
    let props: Vec<_> = c
        .proposals
        .iter()
        .enumerate()
        .map(|(k, &n)| boxes(k as i64, n, BoxRole::Proposal))
        .collect();
    let inputs: Vec<_> = (0..c.fg.len())
        .map(|k| KeyframeInput {
            grid: &grids[k],
            foreground: &fg[k],
            proposals: &props[k],
        })
        .collect();
    GraphLayout::build(&inputs, c.tau_c, c.tau_s)
}

fn layout(c: &Clip) -> GraphLayout<f64> {
    try_layout(c).unwrap()
}

proptest! {
    #[test]
    fn node_counts_follow_the_inputs(c in clip()) {
        let g = layout(&c);
        let expected: usize = c
            .fg
            .iter()
            .zip(&c.proposals)
            .filter(|(&f, _)| f > 0)
            .map(|(&f, &p)| f + c.h * c.w + p)
            .sum();
        prop_assert_eq!(g.node_count(), expected);
        prop_assert_eq!(g.foreground().count(), c.fg.iter().sum::<usize>());
        prop_assert_eq!(g.features().rows(), expected);
    }

    #[test]
    fn spatial_neighbors_are_the_whole_keyframe(c in clip()) {
        let g = layout(&c);
        for v in g.foreground() {
            let kf = g.nodes()[v].keyframe_index;
            let want: Vec<usize> = g.nodes().iter().filter(|n| n.keyframe_index == kf).map(|n| n.id).collect();
            prop_assert_eq!(g.spatial_neighbors(v), &want[..]);
        }
    }

    #[test]
    fn temporal_neighbors_are_foreground_symmetric_and_in_range(c in clip()) {
        let g = layout(&c);
        let nodes = g.nodes();
        for v in 0..g.node_count() {
            let nb = g.temporal_neighbors(v);
            if nodes[v].kind != NodeKind::Foreground {
                prop_assert!(nb.is_empty());
                continue;
            }
            for &u in nb {
                prop_assert_eq!(nodes[u].kind, NodeKind::Foreground);
                let gap = nodes[u].keyframe_index as i64 - nodes[v].keyframe_index as i64;
                prop_assert!(gap != 0);
                prop_assert_eq!(gap % c.tau_s as i64, 0);
                prop_assert!((gap / c.tau_s as i64).abs() <= (c.tau_c / 2) as i64);
                prop_assert!(g.temporal_neighbors(u).contains(&v));
            }
        }
    }
}

#[test]
fn offsets_clip_at_the_boundaries() {
    assert_eq!(temporal_offsets(0, 5, 5, 1).unwrap(), vec![1, 2]);
    assert_eq!(temporal_offsets(2, 5, 5, 1).unwrap(), vec![-2, -1, 1, 2]);
    assert_eq!(temporal_offsets(2, 5, 3, 2).unwrap(), vec![-2, 2]);
    assert!(temporal_offsets(0, 5, 1, 1).unwrap().is_empty());
    assert!(temporal_offsets(0, 5, 2, 1).is_err());
    assert!(temporal_offsets(0, 5, 3, 0).is_err());
}

#[test]
fn clip_without_foreground_is_rejected() {
    let c = Clip {
        h: 1,
        w: 1,
        fg: vec![0, 0],
        proposals: vec![1, 0],
        tau_c: 3,
        tau_s: 1,
    };
    assert!(try_layout(&c).is_err());
}
