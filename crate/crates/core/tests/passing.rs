use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgraph::graph::{BBox, BoxRole, FeatureGrid, KeyframeInput, SpatioTemporalGraph};
use stgraph::heads::ReadoutKind;
use stgraph::passing::{
    combine_parallel, gat_messages, nonlocal_messages, run_inference, update_node, GatWeights,
    ModelConfig, NonLocalWeights,
};
use stgraph::train::init_params;
use stgraph::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn col(t: &Tensor<f64>, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.at(i, j)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn nonlocal_matches_the_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 3;
    let all = random(&mut rng, &[4, d]);
    let fg = Tensor::new(vec![2, d], all.data()[..2 * d].to_vec()).unwrap();
    let w = NonLocalWeights {
        w_q: random(&mut rng, &[d, d]),
        w_k: random(&mut rng, &[d, d]),
        w_v: random(&mut rng, &[d, d]),
    };
    let (m, attn) = nonlocal_messages(&fg, &all, &w).unwrap();
    let proj =
        |x: &[f64], w: &Tensor<f64>| (0..d).map(|c| dot(x, &col(w, c))).collect::<Vec<f64>>();
    for i in 0..2 {
        let q = proj(fg.row(i), &w.w_q);
        let s: Vec<f64> = (0..4)
            .map(|j| dot(&q, &proj(all.row(j), &w.w_k)) / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            assert!((attn.at(i, j) - s[j].exp() / z).abs() < 1e-10);
        }
        for c in 0..d {
            let want: f64 = (0..4)
                .map(|j| s[j].exp() / z * proj(all.row(j), &w.w_v)[c])
                .sum();
            assert!((m.at(i, c) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn gat_matches_the_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let h = random(&mut rng, &[d]);
    let nbrs: Vec<_> = (0..3).map(|_| random(&mut rng, &[d])).collect();
    let w = GatWeights {
        w_a: random(&mut rng, &[d, d]),
        w_b: random(&mut rng, &[2 * d]),
    };
    let (m, alpha) = gat_messages(&h, &nbrs, &w).unwrap();
    let b = w.w_b.data();
    let e: Vec<f64> = nbrs
        .iter()
        .map(|n| (dot(&b[..d], h.data()) + dot(&b[d..], n.data())).max(0.0))
        .collect();
    let z: f64 = e.iter().map(|v| v.exp()).sum();
    for r in 0..d {
        let mut acc = 0.0;
        for (j, n) in nbrs.iter().enumerate() {
            assert!((alpha[j] - e[j].exp() / z).abs() < 1e-10);
            acc += e[j].exp() / z * dot(w.w_a.row(r), n.data());
        }
        assert!((m.data()[r] - acc.max(0.0)).abs() < 1e-10);
    }
}

#[test]
fn update_is_layer_norm_of_the_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, m) = (random(&mut rng, &[5]), random(&mut rng, &[5]));
    let (scale, shift) = (random(&mut rng, &[5]), random(&mut rng, &[5]));
    let got = update_node(&h, &m, &scale, &shift, 1e-5).unwrap();
    let x: Vec<f64> = h.data().iter().zip(m.data()).map(|(a, b)| a + b).collect();
    let mean = x.iter().sum::<f64>() / 5.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    for i in 0..5 {
        let want = scale.data()[i] * (x[i] - mean) / (var + 1e-5).sqrt() + shift.data()[i];
        assert!((got.data()[i] - want).abs() < 1e-10);
    }
}

#[test]
fn combined_message_is_a_convex_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random(&mut rng, &[3]);
    let ms: Vec<_> = (0..3).map(|_| random(&mut rng, &[3])).collect();
    let g = random(&mut rng, &[6]);
    let out = combine_parallel(&ms, &h, Some(&g)).unwrap();
    for c in 0..3 {
        let lo = ms.iter().map(|m| m.data()[c]).fold(f64::INFINITY, f64::min);
        let hi = ms
            .iter()
            .map(|m| m.data()[c])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(out.data()[c] >= lo - 1e-12 && out.data()[c] <= hi + 1e-12);
    }
    let zero = Tensor::zeros(&[6]);
    let mean = combine_parallel(&ms, &h, Some(&zero)).unwrap();
    for c in 0..3 {
        let want = ms.iter().map(|m| m.data()[c]).sum::<f64>() / 3.0;
        assert!((mean.data()[c] - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Without temporal edges a keyframe's output ignores its neighbors and
    /// the stride.
    #[test]
    fn spatial_only_keyframes_are_independent(seed in any::<u64>(), tau_s in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(2, ReadoutKind::Action { classes: 1 });
        cfg.d = 4;
        cfg.tau_c = 1;
        let params = init_params::<f64>(&cfg, seed).unwrap().message;
        let grid = |rng: &mut ChaCha8Rng, k| {
            FeatureGrid::new(random(rng, &[1, 2, 2, 2]), k).unwrap()
        };
        let g0 = grid(&mut rng, 0);
        let fg0 = vec![BBox::new(0, [0.0, 0.0, 0.6, 0.6], BoxRole::Foreground).unwrap()];
        let fg1 = vec![BBox::new(1, [0.4, 0.4, 1.0, 1.0], BoxRole::Foreground).unwrap()];
        let alone = SpatioTemporalGraph::build(
            &[KeyframeInput { grid: &g0, foreground: &fg0, proposals: &[] }],
            &params.input,
            1,
            1,
        )
        .unwrap();
        let alone = run_inference(&alone, &params, &cfg).unwrap().states;
        let g1 = grid(&mut rng, 1);
        let pair = SpatioTemporalGraph::build(
            &[
                KeyframeInput { grid: &g0, foreground: &fg0, proposals: &[] },
                KeyframeInput { grid: &g1, foreground: &fg1, proposals: &[] },
            ],
            &params.input,
            1,
            tau_s,
        )
        .unwrap();
        let strided = ModelConfig { tau_s, ..cfg.clone() };
        let pair = run_inference(&pair, &params, &strided).unwrap().states;
        for r in 0..alone.rows() {
            prop_assert_eq!(alone.row(r), pair.row(r));
        }
    }
}
