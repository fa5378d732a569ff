use std::collections::BTreeMap;

use stgraph::heads::ReadoutKind;
use stgraph::model::{prepare_clips, Model, ModelParams, Split};
use stgraph::passing::ModelConfig;
use stgraph::synth::{action_dataset, CHANNELS};
use stgraph::train::{init_params, sgd_step, train_loop, OptimState, TrainOptions};
use stgraph::Tensor;

fn config() -> ModelConfig {
    let mut c = ModelConfig::new(CHANNELS, ReadoutKind::Action { classes: 3 });
    c.d = 8;
    c.heads = 2;
    c
}

fn fill(
    params: &ModelParams<Tensor<f64>>,
    f: impl Fn(&str, usize) -> f64,
) -> BTreeMap<String, Tensor<f64>> {
    params
        .named()
        .into_iter()
        .map(|(name, p)| {
            let data = (0..p.numel()).map(|i| f(&name, i)).collect();
            let t = Tensor::new(p.shape().to_vec(), data).unwrap();
            (name, t)
        })
        .collect()
}

fn norm_sq(params: &ModelParams<Tensor<f64>>) -> f64 {
    params.named().iter().map(|(_, t)| t.norm_sq()).sum()
}

#[test]
fn two_momentum_steps_follow_the_recurrence() {
    let cfg = config();
    let mut params = init_params::<f64>(&cfg, 1).unwrap();
    let p0: BTreeMap<_, _> = params.named().into_iter().collect();
    let g1 = fill(&params, |_, i| (i as f64 * 0.37).sin());
    let g2 = fill(&params, |_, i| (i as f64 * 0.11).cos());
    let (lr, mu, wd) = (0.05, 0.9, 1e-3);
    let mut state = OptimState::new(mu, wd);
    sgd_step(&mut params, &g1, lr, &mut state).unwrap();
    sgd_step(&mut params, &g2, lr, &mut state).unwrap();
    assert_eq!(state.step, 2);
    for (name, p2) in params.named() {
        for i in 0..p2.numel() {
            let p = p0[&name].data()[i];
            let v1 = g1[&name].data()[i] + wd * p;
            let p1 = p - lr * v1;
            let v2 = mu * v1 + g2[&name].data()[i] + wd * p1;
            let want = p1 - lr * v2;
            assert!((p2.data()[i] - want).abs() < 1e-15, "{name}[{i}]");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let cfg = config();
    let mut params = init_params::<f64>(&cfg, 2).unwrap();
    let before = params.clone();
    let g = fill(&params, |_, i| i as f64);
    let mut state = OptimState::default();
    sgd_step(&mut params, &g, 0.0, &mut state).unwrap();
    assert_eq!(params, before);
}

#[test]
fn non_finite_gradient_is_rejected_before_any_update() {
    let cfg = config();
    let mut params = init_params::<f64>(&cfg, 2).unwrap();
    let before = params.clone();
    let last = params.named().last().unwrap().0.clone();
    let mut g = fill(&params, |_, _| 1.0);
    // Overflow inside an elementwise map is how a NaN would reach the optimizer.
    let poisoned = g[&last].map(|x| x * f64::INFINITY - f64::INFINITY);
    g.insert(last.clone(), poisoned);
    let mut state = OptimState::default();
    let err = sgd_step(&mut params, &g, 0.1, &mut state).unwrap_err();
    assert!(err.to_string().contains(&last), "{err}");
    assert_eq!(params, before);
}

#[test]
fn weight_decay_alone_shrinks_the_norm() {
    let cfg = config();
    let mut params = init_params::<f64>(&cfg, 3).unwrap();
    let zero = fill(&params, |_, _| 0.0);
    let mut state = OptimState::new(0.0, 0.1);
    let mut last = norm_sq(&params);
    for _ in 0..5 {
        sgd_step(&mut params, &zero, 0.5, &mut state).unwrap();
        let n = norm_sq(&params);
        assert!(n < last);
        last = n;
    }
}

#[test]
fn glorot_init_has_zero_mean_and_expected_spread() {
    let mut cfg = config();
    cfg.d = 64;
    let params = init_params::<f64>(&cfg, 4).unwrap();
    for (name, t) in params.named() {
        if name.ends_with(".b") || name.ends_with("ln.shift") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            continue;
        }
        if name.ends_with("ln.scale") {
            assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            continue;
        }
        let (fan_in, fan_out) = match t.shape() {
            [a, b] => (*a, *b),
            [n] => (*n, 1),
            s => panic!("unexpected shape {s:?}"),
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let sigma = a / 3f64.sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= a), "{name}");
        assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "{name}: mean {mean}");
    }
}

#[test]
fn init_is_reproducible_per_seed() {
    let cfg = config();
    assert_eq!(
        init_params::<f64>(&cfg, 7).unwrap(),
        init_params::<f64>(&cfg, 7).unwrap()
    );
    assert_ne!(
        init_params::<f64>(&cfg, 7).unwrap(),
        init_params::<f64>(&cfg, 8).unwrap()
    );
}

fn run(epochs: usize) -> (Model<f64>, Vec<f64>) {
    let cfg = config();
    let ds = action_dataset(11, 12, 3);
    let clips = prepare_clips::<f64>(&ds.clips, &cfg, Split::Train).unwrap();
    let mut model = Model::new(cfg.clone(), init_params(&cfg, 0).unwrap()).unwrap();
    let options = TrainOptions {
        epochs,
        ..TrainOptions::default()
    };
    let log = train_loop(&mut model, &clips, &options, |_| {}).unwrap();
    (model, log.iter().map(|e| e.loss).collect())
}

#[test]
fn training_is_deterministic_and_reduces_the_loss() {
    let (a, losses) = run(20);
    let (b, again) = run(20);
    assert_eq!(a.params, b.params);
    assert_eq!(losses, again);
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let (model, losses) = run(0);
    assert!(losses.is_empty());
    assert_eq!(model.params, init_params(&config(), 0).unwrap());
}
