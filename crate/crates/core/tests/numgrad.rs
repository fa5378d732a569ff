use proptest::prelude::*;
use stgraph::numgrad::{relative_error, softmax_rows, Tape};
use stgraph::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            for k in 0..a.cols() {
                out[i * b.cols() + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    out
}

/// A small network touching most ops: projection, ReLU, layer norm,
/// softmax cross-entropy.
fn net(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    scale: &Tensor<f64>,
    shift: &Tensor<f64>,
    y: &Tensor<f64>,
) -> f64 {
    let tape = Tape::new();
    let h = tape
        .constant(x.clone())
        .matmul(tape.constant(w.clone()))
        .unwrap()
        .relu()
        .unwrap()
        .layer_norm_rows(
            tape.constant(scale.clone()),
            tape.constant(shift.clone()),
            1e-5,
        )
        .unwrap();
    let loss = h.softmax_xent_mean(y).unwrap();
    loss.value().value()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(a in matrix(3, 4), b in matrix(4, 2)) {
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(m in matrix(4, 5), c in -50.0f64..50.0) {
        let s = softmax_rows(&m).unwrap();
        let shifted = softmax_rows(&m.map(|x| x + c)).unwrap();
        for i in 0..4 {
            let row = s.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn taped_gradient_matches_central_differences(
        x in matrix(3, 4),
        w in matrix(4, 5),
        scale in matrix(1, 5),
        shift in matrix(1, 5),
        cls in prop::collection::vec(0usize..5, 3),
    ) {
        let scale = scale.reshape(&[5]).unwrap();
        let shift = shift.reshape(&[5]).unwrap();
        let mut y = vec![0.0; 15];
        for (i, c) in cls.iter().enumerate() {
            y[i * 5 + c] = 1.0;
        }
        let y = Tensor::new(vec![3, 5], y).unwrap();

        let tape = Tape::new();
        let wv = tape.param("w", w.clone()).unwrap();
        let sv = tape.param("scale", scale.clone()).unwrap();
        let loss = tape
            .constant(x.clone())
            .matmul(wv)
            .unwrap()
            .relu()
            .unwrap()
            .layer_norm_rows(sv, tape.constant(shift.clone()), 1e-5)
            .unwrap()
            .softmax_xent_mean(&y)
            .unwrap();
        let grads = tape.grad(loss).unwrap();

        let h = 1e-6;
        let bump = |t: &Tensor<f64>, i: usize, d: f64| {
            let mut v = t.data().to_vec();
            v[i] += d;
            Tensor::new(t.shape().to_vec(), v).unwrap()
        };
        // Too close to a ReLU kink for central differences.
        prop_assume!(x.matmul(&w).unwrap().data().iter().all(|v| v.abs() > 1e-4));
        for i in 0..w.numel() {
            let n = (net(&x, &bump(&w, i, h), &scale, &shift, &y) - net(&x, &bump(&w, i, -h), &scale, &shift, &y)) / (2.0 * h);
            prop_assert!(relative_error(grads["w"].data()[i], n, 1e-3) < 1e-5, "w[{i}]");
        }
        for i in 0..scale.numel() {
            let n = (net(&x, &w, &bump(&scale, i, h), &shift, &y) - net(&x, &w, &bump(&scale, i, -h), &shift, &y)) / (2.0 * h);
            prop_assert!(relative_error(grads["scale"].data()[i], n, 1e-3) < 1e-5, "scale[{i}]");
        }
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(v).is_err());
}

#[test]
fn gather_scatter_gradients_route_back() {
    let tape = Tape::new();
    let x = tape
        .param(
            "x",
            Tensor::vector(vec![1.0, 2.0, 3.0])
                .reshape(&[3, 1])
                .unwrap(),
        )
        .unwrap();
    let picked = x.gather_rows(&[2, 0, 2]).unwrap();
    let loss = picked.sum().unwrap();
    let g = tape.grad(loss).unwrap();
    assert_eq!(g["x"].data(), &[1.0, 0.0, 2.0]);
}
