use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::info::finite_difference_gradient;

/// Compares backward gradients of `build` against central differences for
/// every coordinate of every leaf.
// the `let` drops the result's borrow of the tape before the tape itself
#[allow(clippy::let_and_return)]
fn check_gradients<F>(leaves: &[Tensor], build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        let numeric = finite_difference_gradient(
            |theta| {
                let tape = Tape::new();
                let vars: Vec<_> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.leaf(Tensor::new(t.shape().to_vec(), theta.to_vec()).unwrap())
                        } else {
                            tape.leaf(t.clone())
                        }
                    })
                    .collect();
                let value = build(&tape, &vars).item();
                value
            },
            leaf.data(),
            1e-5,
        )
        .unwrap();
        for (&a, &n) in analytic.data().iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let len: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, len)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matmul_pair() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1usize..=6, 1usize..=6, 1usize..=6).prop_flat_map(|(m, k, n)| {
        (
            tensor_strategy(vec![m, k]),
            tensor_strategy(vec![k, n]),
            tensor_strategy(vec![n]),
        )
    })
}

#[test]
fn matmul_hand_example() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.value().data(), &[3.0, 7.0]);
}

#[test]
fn sigmoid_at_zero() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(0.0));
    let s = w.sigmoid();
    assert_eq!(s.item(), 0.5);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[0.25]);
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.square().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn stop_gradient_is_value_identical_and_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.7]).unwrap());
    let detached = x.stop_gradient();
    assert_eq!(*detached.value(), *x.value());
    assert!(!detached.requires_grad());
    // loss = sum(x * stop(x)) has gradient stop(x), not 2x
    let loss = x.mul(detached).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.3, -1.7]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let loss = x.stop_gradient().square();
    assert!(matches!(tape.backward(loss), Err(Error::DetachedLoss)));
}

#[test]
fn logsumexp_examples() {
    let tape = Tape::new();
    let lse = |v: Vec<f64>| {
        tape.constant(Tensor::vector(v).unwrap())
            .logsumexp(0, false)
            .unwrap()
            .item()
    };
    assert!((lse(vec![0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    let big = lse(vec![1000.0, 1000.0]);
    assert!(big.is_finite());
    assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    // log(e^0 + e^1 + e^2)
    assert!((lse(vec![0.0, 1.0, 2.0]) - 2.40760596444438).abs() < 1e-12);
}

#[test]
fn backward_rejects_reuse_and_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(
        tape.backward(x.square()),
        Err(Error::NonScalarLoss { .. })
    ));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));

    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(Error::DetachedLoss)));
}

#[test]
fn shape_errors_name_operation_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]).unwrap());
    let b = tape.constant(Tensor::zeros([2, 3]).unwrap());
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");

    let c = tape.constant(Tensor::zeros([4]).unwrap());
    assert!(matches!(
        a.add(c),
        Err(Error::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn log_and_div_domain_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    assert!(matches!(x.ln(), Err(Error::Domain { op: "log", .. })));
    let one = tape.scalar(1.0);
    assert!(matches!(one.div(x), Err(Error::Domain { op: "div", .. })));
}

#[test]
fn constants_are_not_recorded_as_gradient_carriers() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::scalar(2.0));
    let b = a.exp().square();
    assert!(!b.requires_grad());
}

#[test]
fn concat_slice_and_broadcast_gradients() {
    let a = Tensor::from_rows(&[[0.1, -0.4], [0.7, 1.2]]).unwrap();
    let b = Tensor::from_rows(&[[0.5], [-0.9]]).unwrap();
    let worst = check_gradients(&[a, b], |_, v| {
        let joined = Var::concat(&[v[0], v[1]], 1).unwrap();
        let mid = joined.slice(1, 1, 3).unwrap();
        let wide = v[1].broadcast_to(&[2, 2]).unwrap();
        mid.mul(wide).unwrap().tanh().sum()
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn conv_and_pool_gradients() {
    let x = Tensor::new(
        [1, 2, 4, 4],
        (0..32)
            .map(|i| (i as f64 * 1.37).sin() + 0.01 * i as f64)
            .collect(),
    )
    .unwrap();
    let w = Tensor::new(
        [3, 2, 3, 3],
        (0..54).map(|i| (i as f64 * 0.71).cos() * 0.5).collect(),
    )
    .unwrap();
    let worst = check_gradients(&[x.clone(), w.clone()], |_, v| {
        v[0].conv2d(v[1], 1).unwrap().tanh().sum()
    });
    assert!(worst < 1e-4, "{worst}");
    let worst = check_gradients(&[x, w], |_, v| {
        v[0].conv2d(v[1], 1)
            .unwrap()
            .max_pool2d(2)
            .unwrap()
            .square()
            .sum()
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn conv_shape_arithmetic() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([2, 1, 5, 5]).unwrap());
    let w = tape.constant(Tensor::zeros([4, 1, 3, 3]).unwrap());
    assert_eq!(x.conv2d(w, 0).unwrap().shape(), vec![2, 4, 3, 3]);
    assert_eq!(x.conv2d(w, 1).unwrap().shape(), vec![2, 4, 5, 5]);
    assert_eq!(
        x.conv2d(w, 1).unwrap().max_pool2d(2).unwrap().shape(),
        vec![2, 4, 2, 2]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_chain_matches_finite_differences((a, b, bias) in matmul_pair()) {
        let worst = check_gradients(&[a, b, bias], |_, v| {
            let logits = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap();
            let lse = logits.logsumexp(1, true).unwrap();
            let logp = logits.sub(lse).unwrap();
            let gate = logits.sigmoid().add_scalar(0.5).ln().unwrap();
            logp.mul(gate).unwrap().tanh().exp().mean_axis(0, false).unwrap().square().sum()
        });
        prop_assert!(worst <= 1e-4, "relative error {}", worst);
    }

    #[test]
    fn elementwise_chain_matches_finite_differences(
        (a, b) in (1usize..=6, 1usize..=6).prop_flat_map(|(m, n)| {
            (tensor_strategy(vec![m, n]), tensor_strategy(vec![m, 1]))
        })
    ) {
        let worst = check_gradients(&[a, b], |tape, v| {
            let denom = v[1].square().add_scalar(1.0);
            let q = v[0].div(denom).unwrap().relu().add(v[0].tanh()).unwrap();
            let r = q.logaddexp(v[1]).unwrap().sub(tape.scalar(0.3)).unwrap();
            r.sum_axis(0, false).unwrap().square().mean()
        });
        prop_assert!(worst <= 1e-4, "relative error {}", worst);
    }

    #[test]
    fn logsumexp_is_shift_invariant(
        v in prop::collection::vec(-50.0f64..50.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(v.clone()).unwrap());
        let shifted = tape.constant(Tensor::vector(v.iter().map(|x| x + c).collect()).unwrap());
        let a = x.logsumexp(0, false).unwrap().item();
        let b = shifted.logsumexp(0, false).unwrap().item();
        prop_assert!((b - (a + c)).abs() <= 1e-12);
    }
}
