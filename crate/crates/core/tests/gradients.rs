//! Reverse-mode gradients of every primitive against central differences.

use hiap::tensor::{finite_diff_check, finite_diff_check_many, Graph, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn tensor(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vals[..n].to_vec()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so that gradients of
/// normalizing ops are not identically zero.
fn probe(g: &mut Graph<f64>, y: Var) -> hiap::Result<Var> {
    let n: usize = g.shape(y).iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.05).collect();
    let w = g.constant_from(g.shape(y).to_vec(), w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul(m in 1..4usize, k in 1..4usize, n in 1..4usize, a in vals(64), b in vals(64)) {
        let xs = [tensor(vec![2, m, k], &a), tensor(vec![k, n], &b)];
        let err = finite_diff_check_many(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y) }, &xs, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn batched_matmul_and_transpose(m in 1..4usize, k in 1..4usize, a in vals(64), b in vals(64)) {
        let xs = [tensor(vec![2, m, k], &a), tensor(vec![2, m, k], &b)];
        let err = finite_diff_check_many(|g, v| {
            let t = g.transpose(v[1])?;
            let y = g.matmul(v[0], t)?;
            probe(g, y)
        }, &xs, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn broadcasting_arithmetic(r in 1..4usize, c in 1..4usize, a in vals(16), b in vals(4)) {
        let xs = [tensor(vec![r, c], &a), tensor(vec![c], &b)];
        let err = finite_diff_check_many(|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let p = g.mul(d, v[1])?;
            let q = g.scale(p, 1.5);
            let y = g.add_scalar(q, 0.25);
            probe(g, y)
        }, &xs, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn pointwise(n in 1..12usize, a in vals(12)) {
        let x = tensor(vec![n], &a);
        for op in 0..2 {
            let err = finite_diff_check(|g, v| {
                let y = if op == 0 { g.gelu(v) } else { g.sigmoid(v) };
                probe(g, y)
            }, &x, H).unwrap();
            prop_assert!(err < TOL, "op {op}: {err}");
        }
    }

    #[test]
    fn relu_away_from_kink(n in 1..12usize, a in prop::collection::vec(prop_oneof![-2.0..-0.1f64, 0.1..2.0f64], 12)) {
        let x = tensor(vec![n], &a);
        let err = finite_diff_check(|g, v| { let y = g.relu(v); probe(g, y) }, &x, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family(r in 1..4usize, c in 2..5usize, a in vals(16)) {
        let x = tensor(vec![r, c], &a);
        for log in [false, true] {
            let err = finite_diff_check(|g, v| {
                let y = if log { g.log_softmax(v)? } else { g.softmax(v)? };
                probe(g, y)
            }, &x, H).unwrap();
            prop_assert!(err < TOL, "log={log}: {err}");
        }
    }

    #[test]
    fn layer_norm(r in 1..4usize, c in 2..6usize, a in vals(24), gb in vals(12)) {
        let xs = [tensor(vec![r, c], &a), tensor(vec![c], &gb), tensor(vec![c], &gb[6..])];
        let err = finite_diff_check_many(|g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; probe(g, y) }, &xs, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn reductions_and_reshapes(r in 1..4usize, c in 1..4usize, a in vals(16)) {
        let x = tensor(vec![r, c], &a);
        let err = finite_diff_check(|g, v| {
            let s = g.sum_last(v)?;
            let s = g.reshape(s, [r, 1])?;
            let b = g.broadcast_to(s, [2, r, c])?;
            let m = g.mean(v);
            let y = g.mul(b, m)?;
            probe(g, y)
        }, &x, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn concat_and_select(r in 1..4usize, c in 1..4usize, a in vals(16), b in vals(16)) {
        let xs = [tensor(vec![r, c], &a), tensor(vec![r, c + 1], &b)];
        let err = finite_diff_check_many(|g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let row = g.select(cat, 0, r - 1)?;
            let y = g.mul(row, row)?;
            let s = probe(g, y)?;
            let t = probe(g, cat)?;
            Ok(g.add(s, t)?)
        }, &xs, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn nll_of_log_softmax(r in 1..5usize, c in 2..5usize, a in vals(20), labels in prop::collection::vec(0..4usize, 5)) {
        let x = tensor(vec![r, c], &a);
        let labels: Vec<usize> = labels[..r].iter().map(|l| l % c).collect();
        let err = finite_diff_check(|g, v| {
            let lp = g.log_softmax(v)?;
            g.nll(lp, &labels)
        }, &x, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }
}

proptest! {
    #[test]
    fn straight_through_is_binary_forward_identity_backward(a in vals(8)) {
        let mut g = Graph::<f64>::new();
        let x = g.param(&tensor(vec![8], &a).with_grad());
        let y = g.straight_through(x);
        let out: Vec<f64> = g.value(y).to_vec();
        let loss = probe(&mut g, y).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, (&o, &v)) in out.iter().zip(&a).enumerate() {
            prop_assert_eq!(o, if v > 0.5 { 1.0 } else { 0.0 });
            let w = ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.05;
            prop_assert!((grads.get(x).unwrap()[i] - w).abs() < 1e-12);
        }
    }
}
