mod common;

use common::{randn, rng};
use proptest::prelude::*;
use skiplab::tensor::{gemm, Graph, Tensor};
use skiplab::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn run1(
    x: &Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, skiplab::tensor::Var) -> skiplab::Result<skiplab::tensor::Var>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x);
    let out = op(&mut g, v).unwrap();
    g.data(out).to_vec()
}

#[test]
fn matmul_identity_and_zeros() {
    let a = t(&[2, 2], &[1.5, -2.0, 3.25, 0.5]);
    let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let (av, iv) = (g.leaf(&a), g.leaf(&i));
    let p = g.matmul(av, iv).unwrap();
    assert_eq!(g.data(p), a.data());

    let z = Tensor::<f64>::zeros([3, 4]);
    let b = randn(&[4, 2], &mut rng(1));
    let (zv, bv) = (g.leaf(&z), g.leaf(&b));
    let p = g.matmul(zv, bv).unwrap();
    assert_eq!(g.shape(p), &[3, 2]);
    assert!(g.data(p).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (a, b) = (randn(&[3, 3], &mut r), randn(&[3, 3], &mut r));
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(&a), g.leaf(&b));
        let p = g.matmul(av, bv).unwrap();
        let oracle = common::oracle::matmul(
            &common::oracle::to_mat(a.data(), 3),
            &common::oracle::to_mat(b.data(), 3),
        );
        for (i, row) in oracle.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                let got = g.data(p)[i * 3 + j];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(&Tensor::zeros([2, 3]));
    let b = g.leaf(&Tensor::zeros([4, 2]));
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn gemm_transposes() {
    // aᵀ·b with a = [[1,2],[3,4]], b = [[1,0],[0,1]] gives aᵀ.
    let a = [1.0f64, 2.0, 3.0, 4.0];
    let b = [1.0f64, 0.0, 0.0, 1.0];
    let mut c = [0.0f64; 4];
    gemm(true, false, 2, 2, 2, &a, &b, &mut c, false);
    assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn softmax_examples() {
    let u = run1(&t(&[1, 3], &[0.0, 0.0, 0.0]), |g, v| g.softmax(v));
    for p in u {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let p = run1(&t(&[1, 2], &[0.0, 2f64.ln()]), |g, v| g.softmax(v));
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
    let p = run1(&t(&[1, 2], &[1000.0, 0.0]), |g, v| g.softmax(v));
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let v = g.leaf(&t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(g.softmax(v), Err(Error::NumericDomain { .. })));
    let v = g.leaf(&t(&[1, 2], &[f64::INFINITY, 0.0]));
    assert!(matches!(g.log_softmax(v), Err(Error::NumericDomain { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-700.0f64..700.0, 1..9), 1..5)) {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(k).cloned()).collect();
        let out = run1(&t(&[rows.len(), k], &flat), |g, v| g.softmax(v));
        for row in out.chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn rms_norm_examples() {
    let ones = Tensor::<f64>::full([4], 1.0);
    let mut g = Graph::new();
    let x = g.leaf(&t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
    let gain = g.leaf(&ones);
    let y = g.rms_norm(x, gain, 1e-300).unwrap();
    assert!(g.data(y).iter().all(|&v| (v - 1.0).abs() < 1e-15));

    let z = g.leaf(&Tensor::zeros([1, 4]));
    for eps in [1e-8, 1e-5, 1.0] {
        let y = g.rms_norm(z, gain, eps).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rms_norm_matches_formula() {
    let mut r = rng(3);
    let x = randn(&[1, 8], &mut r);
    let gain = randn(&[8], &mut r);
    let mut g = Graph::new();
    let (xv, gv) = (g.leaf(&x), g.leaf(&gain));
    let y = g.rms_norm(xv, gv, 1e-5).unwrap();
    let want = common::oracle::rms_norm(x.data(), gain.data(), 1e-5);
    for (a, b) in g.data(y).iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let v = g.leaf(&Tensor::<f64>::zeros([2, 4]));
    let l = g.cross_entropy(v, &[0, 3]).unwrap();
    assert!((g.data(l)[0] - 4f64.ln()).abs() < 1e-15);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let v = g.leaf(&t(&[1, 3], &[0.0, margin, 0.0]));
        let l = g.cross_entropy(v, &[1]).unwrap();
        let val = g.data(l)[0];
        assert!(val < prev);
        prev = val;
    }
    assert!(prev < 1e-20);

    let v = g.leaf(&Tensor::<f64>::zeros([1, 4]));
    assert!(matches!(g.cross_entropy(v, &[4]), Err(Error::Index { .. })));
}

#[test]
fn cross_entropy_matches_per_position() {
    let mut r = rng(11);
    let logits = randn(&[3, 5], &mut r);
    let targets = [4, 0, 2];
    let mut g = Graph::new();
    let v = g.leaf(&logits);
    let l = g.cross_entropy(v, &targets).unwrap();
    let want: f64 = logits
        .data()
        .chunks(5)
        .zip(targets)
        .map(|(row, tg)| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[tg].exp() / z).ln()
        })
        .sum::<f64>()
        / 3.0;
    assert!((g.data(l)[0] - want).abs() < 1e-10);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let model = common::tiny_model(5, true);
    let layout = skiplab::tensor::SeqLayout::new(2, 5);
    let tokens = common::random_tokens(10, 11, &mut rng(6));
    let run = || {
        let mut g = Graph::new();
        let logits = model.forward_dense(&mut g, &tokens, layout).unwrap();
        let l = g.cross_entropy(logits, &tokens).unwrap();
        g.backward(l).unwrap();
        let mut grads: Vec<(String, Vec<u64>)> = g
            .take_param_grads()
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|x| x.to_bits()).collect()))
            .collect();
        grads.sort();
        (g.data(logits).iter().map(|x| x.to_bits()).collect::<Vec<_>>(), grads)
    };
    assert_eq!(run(), run());
}
