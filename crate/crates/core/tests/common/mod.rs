#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use skiplab::model::{LoraConfig, ModelConfig, Transformer};
use skiplab::tensor::{Graph, Tensor, Var};
use skiplab::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        max_seq_len: 6,
        rms_eps: 1e-5,
    }
}

/// Random model with O(1) weights so every nonlinearity is exercised.
pub fn tiny_model(seed: u64, with_lora: bool) -> Transformer<f64> {
    let mut r = rng(seed);
    let mut m = Transformer::<f64>::new(tiny_config(), &mut r).unwrap();
    if with_lora {
        let ads = m
            .init_lora(
                &LoraConfig {
                    rank: 2,
                    ..LoraConfig::default()
                },
                &mut r,
            )
            .unwrap();
        m.apply_lora(ads).unwrap();
    }
    for p in m.params_mut() {
        let fan = p.value.shape()[0] as f64;
        let is_gain = p.value.shape().len() == 1;
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = if is_gain { 1.0 + 0.3 * z } else { z / fan.sqrt() };
        }
    }
    m.set_trainable(true, true);
    m
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Relative L2 error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Compares analytic gradients of `sum(R ⊙ build(inputs))` against central
/// differences with step `FD_STEP`, for every input flagged in `wrt`.
/// Returns the worst relative error.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    seed: u64,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut proj: Option<Tensor<f64>> = None;
    let mut eval = |ins: &[Tensor<f64>], grads: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .zip(wrt)
            .map(|(t, &w)| g.leaf(&t.clone().with_requires_grad(grads && w)))
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let r = proj
            .get_or_insert_with(|| randn(g.shape(out), &mut rng(seed ^ 0xabcdef)))
            .clone();
        let r = g.constant(r);
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        let value = g.data(loss)[0];
        if !grads {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let gs = vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, _) in inputs.iter().enumerate().filter(|(i, _)| wrt[*i]) {
        let n = inputs[i].numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
        }
        let a = analytic[i].clone().unwrap_or_else(|| vec![0.0; n]);
        worst = worst.max(rel_err(&a, &numeric));
    }
    worst
}

pub mod kernels;
pub mod oracle;
