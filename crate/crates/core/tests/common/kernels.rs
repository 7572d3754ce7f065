//! Finite-difference cases for every differentiable kernel. Each case draws
//! random small shapes from its seed and returns the worst relative error.

use rand::Rng;
use skiplab::model::Transformer;
use skiplab::routing::{forward_routed, Routing};
use skiplab::tensor::{Graph, SeqLayout, Tensor};
use skiplab::trace::TraceMatrix;

use super::{fd_check, randn, random_tokens, rel_err, rng, tiny_model, FD_STEP};

pub type Case = (&'static str, fn(u64) -> f64);

pub fn all() -> Vec<Case> {
    vec![
        ("matmul", matmul),
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("scale", scale),
        ("sum", sum),
        ("mean", mean),
        ("abs", abs),
        ("silu", silu),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("rms_norm", rms_norm),
        ("cross_entropy", cross_entropy),
        ("embedding", embedding),
        ("causal_attention", attention),
        ("causal_attention_subset", attention_subset),
        ("route_mix", route_mix),
        ("column", column),
        ("gather_rows", gather_rows),
        ("scatter_rows", scatter_rows),
        ("straight_through", straight_through),
        ("dense_model", dense_model),
        ("masked_model", masked_model),
    ]
}

fn dims(seed: u64) -> (rand_chacha::ChaCha8Rng, usize, usize) {
    let mut r = rng(seed);
    let m = r.gen_range(1..5);
    let n = r.gen_range(1..6);
    (r, m, n)
}

fn matmul(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let k = r.gen_range(1..5);
    let ins = [randn(&[m, k], &mut r), randn(&[k, n], &mut r)];
    fd_check(&ins, &[true, true], seed, &|g, v| g.matmul(v[0], v[1]))
}

fn add(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r), randn(&[m, n], &mut r)];
    fd_check(&ins, &[true, true], seed, &|g, v| g.add(v[0], v[1]))
}

fn sub(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r), randn(&[m, n], &mut r)];
    fd_check(&ins, &[true, true], seed, &|g, v| g.sub(v[0], v[1]))
}

fn mul(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r), randn(&[m, n], &mut r)];
    fd_check(&ins, &[true, true], seed, &|g, v| g.mul(v[0], v[1]))
}

fn scale(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let c: f64 = r.gen_range(-3.0..3.0);
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| Ok(g.scale(v[0], c)))
}

fn sum(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    })
}

fn mean(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean(sq))
    })
}

fn abs(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let mut x = randn(&[m, n], &mut r);
    // Keep entries away from the kink so central differences are valid.
    for v in x.data_mut() {
        if v.abs() < 10.0 * FD_STEP {
            *v += 0.1;
        }
    }
    fd_check(&[x], &[true], seed, &|g, v| Ok(g.abs(v[0])))
}

fn silu(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &|g, v| Ok(g.silu(v[0])))
}

fn softmax(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n + 1], &mut r)];
    fd_check(&ins, &[true], seed, &|g, v| g.softmax(v[0]))
}

fn log_softmax(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n + 1], &mut r)];
    fd_check(&ins, &[true], seed, &|g, v| g.log_softmax(v[0]))
}

fn rms_norm(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let d = n + 1;
    let ins = [randn(&[m, d], &mut r), randn(&[d], &mut r)];
    fd_check(&ins, &[true, true], seed, &|g, v| g.rms_norm(v[0], v[1], 1e-5))
}

fn cross_entropy(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let vocab = n + 1;
    let targets = random_tokens(m, vocab, &mut r);
    let ins = [randn(&[m, vocab], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| g.cross_entropy(v[0], &targets))
}

fn embedding(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let vocab = m + 2;
    let ids = random_tokens(r.gen_range(1..7), vocab, &mut r);
    let ins = [randn(&[vocab, n], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| g.embedding(v[0], &ids))
}

fn attention_inputs(seed: u64) -> (rand_chacha::ChaCha8Rng, SeqLayout, usize, usize) {
    let mut r = rng(seed);
    let layout = SeqLayout::new(r.gen_range(1..3), r.gen_range(1..5));
    let heads = r.gen_range(1..3);
    let d = heads * r.gen_range(1..4);
    (r, layout, heads, d)
}

fn attention(seed: u64) -> f64 {
    let (mut r, layout, heads, d) = attention_inputs(seed);
    let n = layout.rows();
    let ins = [randn(&[n, d], &mut r), randn(&[n, d], &mut r), randn(&[n, d], &mut r)];
    fd_check(&ins, &[true, true, true], seed, &move |g, v| {
        g.causal_attention(v[0], v[1], v[2], heads, layout, None)
    })
}

fn attention_subset(seed: u64) -> f64 {
    let (mut r, layout, heads, d) = attention_inputs(seed);
    let n = layout.rows();
    let mut rows: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.6)).collect();
    if rows.is_empty() {
        rows.push(n - 1);
    }
    let ins = [
        randn(&[rows.len(), d], &mut r),
        randn(&[n, d], &mut r),
        randn(&[n, d], &mut r),
    ];
    fd_check(&ins, &[true, true, true], seed, &move |g, v| {
        g.causal_attention(v[0], v[1], v[2], heads, layout, Some(&rows))
    })
}

fn route_mix(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let ins = [randn(&[m, n], &mut r), randn(&[m, n], &mut r), randn(&[m, 2], &mut r)];
    fd_check(&ins, &[true, true, true], seed, &|g, v| g.route_mix(v[0], v[1], v[2]))
}

fn column(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let col = r.gen_range(0..n);
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| g.column(v[0], col))
}

fn gather_rows(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let rows: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..m)).collect();
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| g.gather_rows(v[0], &rows))
}

fn scatter_rows(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let total = m + r.gen_range(0..3);
    let rows: Vec<usize> = rand::seq::index::sample(&mut r, total, m).into_vec();
    let ins = [randn(&[m, n], &mut r)];
    fd_check(&ins, &[true], seed, &move |g, v| g.scatter_rows(v[0], &rows, total))
}

/// Gradient reaching the logits through a straight-through gate equals the
/// numeric gradient of the same loss with the soft sample in its place.
fn straight_through(seed: u64) -> f64 {
    let (mut r, m, n) = dims(seed);
    let x = randn(&[m, n], &mut r);
    let f = randn(&[m, n], &mut r);
    let z = randn(&[m, 2], &mut r);
    let proj = randn(&[m, n], &mut r);
    let loss = |z: &Tensor<f64>, hard: bool| {
        let mut g = Graph::new();
        let zv = g.leaf(&z.clone().with_requires_grad(true));
        let (xv, fv, pv) = (g.constant(x.clone()), g.constant(f.clone()), g.constant(proj.clone()));
        let y = g.softmax(zv).unwrap();
        let gate = if hard { g.straight_through(y) } else { y };
        let out = g.route_mix(xv, fv, gate).unwrap();
        let prod = g.mul(out, pv).unwrap();
        let l = g.sum(prod);
        let value = g.data(l)[0];
        g.backward(l).unwrap();
        (value, g.grad(zv).unwrap().to_vec())
    };
    let (_, analytic) = loss(&z, true);
    let numeric: Vec<f64> = (0..z.numel())
        .map(|j| {
            let (mut p, mut q) = (z.clone(), z.clone());
            p.data_mut()[j] += FD_STEP;
            q.data_mut()[j] -= FD_STEP;
            (loss(&p, false).0 - loss(&q, false).0) / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn model_case(seed: u64, mask: bool) -> f64 {
    let model = tiny_model(seed, true);
    let mut r = rng(seed ^ 7);
    let layout = SeqLayout::new(2, r.gen_range(2..=model.config.max_seq_len));
    let tokens = random_tokens(layout.rows(), model.config.vocab_size, &mut r);
    let targets = random_tokens(layout.rows(), model.config.vocab_size, &mut r);
    let fixed = mask.then(|| {
        let n = layout.rows();
        let data = (0..model.n_modules() * n)
            .map(|_| if r.gen_bool(0.6) { 1.0 } else { 0.0 })
            .collect();
        TraceMatrix::new(model.n_modules(), n, data).unwrap()
    });
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let loss = |m: &Transformer<f64>| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let logits = match &fixed {
            None => m.forward_dense(&mut g, &tokens, layout).unwrap(),
            Some(mask) => {
                forward_routed(&mut g, m, Routing::Fixed(mask), &tokens, layout)
                    .unwrap()
                    .logits
            }
        };
        let l = g.cross_entropy(logits, &targets).unwrap();
        let value = g.data(l)[0];
        g.backward(l).unwrap();
        let grads = names
            .iter()
            .map(|n| {
                g.param_grad(n)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; m.params().iter().find(|p| &p.name == n).unwrap().value.numel()])
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = loss(&model);
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..a.len())
            .map(|j| {
                let mut p = model.clone();
                p.params_mut()[pi].value.data_mut()[j] += FD_STEP;
                let mut q = model.clone();
                q.params_mut()[pi].value.data_mut()[j] -= FD_STEP;
                (loss(&p).0 - loss(&q).0) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

fn dense_model(seed: u64) -> f64 {
    model_case(seed, false)
}

fn masked_model(seed: u64) -> f64 {
    model_case(seed, true)
}
