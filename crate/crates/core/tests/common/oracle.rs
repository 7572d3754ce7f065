//! Straight-line reference forward pass on plain vectors, written directly
//! from the formulas with no graph machinery.

use skiplab::model::{Linear, Transformer};

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn to_mat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

fn weight(l: &Linear<f64>) -> Mat {
    let mut w = to_mat(l.weight.value.data(), l.d_out());
    if let Some(ad) = &l.lora {
        let a = to_mat(ad.a.value.data(), ad.rank);
        let b = to_mat(ad.b.value.data(), l.d_out());
        let ab = matmul(&a, &b);
        for (wr, dr) in w.iter_mut().zip(&ab) {
            for (x, d) in wr.iter_mut().zip(dr) {
                *x += ad.scale * d;
            }
        }
    }
    w
}

pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `f(x)` of module `m` for a single sequence.
pub fn module(model: &Transformer<f64>, m: usize, x: &Mat) -> Mat {
    let c = &model.config;
    let layer = &model.layers[m / 2];
    if m % 2 == 0 {
        let a = &layer.attn;
        let h: Mat = x.iter().map(|r| rms_norm(r, a.norm.value.data(), c.rms_eps)).collect();
        let (q, k, v) = (
            matmul(&h, &weight(&a.wq)),
            matmul(&h, &weight(&a.wk)),
            matmul(&h, &weight(&a.wv)),
        );
        let dh = c.d_model / c.n_heads;
        let s = x.len();
        let mut o = vec![vec![0.0; c.d_model]; s];
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..s {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| cols.clone().map(|i| q[t][i] * k[j][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    for i in cols.clone() {
                        o[t][i] += pj * v[j][i];
                    }
                }
            }
        }
        matmul(&o, &weight(&a.wo))
    } else {
        let f = &layer.mlp;
        let h: Mat = x.iter().map(|r| rms_norm(r, f.norm.value.data(), c.rms_eps)).collect();
        let gate = matmul(&h, &weight(&f.w_gate));
        let up = matmul(&h, &weight(&f.w_up));
        let inner: Mat = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| silu(*a) * b).collect())
            .collect();
        matmul(&inner, &weight(&f.w_down))
    }
}

pub fn embed(model: &Transformer<f64>, tokens: &[usize]) -> Mat {
    let d = model.config.d_model;
    let tok = model.tok_emb.value.data();
    let pos = model.pos_emb.value.data();
    tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|i| tok[id * d + i] + pos[t * d + i]).collect())
        .collect()
}

pub fn head(model: &Transformer<f64>, x: &Mat) -> Mat {
    let h: Mat = x
        .iter()
        .map(|r| rms_norm(r, model.final_norm.value.data(), model.config.rms_eps))
        .collect();
    matmul(&h, &to_mat(model.lm_head.value.data(), model.config.vocab_size))
}

/// Residual states of a single sequence: `states[i]` enters module `i`,
/// the last one enters the final norm. `execute[m][t]` gates each slot.
pub fn states(model: &Transformer<f64>, tokens: &[usize], execute: Option<&[Vec<bool>]>) -> Vec<Mat> {
    let mut x = embed(model, tokens);
    let mut out = vec![x.clone()];
    for m in 0..model.n_modules() {
        let f = module(model, m, &x);
        for t in 0..x.len() {
            if execute.is_none_or(|e| e[m][t]) {
                for i in 0..x[t].len() {
                    x[t][i] += f[t][i];
                }
            }
        }
        out.push(x.clone());
    }
    out
}

pub fn forward(model: &Transformer<f64>, tokens: &[usize]) -> Mat {
    let s = states(model, tokens, None);
    head(model, s.last().unwrap())
}
