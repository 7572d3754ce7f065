//! Measurement instruments: perplexity, cosine redundancy maps, sparsity
//! breakdowns, positional redundancy curves, a static module-drop baseline
//! and target-sparsity sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sliding_windows, validation_batches, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleKind, Transformer};
use crate::objective::compute_sparsity;
use crate::routing::{forward_routed, RouterBank, Routing};
use crate::tensor::{Float, Graph, SeqLayout};
use crate::trace::TraceMatrix;
use crate::training::{router_tune, RunConfig};

/// How modules are gated during evaluation.
#[derive(Clone, Copy)]
pub enum EvalRouting<'a, T> {
    Dense,
    Argmax(&'a RouterBank<T>),
    /// One execute flag per module, shared by every token.
    Static(&'a [bool]),
    /// One `2L × N` execution mask per batch.
    Masks(&'a [TraceMatrix]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean next-token NLL in nats.
    pub lm_loss: f64,
    pub ppl: f64,
    pub tokens: usize,
    /// Pooled skip fraction (0 for dense evaluation).
    pub r: f64,
    /// Pooled `2L × tokens` decisions; `None` for dense evaluation.
    pub decisions: Option<TraceMatrix>,
}

/// Mean NLL and perplexity over `batches`.
pub fn evaluate<T: Float>(
    model: &Transformer<T>,
    routing: EvalRouting<'_, T>,
    batches: &[Batch],
) -> Result<EvalResult> {
    if batches.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    if let EvalRouting::Masks(m) = routing {
        if m.len() != batches.len() {
            return Err(Error::contract(format!(
                "{} masks for {} batches",
                m.len(),
                batches.len()
            )));
        }
    }
    if let EvalRouting::Static(mask) = routing {
        if mask.len() != model.n_modules() {
            return Err(Error::contract(format!(
                "static mask has {} entries, model has {} modules",
                mask.len(),
                model.n_modules()
            )));
        }
    }
    let mut bits = 0.0;
    let mut tokens = 0;
    let mut parts = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let n = batch.tokens();
        let logits = match routing {
            EvalRouting::Dense => model.forward_dense(&mut g, &batch.inputs, batch.layout)?,
            EvalRouting::Argmax(routers) => {
                let out = forward_routed(&mut g, model, Routing::Argmax { routers }, &batch.inputs, batch.layout)?;
                parts.push(out.decisions);
                out.logits
            }
            EvalRouting::Static(mask) => {
                let full = static_mask(mask, n);
                let out = forward_routed(&mut g, model, Routing::Fixed(&full), &batch.inputs, batch.layout)?;
                parts.push(out.decisions);
                out.logits
            }
            EvalRouting::Masks(masks) => {
                let out = forward_routed(&mut g, model, Routing::Fixed(&masks[i]), &batch.inputs, batch.layout)?;
                parts.push(out.decisions);
                out.logits
            }
        };
        let vocab = g.shape(logits)[1];
        let mut row = vec![0.0; vocab];
        for (chunk, &t) in g.data(logits).chunks(vocab).zip(&batch.targets) {
            for (dst, &v) in row.iter_mut().zip(chunk) {
                *dst = v.as_f64();
            }
            bits += nll_bits(&row, t)?;
        }
        tokens += n;
    }
    let mean_bits = bits / tokens as f64;
    if !mean_bits.is_finite() {
        return Err(Error::NumericDomain { op: "evaluate" });
    }
    let lm_loss = mean_bits * std::f64::consts::LN_2;
    let (r, decisions) = if parts.is_empty() {
        (0.0, None)
    } else {
        let all = TraceMatrix::concat(&parts)?;
        (compute_sparsity(&all)?, Some(all))
    };
    Ok(EvalResult {
        lm_loss,
        ppl: mean_bits.exp2(),
        tokens,
        r,
        decisions,
    })
}

/// `exp(mean NLL)` of the model under `routing` over `batches`.
pub fn perplexity<T: Float>(model: &Transformer<T>, routing: EvalRouting<'_, T>, batches: &[Batch]) -> Result<f64> {
    Ok(evaluate(model, routing, batches)?.ppl)
}

/// Perplexity of raw `[S × V]` logits against `targets`.
pub fn perplexity_from_logits(logits: &[f64], vocab: usize, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() || logits.len() != targets.len() * vocab {
        return Err(Error::Shape {
            op: "perplexity",
            left: vec![logits.len()],
            right: vec![targets.len(), vocab],
        });
    }
    let mut bits = 0.0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        bits += nll_bits(row, t)?;
    }
    Ok((bits / targets.len() as f64).exp2())
}

/// Negative log2-likelihood of `target` under softmax(`row`). Working in
/// bits keeps uniform rows over a power-of-two vocabulary exact.
fn nll_bits(row: &[f64], target: usize) -> Result<f64> {
    if target >= row.len() {
        return Err(Error::Index {
            op: "perplexity",
            index: target,
            bound: row.len(),
        });
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    Ok(sum.log2() + (max - row[target]) * std::f64::consts::LOG2_E)
}

fn static_mask(execute: &[bool], n: usize) -> TraceMatrix {
    let mut m = TraceMatrix::filled(execute.len(), n, 0.0);
    for (row, &e) in execute.iter().enumerate() {
        if e {
            m.data[row * n..(row + 1) * n].fill(1.0);
        }
    }
    m
}

/// Random `2L × N` mask with exactly `round(r · 2L · S)` skipped slots in
/// every sequence, placed uniformly.
pub fn random_mask(n_modules: usize, layout: SeqLayout, r: f64, rng: &mut impl Rng) -> TraceMatrix {
    let s = layout.seq_len;
    let per_seq = n_modules * s;
    let skips = ((r * per_seq as f64).round() as usize).min(per_seq);
    let n = layout.rows();
    let mut m = TraceMatrix::filled(n_modules, n, 1.0);
    for seq in 0..layout.n_seqs {
        for slot in index::sample(rng, per_seq, skips) {
            let (module, pos) = (slot / s, slot % s);
            m.set(module, seq * s + pos, 0.0);
        }
    }
    m
}

/// Per-module per-token cosine similarity between consecutive residual
/// states, with zero-norm cases recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineTrace {
    pub matrix: TraceMatrix,
    /// `(module, token)` slots where a state had zero norm; their value is 1.
    pub zero_norm: Vec<(usize, usize)>,
}

fn cosine_rows<T: Float>(model: &Transformer<T>, tokens: &[usize], layout: SeqLayout) -> Result<CosineTrace> {
    let mut g = Graph::new();
    let trace = model.forward_dense_traced(&mut g, tokens, layout)?;
    let n = layout.rows();
    let d = model.config.d_model;
    let mut matrix = TraceMatrix::filled(model.n_modules(), n, 0.0);
    let mut zero_norm = Vec::new();
    for m in 0..model.n_modules() {
        let a = g.data(trace.states[m]);
        let b = g.data(trace.states[m + 1]);
        for t in 0..n {
            let (xa, xb) = (&a[t * d..(t + 1) * d], &b[t * d..(t + 1) * d]);
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (&u, &v) in xa.iter().zip(xb) {
                let (u, v) = (u.as_f64(), v.as_f64());
                ab += u * v;
                aa += u * u;
                bb += v * v;
            }
            let c = if aa == 0.0 || bb == 0.0 {
                zero_norm.push((m, t));
                1.0
            } else {
                (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
            };
            matrix.set(m, t, c);
        }
    }
    Ok(CosineTrace { matrix, zero_norm })
}

/// Cosine redundancy map of one sequence: `2L × S`.
pub fn cosine_trace<T: Float>(model: &Transformer<T>, tokens: &[usize]) -> Result<CosineTrace> {
    cosine_rows(model, tokens, SeqLayout::new(1, tokens.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleTypeSparsity {
    pub attention: f64,
    pub mlp: f64,
    /// Skip fraction of each module in module order.
    pub per_depth: Vec<f64>,
}

pub fn module_type_sparsity(decisions: &TraceMatrix) -> Result<ModuleTypeSparsity> {
    if decisions.cols == 0 || decisions.rows < 2 || !decisions.is_binary() {
        return Err(Error::contract(
            "module-type sparsity needs a non-empty binary 2L×S matrix",
        ));
    }
    let per_depth: Vec<f64> = (0..decisions.rows)
        .map(|m| decisions.row(m).iter().filter(|&&v| v == 0.0).count() as f64 / decisions.cols as f64)
        .collect();
    let mean_of = |kind: ModuleKind| {
        let vals: Vec<f64> = per_depth
            .iter()
            .enumerate()
            .filter(|(m, _)| ModuleKind::of(*m) == kind)
            .map(|(_, &v)| v)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    Ok(ModuleTypeSparsity {
        attention: mean_of(ModuleKind::Attention),
        mlp: mean_of(ModuleKind::Mlp),
        per_depth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRatios {
    pub start: usize,
    /// Fraction of attention slots executed inside the window.
    pub attention_exec: f64,
    pub mlp_exec: f64,
}

/// Execution ratios of attention and MLP modules per sliding window,
/// averaged over sequences of equal length.
pub fn redundancy_shift(sequences: &[TraceMatrix], window: usize, stride: usize) -> Result<Vec<WindowRatios>> {
    let Some(first) = sequences.first() else {
        return Ok(Vec::new());
    };
    if sequences.iter().any(|s| s.cols != first.cols || s.rows != first.rows) {
        return Err(Error::contract("redundancy shift needs sequences of equal shape"));
    }
    let starts = sliding_windows(first.cols, window, stride);
    Ok(starts
        .into_iter()
        .map(|start| {
            let (mut att, mut mlp) = (0.0, 0.0);
            for seq in sequences {
                let w = module_type_sparsity(&seq.columns(start, start + window)).expect("validated shape");
                att += 1.0 - w.attention;
                mlp += 1.0 - w.mlp;
            }
            let k = sequences.len() as f64;
            WindowRatios {
                start,
                attention_exec: att / k,
                mlp_exec: mlp / k,
            }
        })
        .collect())
}

/// How many modules the static baseline may drop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropBudget {
    Modules(usize),
    /// Largest prefix of the redundancy ranking whose skipped parameters per
    /// token stay within this fraction of the model's parameters.
    ParamRatio(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticDropResult {
    /// Mean calibration cosine per module.
    pub importance: Vec<f64>,
    /// Dropped modules, most redundant first.
    pub dropped: Vec<usize>,
    /// Execute flag per module.
    pub mask: Vec<bool>,
    pub r: f64,
    pub ppl: f64,
}

/// Drops the modules whose outputs most resemble their inputs (highest mean
/// cosine over `calib`), attention and MLP ranked together.
pub fn static_drop_baseline<T: Float>(
    model: &Transformer<T>,
    calib: &[Batch],
    budget: DropBudget,
    eval: &[Batch],
) -> Result<StaticDropResult> {
    let n_modules = model.n_modules();
    if calib.is_empty() {
        return Err(Error::contract("static drop baseline needs calibration data"));
    }
    let mut sums = vec![0.0; n_modules];
    let mut count = 0usize;
    for b in calib {
        let ct = cosine_rows(model, &b.inputs, b.layout)?;
        for (m, s) in sums.iter_mut().enumerate() {
            *s += ct.matrix.row(m).iter().sum::<f64>();
        }
        count += b.tokens();
    }
    let importance: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut order: Vec<usize> = (0..n_modules).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let k = match budget {
        DropBudget::Modules(k) if k > n_modules => {
            return Err(Error::contract(format!("drop budget {k} exceeds {n_modules} modules")));
        }
        DropBudget::Modules(k) => k,
        DropBudget::ParamRatio(ratio) => {
            let cfg = &model.config;
            let total = cfg.total_params() as f64;
            let mut acc = 0.0;
            order
                .iter()
                .take_while(|&&m| {
                    acc += cfg.module_params(m) as f64 / total;
                    acc <= ratio + 1e-12
                })
                .count()
        }
    };
    let dropped = order[..k].to_vec();
    let mut mask = vec![true; n_modules];
    for &m in &dropped {
        mask[m] = false;
    }
    let ppl = perplexity(model, EvalRouting::Static(&mask), eval)?;
    Ok(StaticDropResult {
        importance,
        r: k as f64 / n_modules as f64,
        dropped,
        mask,
        ppl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(rename = "T")]
    pub target: f64,
    pub r: f64,
    pub ppl: f64,
    pub attention_sparsity: f64,
    pub mlp_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub dense_ppl: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,r,ppl,attention_sparsity,mlp_sparsity\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.target, p.r, p.ppl, p.attention_sparsity, p.mlp_sparsity
            );
        }
        out
    }
}

/// Router tuning from fresh routers for each target, evaluated with argmax
/// routing on held-out batches. Points are sorted by target.
pub fn sparsity_sweep<T: Float>(
    model: &Transformer<T>,
    corpus: &Corpus,
    targets: &[f64],
    cfg: &RunConfig,
) -> Result<SweepResult> {
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let dense_ppl = perplexity(model, EvalRouting::Dense, &eval)?;
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(sorted.len());
    for t in sorted {
        let mut run = cfg.clone();
        run.target.t = t;
        let mut routers = RouterBank::new(&model.config, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        router_tune(model, &mut routers, corpus, &run)?;
        let res = evaluate(model, EvalRouting::Argmax(&routers), &eval)?;
        let kinds = module_type_sparsity(res.decisions.as_ref().expect("routed evaluation"))?;
        points.push(SweepPoint {
            target: t,
            r: res.r,
            ppl: res.ppl,
            attention_sparsity: kinds.attention,
            mlp_sparsity: kinds.mlp,
        });
    }
    Ok(SweepResult { dense_ppl, points })
}

/// SHA-256 of the JSON form of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serialises");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub config_hash: String,
}

impl TraceSidecar {
    pub fn new(matrix: &TraceMatrix, kind: &str, config: &ModelConfig) -> Self {
        Self {
            kind: kind.to_string(),
            rows: matrix.rows,
            cols: matrix.cols,
            row_labels: matrix.labels(),
            col_labels: (0..matrix.cols).map(|c| format!("t{c}")).collect(),
            config_hash: config_hash(config),
        }
    }
}

/// Writes `<stem>.csv` and its `<stem>.json` sidecar into `dir`.
pub fn export_trace(dir: &Path, stem: &str, matrix: &TraceMatrix, kind: &str, config: &ModelConfig) -> Result<()> {
    if matrix.rows != config.n_modules() {
        return Err(Error::contract(format!(
            "trace has {} rows, model has {} modules",
            matrix.rows,
            config.n_modules()
        )));
    }
    std::fs::write(dir.join(format!("{stem}.csv")), matrix.to_csv())?;
    let sidecar = TraceSidecar::new(matrix, kind, config);
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}
