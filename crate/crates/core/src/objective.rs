//! Global sparsity accounting and the regularised training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleKind};
use crate::routing::SKIP;
use crate::tensor::{Float, Graph, Var};
use crate::trace::TraceMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    /// Desired fraction of skipped (module, token) slots.
    #[serde(rename = "T")]
    pub t: f64,
    pub alpha: f64,
}

impl Default for SparsityTarget {
    fn default() -> Self {
        Self { t: 0.25, alpha: 8.0 }
    }
}

impl SparsityTarget {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::config(format!("target.T must lie in [0, 1], got {}", self.t)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("target.alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Fraction of skipped slots in a `2L × S` execution matrix.
pub fn compute_sparsity(decisions: &TraceMatrix) -> Result<f64> {
    if decisions.data.is_empty() {
        return Err(Error::contract("sparsity of an empty decision matrix"));
    }
    if !decisions.is_binary() {
        return Err(Error::contract("decision matrix entries must be 0 or 1"));
    }
    let skips = decisions.data.iter().filter(|&&v| v == 0.0).count();
    Ok(skips as f64 / decisions.data.len() as f64)
}

/// Number of executed module applications.
pub fn executed_modules(decisions: &TraceMatrix) -> usize {
    decisions.data.iter().filter(|&&v| v == 1.0).count()
}

/// Differentiable sparsity from the per-module hard gates `[N × 2]`.
pub fn sparsity_from_gates<T: Float>(g: &mut Graph<T>, gates: &[Var]) -> Result<Var> {
    let Some(&first) = gates.first() else {
        return Err(Error::contract("sparsity over zero modules"));
    };
    let n = g.shape(first)[0];
    let mut total: Option<Var> = None;
    for &gate in gates {
        let skip = g.column(gate, SKIP)?;
        let s = g.sum(skip);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, T::of(1.0 / (n * gates.len()) as f64)))
}

/// `|T − r|` in graph form.
pub fn sparsity_loss<T: Float>(g: &mut Graph<T>, r: Var, target: &SparsityTarget) -> Result<Var> {
    let t = g.scalar(T::of(target.t));
    let diff = g.sub(t, r)?;
    Ok(g.abs(diff))
}

pub fn sparsity_loss_value(r: f64, target: &SparsityTarget) -> f64 {
    (target.t - r).abs()
}

/// `lm + alpha · sparsity`.
pub fn total_loss<T: Float>(g: &mut Graph<T>, lm: Var, sparsity: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::contract(format!("alpha must be >= 0, got {alpha}")));
    }
    let weighted = g.scale(sparsity, T::of(alpha));
    g.add(lm, weighted)
}

/// Module-count sparsity that yields parameter ratio `ratio` when skips
/// spread evenly over attention and MLP modules:
/// `ratio · total_params / Σ module params`.
pub fn target_for_param_ratio(ratio: f64, config: &ModelConfig) -> Result<f64> {
    let module_params = config.n_layers * (config.attention_params() + config.mlp_params());
    let t = ratio * config.total_params() as f64 / module_params as f64;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!(
            "parameter ratio {ratio} needs module sparsity {t:.4}, outside [0, 1]"
        )));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub r: f64,
    #[serde(rename = "T")]
    pub target: f64,
    pub alpha: f64,
    pub tokens: usize,
    pub executed_modules: usize,
    pub skip_counts: Vec<usize>,
    pub attention_sparsity: f64,
    pub mlp_sparsity: f64,
    /// Skip fraction per module, in module order.
    pub per_depth: Vec<f64>,
    /// Skipped parameters per token over total base-model parameters.
    pub parameter_weighted_ratio: f64,
}

impl SparsityReport {
    pub fn from_decisions(decisions: &TraceMatrix, config: &ModelConfig, target: &SparsityTarget) -> Result<Self> {
        if decisions.rows != config.n_modules() {
            return Err(Error::contract(format!(
                "decision matrix has {} rows, model has {} modules",
                decisions.rows,
                config.n_modules()
            )));
        }
        let r = compute_sparsity(decisions)?;
        let s = decisions.cols;
        let skip_counts: Vec<usize> = (0..decisions.rows)
            .map(|m| decisions.row(m).iter().filter(|&&v| v == 0.0).count())
            .collect();
        let kind_sparsity = |kind: ModuleKind| {
            let (skips, rows) = skip_counts
                .iter()
                .enumerate()
                .filter(|(m, _)| ModuleKind::of(*m) == kind)
                .fold((0, 0), |(a, b), (_, &c)| (a + c, b + 1));
            skips as f64 / (rows * s) as f64
        };
        let skipped_params: usize = skip_counts
            .iter()
            .enumerate()
            .map(|(m, &c)| c * config.module_params(m))
            .sum();
        Ok(Self {
            r,
            target: target.t,
            alpha: target.alpha,
            tokens: s,
            executed_modules: executed_modules(decisions),
            attention_sparsity: kind_sparsity(ModuleKind::Attention),
            mlp_sparsity: kind_sparsity(ModuleKind::Mlp),
            per_depth: skip_counts.iter().map(|&c| c as f64 / s as f64).collect(),
            parameter_weighted_ratio: skipped_params as f64 / (s * config.total_params()) as f64,
            skip_counts,
        })
    }
}
