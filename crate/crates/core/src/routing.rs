//! Per-module routers and gated residual updates.
//!
//! Every module owns a bias-free linear router `W: [d_model × 2]` fed with
//! the residual-stream state entering the module. Logit index 0 means skip,
//! index 1 means execute. During router tuning decisions are drawn with
//! Gumbel-Softmax and discretised with the straight-through estimator; at
//! evaluation time the router's argmax is used without noise.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tensor::{argmax_prefer_last, log_sum_exp, softmax_in_place, Float, Graph, Param, SeqLayout, Tensor, Var};
use crate::trace::TraceMatrix;

pub const SKIP: usize = 0;
pub const EXECUTE: usize = 1;

const UNIFORM_EPS: f64 = 1e-12;

/// Linear temperature schedule, held at `tau_end` past `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau_start: 5.0,
            tau_end: 1.0,
            total_steps: 1000,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::config("anneal temperatures must be > 0"));
        }
        Ok(())
    }

    pub fn tau(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.tau_end;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

/// `-ln(-ln u)` with `u` clamped to `[1e-12, 1 - 1e-12]`.
pub fn gumbel_noise(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

pub fn sample_gumbel(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    gumbel_noise(rng.gen::<f64>())
}

/// `softmax((log_pi + g) / tau)`.
pub fn gumbel_softmax(log_pi: &[f64], g: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("gumbel_softmax needs tau > 0, got {tau}")));
    }
    if log_pi.len() != g.len() {
        return Err(Error::Shape {
            op: "gumbel_softmax",
            left: vec![log_pi.len()],
            right: vec![g.len()],
        });
    }
    let mut y: Vec<f64> = log_pi.iter().zip(g).map(|(l, n)| (l + n) / tau).collect();
    softmax_in_place(&mut y);
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionMode {
    SampledSt,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteDecision {
    pub soft: [f64; 2],
    pub hard: [f64; 2],
    pub mode: DecisionMode,
}

impl RouteDecision {
    pub fn executes(&self) -> bool {
        self.hard[EXECUTE] == 1.0
    }
}

/// One-hot argmax of `soft`; a tie executes. The hard value carries the soft
/// gradient in graph form (see [`Graph::straight_through`]).
pub fn straight_through(soft: [f64; 2]) -> RouteDecision {
    let mut hard = [0.0; 2];
    hard[argmax_prefer_last(&soft)] = 1.0;
    RouteDecision {
        soft,
        hard,
        mode: DecisionMode::SampledSt,
    }
}

#[derive(Clone, Debug)]
pub struct RouterState<T> {
    pub module_id: usize,
    pub weight: Param<T>,
}

impl<T: Float> RouterState<T> {
    /// Weights drawn from `N(0, 0.02²)`.
    pub fn new(module_id: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            module_id,
            weight: Param::new(router_name(module_id), Tensor::randn([d_model, 2], 0.02, rng)),
        }
    }

    pub fn logits(&self, x: &[T]) -> Result<[T; 2]> {
        let d = self.weight.value.shape()[0];
        if x.len() != d {
            return Err(Error::Shape {
                op: "router",
                left: vec![x.len()],
                right: self.weight.value.shape().to_vec(),
            });
        }
        let w = self.weight.value.data();
        let mut r = [T::zero(); 2];
        for (i, &xv) in x.iter().enumerate() {
            r[0] += xv * w[2 * i];
            r[1] += xv * w[2 * i + 1];
        }
        Ok(r)
    }
}

pub fn router_name(module: usize) -> String {
    format!("router.{module}")
}

/// One router per module, ordered like the modules.
#[derive(Clone, Debug)]
pub struct RouterBank<T> {
    pub routers: Vec<RouterState<T>>,
}

impl<T: Float> RouterBank<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            routers: (0..config.n_modules())
                .map(|m| RouterState::new(m, config.d_model, rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.routers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.routers.iter().map(|r| r.weight.value.numel()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.routers.iter().map(|r| &r.weight)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.routers.iter_mut().map(|r| &mut r.weight)
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut().for_each(|p| p.value.set_requires_grad(flag));
    }

    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        if self.routers.len() != config.n_modules() {
            return Err(Error::contract(format!(
                "expected {} routers, got {}",
                config.n_modules(),
                self.routers.len()
            )));
        }
        for (i, r) in self.routers.iter().enumerate() {
            if r.module_id != i || r.weight.value.shape() != [config.d_model, 2] {
                return Err(Error::contract(format!("router {i} does not match the model")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> RouterBank<U> {
        RouterBank {
            routers: self
                .routers
                .iter()
                .map(|r| RouterState {
                    module_id: r.module_id,
                    weight: Param::new(r.weight.name.clone(), r.weight.value.cast()),
                })
                .collect(),
        }
    }
}

/// How a single token's decision is produced.
pub enum TokenMode<'a> {
    SampledSt { tau: f64, rng: &'a mut dyn RngCore },
    Argmax,
}

/// Gated update for one token: `g[1]·(f + x) + g[0]·x`.
pub fn route_token<T: Float>(
    router: &RouterState<T>,
    x: &[T],
    f_out: &[T],
    mode: TokenMode<'_>,
) -> Result<(Vec<T>, RouteDecision)> {
    if f_out.len() != x.len() {
        return Err(Error::Shape {
            op: "route_token",
            left: vec![x.len()],
            right: vec![f_out.len()],
        });
    }
    let r = router.logits(x)?;
    let r = [r[0].as_f64(), r[1].as_f64()];
    let decision = match mode {
        TokenMode::SampledSt { tau, rng } => {
            let lse = log_sum_exp(&r);
            let log_pi = [r[0] - lse, r[1] - lse];
            let noise = [sample_gumbel(rng), sample_gumbel(rng)];
            let y = gumbel_softmax(&log_pi, &noise, tau)?;
            straight_through([y[0], y[1]])
        }
        TokenMode::Argmax => {
            let mut soft = r;
            softmax_in_place(&mut soft);
            let mut hard = [0.0; 2];
            hard[argmax_prefer_last(&r)] = 1.0;
            RouteDecision {
                soft,
                hard,
                mode: DecisionMode::Argmax,
            }
        }
    };
    let (g0, g1) = (T::of(decision.hard[SKIP]), T::of(decision.hard[EXECUTE]));
    let next = x.iter().zip(f_out).map(|(&xv, &fv)| g1 * (fv + xv) + g0 * xv).collect();
    Ok((next, decision))
}

/// Source of per-(module, token) decisions for a routed forward pass.
pub enum Routing<'a, T> {
    /// Gumbel-Softmax + straight-through with fresh noise for every slot.
    Sampled {
        routers: &'a RouterBank<T>,
        tau: f64,
        rng: &'a mut dyn RngCore,
    },
    /// Noise-free router argmax (ties execute).
    Argmax { routers: &'a RouterBank<T> },
    /// A fixed `2L × N` execution mask (1 = execute).
    Fixed(&'a TraceMatrix),
}

pub struct RoutedForward {
    pub logits: Var,
    /// `2L × N` execution indicators.
    pub decisions: TraceMatrix,
    /// Per-module `[N × 2]` hard gates. In sampled mode they carry the
    /// straight-through gradient of the soft sample.
    pub gates: Vec<Var>,
    /// Per-module soft samples (sampled mode only).
    pub soft: Vec<Var>,
    /// Noise-free router execute probability per slot; `None` for fixed masks.
    pub exec_prob: Option<TraceMatrix>,
}

/// Routed forward over a stacked batch.
pub fn forward_routed<T: Float>(
    g: &mut Graph<T>,
    model: &Transformer<T>,
    routing: Routing<'_, T>,
    tokens: &[usize],
    layout: SeqLayout,
) -> Result<RoutedForward> {
    let n_modules = model.n_modules();
    let n = layout.rows();
    match &routing {
        Routing::Sampled { routers, tau, .. } => {
            routers.check_matches(&model.config)?;
            if !(*tau > 0.0) {
                return Err(Error::contract(format!("routing temperature must be > 0, got {tau}")));
            }
        }
        Routing::Argmax { routers } => routers.check_matches(&model.config)?,
        Routing::Fixed(mask) => {
            if mask.rows != n_modules || mask.cols != n || !mask.is_binary() {
                return Err(Error::contract(format!(
                    "fixed mask must be a binary {n_modules}×{n} matrix, got {}×{}",
                    mask.rows, mask.cols
                )));
            }
        }
    }

    let mut routing = routing;
    let mut x = model.embed(g, tokens, layout)?;
    let mut decisions = TraceMatrix::filled(n_modules, n, 0.0);
    let mut gates = Vec::with_capacity(n_modules);
    let mut soft = Vec::new();
    let mut exec_prob = match &routing {
        Routing::Fixed(_) => None,
        _ => Some(TraceMatrix::filled(n_modules, n, 0.0)),
    };

    for m in 0..n_modules {
        match &mut routing {
            Routing::Sampled { routers, tau, rng } => {
                let router = &routers.routers[m];
                let w = g.param(&router.weight.name, &router.weight.value);
                let logits = g.matmul(x, w)?;
                let log_pi = g.log_softmax(logits)?;
                if let Some(p) = exec_prob.as_mut() {
                    for t in 0..n {
                        p.set(m, t, g.data(log_pi)[2 * t + EXECUTE].as_f64().exp());
                    }
                }
                let noise: Vec<T> = (0..2 * n).map(|_| T::of(sample_gumbel(&mut **rng))).collect();
                let noise = g.constant(Tensor::new([n, 2], noise)?);
                let z = g.add(log_pi, noise)?;
                let z = g.scale(z, T::of(1.0 / *tau));
                let y = g.softmax(z)?;
                let hard = g.straight_through(y);
                for t in 0..n {
                    decisions.set(m, t, g.data(hard)[2 * t + EXECUTE].as_f64());
                }
                let f = model.forward_module(g, m, x, layout, None)?;
                x = g.route_mix(x, f, hard)?;
                gates.push(hard);
                soft.push(y);
            }
            Routing::Argmax { routers } => {
                let router = &routers.routers[m];
                let w = g.param(&router.weight.name, &router.weight.value);
                let logits = g.matmul(x, w)?;
                let execute: Vec<bool> = g
                    .data(logits)
                    .chunks(2)
                    .map(|r| argmax_prefer_last(r) == EXECUTE)
                    .collect();
                if let Some(p) = exec_prob.as_mut() {
                    for (t, r) in g.data(logits).chunks(2).enumerate() {
                        let mut pr = [r[0].as_f64(), r[1].as_f64()];
                        softmax_in_place(&mut pr);
                        p.set(m, t, pr[EXECUTE]);
                    }
                }
                let (next, gate) = apply_hard(g, model, m, x, layout, &execute)?;
                for (t, &e) in execute.iter().enumerate() {
                    decisions.set(m, t, if e { 1.0 } else { 0.0 });
                }
                x = next;
                gates.push(gate);
            }
            Routing::Fixed(mask) => {
                let execute: Vec<bool> = mask.row(m).iter().map(|&v| v == 1.0).collect();
                let (next, gate) = apply_hard(g, model, m, x, layout, &execute)?;
                decisions.data[m * n..(m + 1) * n].copy_from_slice(mask.row(m));
                x = next;
                gates.push(gate);
            }
        }
    }
    let logits = model.head(g, x)?;
    Ok(RoutedForward {
        logits,
        decisions,
        gates,
        soft,
        exec_prob,
    })
}

/// Applies fixed decisions, computing the module only for executing rows.
fn apply_hard<T: Float>(
    g: &mut Graph<T>,
    model: &Transformer<T>,
    module: usize,
    x: Var,
    layout: SeqLayout,
    execute: &[bool],
) -> Result<(Var, Var)> {
    let n = execute.len();
    let mut gate = vec![T::zero(); 2 * n];
    for (t, &e) in execute.iter().enumerate() {
        gate[2 * t + if e { EXECUTE } else { SKIP }] = T::one();
    }
    let gate = g.constant(Tensor::new([n, 2], gate)?);
    let active: Vec<usize> = (0..n).filter(|&t| execute[t]).collect();
    if active.is_empty() {
        return Ok((x, gate));
    }
    let f = if active.len() == n {
        model.forward_module(g, module, x, layout, None)?
    } else {
        let part = model.forward_module(g, module, x, layout, Some(&active))?;
        g.scatter_rows(part, &active, n)?
    };
    Ok((g.route_mix(x, f, gate)?, gate))
}
