//! Training stages: dense pretraining, router tuning, adapter recovery and
//! the joint router+adapter variant.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, EvalRouting};
use crate::data::{make_batches, validation_batches, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{LoraConfig, Transformer};
use crate::objective::{sparsity_from_gates, sparsity_loss, total_loss, SparsityTarget};
use crate::routing::{forward_routed, AnnealSchedule, RouterBank, Routing};
use crate::tensor::{Float, Graph, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    RouterTune,
    LoraTune,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::RouterTune => "router-tune",
            Stage::LoraTune => "lora-tune",
            Stage::Joint => "joint-tune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    CosineWithWarmup { warmup_ratio: f64 },
}

impl LrSchedule {
    /// Learning rate at `step` of a `total`-step run.
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::CosineWithWarmup { warmup_ratio } => {
                let warmup = (warmup_ratio * total as f64).ceil() as usize;
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Adapter learning rate in joint mode; `lr` applies to the routers.
    pub adapter_lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub target: SparsityTarget,
    pub anneal: AnnealSchedule,
    pub lora: LoraConfig,
    pub seed: u64,
    /// Number of held-out batches for evaluation.
    pub eval_batches: usize,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Fingerprint frozen tensors at every step and fail on any change.
    pub verify_freeze: bool,
}

impl RunConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (steps, lr, lr_schedule) = match stage {
            Stage::Pretrain => (4000, 1e-3, LrSchedule::CosineWithWarmup { warmup_ratio: 0.05 }),
            Stage::RouterTune => (2000, 2e-3, LrSchedule::Constant),
            Stage::LoraTune => (2000, 2e-4, LrSchedule::CosineWithWarmup { warmup_ratio: 0.1 }),
            Stage::Joint => (2000, 2e-3, LrSchedule::Constant),
        };
        Self {
            stage,
            steps,
            batch_size: 4,
            seq_len: 256,
            lr,
            adapter_lr: 2e-4,
            lr_schedule,
            optimizer: AdamWConfig::default(),
            target: SparsityTarget::default(),
            anneal: AnnealSchedule {
                total_steps: steps,
                ..AnnealSchedule::default()
            },
            lora: LoraConfig::default(),
            seed: 0,
            eval_batches: 16,
            eval_every: 0,
            verify_freeze: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("train.batch_size and train.seq_len must be positive"));
        }
        if !(self.lr >= 0.0 && self.adapter_lr >= 0.0) {
            return Err(Error::config("learning rates must be >= 0"));
        }
        if let LrSchedule::CosineWithWarmup { warmup_ratio } = self.lr_schedule {
            if !(0.0..=1.0).contains(&warmup_ratio) {
                return Err(Error::config(format!(
                    "warmup ratio must lie in [0, 1], got {warmup_ratio}"
                )));
            }
        }
        match (self.stage, self.lr_schedule) {
            (Stage::RouterTune, LrSchedule::CosineWithWarmup { .. }) => {
                return Err(Error::config("router tuning uses a constant learning rate"));
            }
            (Stage::LoraTune, LrSchedule::Constant) => {
                return Err(Error::config("adapter tuning uses a cosine schedule with warmup"));
            }
            _ => {}
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0 && o.grad_clip >= 0.0) {
            return Err(Error::config(
                "optimizer eps must be > 0, weight_decay and grad_clip >= 0",
            ));
        }
        self.target.validate()?;
        self.anneal.validate()
    }
}

/// AdamW with decoupled weight decay on matrices and global-norm clipping.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Updates every `(param, lr)` pair that has a gradient in `grads`.
    /// Returns the gradient norm before clipping.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a mut Param<T>, f64)>,
        grads: &HashMap<String, Vec<T>>,
    ) -> Result<f64>
    where
        T: 'a,
    {
        let targets: Vec<(&mut Param<T>, f64)> = params
            .into_iter()
            .filter(|(p, _)| grads.contains_key(&p.name))
            .collect();
        let norm = targets
            .iter()
            .flat_map(|(p, _)| grads[&p.name].iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericDomain { op: "adamw" });
        }
        let c = &self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        for (p, lr) in targets {
            let grad = &grads[&p.name];
            if grad.len() != p.value.numel() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: p.value.shape().to_vec(),
                    right: vec![grad.len()],
                });
            }
            if lr == 0.0 {
                continue;
            }
            let decay = if p.value.shape().len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let (clip, step_size, shrink) = (T::of(clip), T::of(lr / bc1), T::of(1.0 - lr * decay));
            let inv_bc2 = T::of(1.0 / bc2);
            for (((w, &gr), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gr = gr * clip;
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                *w = *w * shrink - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Order-sensitive 64-bit hash over names and raw values.
pub fn fingerprint<'a, T: Float>(params: impl IntoIterator<Item = &'a Param<T>>) -> u64 {
    const K: u64 = 0x517c_c1b7_2722_0a95;
    let mix = |h: u64, w: u64| (h.rotate_left(5) ^ w).wrapping_mul(K);
    let mut h = 0u64;
    for p in params {
        for b in p.name.bytes() {
            h = mix(h, b as u64);
        }
        for &x in p.value.data() {
            h = mix(h, x.as_f64().to_bits());
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub sparsity_loss: Option<f64>,
    pub r: Option<f64>,
    pub tau: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    /// Fingerprint of all frozen tensors after this step (verification mode).
    pub frozen_fingerprint: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub ppl: f64,
    pub r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Fingerprint of the frozen set before the first step (verification mode).
    pub frozen_fingerprint: Option<u64>,
}

impl TrainLog {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            stage: cfg.stage,
            seed: cfg.seed,
            steps: Vec::new(),
            evals: Vec::new(),
            frozen_fingerprint: None,
        }
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// One JSON object per line: every step record, then every eval record.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(
                &serde_json::json!({"kind": "step", "stage": self.stage, "record": s}),
            )?);
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&serde_json::to_string(
                &serde_json::json!({"kind": "eval", "stage": self.stage, "record": e}),
            )?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Step curves as CSV; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from("step,lm_loss,sparsity_loss,r,tau,lr,grad_norm\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.step,
                s.lm_loss,
                opt(s.sparsity_loss),
                opt(s.r),
                opt(s.tau),
                s.lr,
                s.grad_norm
            );
        }
        out
    }
}

/// Reports a non-finite intermediate as divergence at `step`.
fn at_step<V>(step: usize, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NumericDomain { op } => Error::Divergence {
            step,
            detail: format!("non-finite values reached {op}"),
        },
        e => e,
    })
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{name} is {v}"),
        })
    }
}

fn eval_record<T: Float>(
    step: usize,
    model: &Transformer<T>,
    routing: EvalRouting<'_, T>,
    batches: &[Batch],
) -> Result<EvalRecord> {
    let res = at_step(step, evaluate(model, routing, batches))?;
    check_finite(step, "validation loss", res.lm_loss)?;
    Ok(EvalRecord {
        step,
        lm_loss: res.lm_loss,
        ppl: res.ppl,
        r: res.decisions.as_ref().map(|_| res.r),
    })
}

fn should_eval(cfg: &RunConfig, step: usize) -> bool {
    cfg.eval_every > 0 && step > 0 && step.is_multiple_of(cfg.eval_every) && step < cfg.steps
}

/// Next-token training of all base weights with dense forwards.
pub fn pretrain_dense<T: Float>(model: &mut Transformer<T>, corpus: &Corpus, cfg: &RunConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let mut batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    model.set_trainable(true, false);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = TrainLog::new(cfg);
    for step in 0..cfg.steps {
        if should_eval(cfg, step) {
            log.evals.push(eval_record(step, model, EvalRouting::Dense, &eval)?);
        }
        let batch = batches.next_batch();
        let lr = cfg.lr_schedule.lr(cfg.lr, step, cfg.steps);
        let mut g = Graph::new();
        let logits = at_step(step, model.forward_dense(&mut g, &batch.inputs, batch.layout))?;
        let loss = at_step(step, g.cross_entropy(logits, &batch.targets))?;
        let lm = g.data(loss)[0].as_f64();
        check_finite(step, "training loss", lm)?;
        g.backward(loss)?;
        let grads = g.take_param_grads();
        drop(g);
        let grad_norm = at_step(step, opt.step(model.params_mut().into_iter().map(|p| (p, lr)), &grads))?;
        log.steps.push(StepRecord {
            step,
            lm_loss: lm,
            sparsity_loss: None,
            r: None,
            tau: None,
            lr,
            grad_norm,
            frozen_fingerprint: None,
        });
    }
    log.evals
        .push(eval_record(cfg.steps, model, EvalRouting::Dense, &eval)?);
    Ok(log)
}

/// Stage 1: only the routers learn; the model is read-only.
pub fn router_tune<T: Float>(
    model: &Transformer<T>,
    routers: &mut RouterBank<T>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    routers.check_matches(&model.config)?;
    let mut frozen = model.clone();
    frozen.set_trainable(false, false);
    routers.set_trainable(true);
    routed_loop(&frozen, routers, None, corpus, cfg)
}

/// Routers and adapters trained together under the sparsity-regularised loss.
pub fn joint_tune<T: Float>(
    model: &mut Transformer<T>,
    routers: &mut RouterBank<T>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    routers.check_matches(&model.config)?;
    if !model.has_adapters() {
        return Err(Error::contract("joint tuning needs adapters attached to the model"));
    }
    model.set_trainable(false, true);
    routers.set_trainable(true);
    let snapshot = model.clone();
    let mut adapters_out = model.clone();
    let log = routed_loop(&snapshot, routers, Some(&mut adapters_out), corpus, cfg)?;
    *model = adapters_out;
    Ok(log)
}

/// Shared loop for the two sampled-routing stages. With `adapters = Some`,
/// adapter tensors of that model are trained alongside the routers.
fn routed_loop<T: Float>(
    initial: &Transformer<T>,
    routers: &mut RouterBank<T>,
    mut adapters: Option<&mut Transformer<T>>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<TrainLog> {
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let mut batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = TrainLog::new(cfg);
    let frozen_of = |m: &Transformer<T>| {
        fingerprint(
            m.params()
                .into_iter()
                .filter(|p| !Transformer::<T>::is_adapter_param(&p.name)),
        )
    };
    if cfg.verify_freeze {
        log.frozen_fingerprint = Some(frozen_of(initial));
    }
    for step in 0..cfg.steps {
        let current = adapters.as_deref().unwrap_or(initial);
        if should_eval(cfg, step) {
            log.evals
                .push(eval_record(step, current, EvalRouting::Argmax(routers), &eval)?);
        }
        let batch = batches.next_batch();
        let tau = cfg.anneal.tau(step);
        let lr = cfg.lr_schedule.lr(cfg.lr, step, cfg.steps);
        let adapter_lr = cfg.lr_schedule.lr(cfg.adapter_lr, step, cfg.steps);
        let mut g = Graph::new();
        let routed = at_step(
            step,
            forward_routed(
                &mut g,
                current,
                Routing::Sampled {
                    routers,
                    tau,
                    rng: &mut noise,
                },
                &batch.inputs,
                batch.layout,
            ),
        )?;
        let lm = at_step(step, g.cross_entropy(routed.logits, &batch.targets))?;
        let r = sparsity_from_gates(&mut g, &routed.gates)?;
        let sp = sparsity_loss(&mut g, r, &cfg.target)?;
        let total = total_loss(&mut g, lm, sp, cfg.target.alpha)?;
        let (lm_v, sp_v, r_v) = (g.data(lm)[0].as_f64(), g.data(sp)[0].as_f64(), g.data(r)[0].as_f64());
        check_finite(step, "training loss", g.data(total)[0].as_f64())?;
        g.backward(total)?;
        let grads = g.take_param_grads();
        drop(g);
        let mut groups: Vec<(&mut Param<T>, f64)> = routers.params_mut().map(|p| (p, lr)).collect();
        if let Some(m) = adapters.as_deref_mut() {
            groups.extend(
                m.params_mut()
                    .into_iter()
                    .filter(|p| Transformer::<T>::is_adapter_param(&p.name))
                    .map(|p| (p, adapter_lr)),
            );
        }
        let grad_norm = at_step(step, opt.step(groups, &grads))?;
        let current = adapters.as_deref().unwrap_or(initial);
        let frozen_fingerprint = if cfg.verify_freeze {
            let fp = frozen_of(current);
            if Some(fp) != log.frozen_fingerprint {
                return Err(Error::contract(format!("frozen tensors changed at step {step}")));
            }
            Some(fp)
        } else {
            None
        };
        log.steps.push(StepRecord {
            step,
            lm_loss: lm_v,
            sparsity_loss: Some(sp_v),
            r: Some(r_v),
            tau: Some(tau),
            lr,
            grad_norm,
            frozen_fingerprint,
        });
    }
    let current = adapters.as_deref().unwrap_or(initial);
    log.evals
        .push(eval_record(cfg.steps, current, EvalRouting::Argmax(routers), &eval)?);
    Ok(log)
}

/// Stage 2: only adapter tensors learn, under frozen argmax routing and the
/// language-modelling loss alone.
pub fn lora_tune<T: Float>(
    model: &mut Transformer<T>,
    routers: &RouterBank<T>,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if routers.is_empty() {
        return Err(Error::contract("adapter tuning needs tuned routers"));
    }
    routers.check_matches(&model.config)?;
    if !model.has_adapters() {
        return Err(Error::contract("adapter tuning needs adapters attached to the model"));
    }
    let mut routers = routers.clone();
    routers.set_trainable(false);
    model.set_trainable(false, true);
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let mut batches = make_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = TrainLog::new(cfg);
    let frozen_of = |m: &Transformer<T>| {
        fingerprint(
            m.params()
                .into_iter()
                .filter(|p| !Transformer::<T>::is_adapter_param(&p.name))
                .chain(routers.params()),
        )
    };
    if cfg.verify_freeze {
        log.frozen_fingerprint = Some(frozen_of(model));
    }
    for step in 0..cfg.steps {
        if should_eval(cfg, step) {
            log.evals
                .push(eval_record(step, model, EvalRouting::Argmax(&routers), &eval)?);
        }
        let batch = batches.next_batch();
        let lr = cfg.lr_schedule.lr(cfg.lr, step, cfg.steps);
        let mut g = Graph::new();
        let routed = at_step(
            step,
            forward_routed(
                &mut g,
                model,
                Routing::Argmax { routers: &routers },
                &batch.inputs,
                batch.layout,
            ),
        )?;
        let lm = at_step(step, g.cross_entropy(routed.logits, &batch.targets))?;
        let lm_v = g.data(lm)[0].as_f64();
        check_finite(step, "training loss", lm_v)?;
        let r_v = crate::objective::compute_sparsity(&routed.decisions)?;
        g.backward(lm)?;
        let grads = g.take_param_grads();
        drop(g);
        let params = model
            .params_mut()
            .into_iter()
            .filter(|p| Transformer::<T>::is_adapter_param(&p.name))
            .map(|p| (p, lr));
        let grad_norm = at_step(step, opt.step(params, &grads))?;
        let frozen_fingerprint = if cfg.verify_freeze {
            let fp = frozen_of(model);
            if Some(fp) != log.frozen_fingerprint {
                return Err(Error::contract(format!("frozen tensors changed at step {step}")));
            }
            Some(fp)
        } else {
            None
        };
        log.steps.push(StepRecord {
            step,
            lm_loss: lm_v,
            sparsity_loss: None,
            r: Some(r_v),
            tau: None,
            lr,
            grad_norm,
            frozen_fingerprint,
        });
    }
    log.evals
        .push(eval_record(cfg.steps, model, EvalRouting::Argmax(&routers), &eval)?);
    Ok(log)
}
