//! Decoder-only transformer split into independently callable modules.
//!
//! Layer `i` contributes two modules: attention (module `2i`) and MLP
//! (module `2i + 1`). [`Transformer::forward_module`] returns only `f(x)`;
//! the residual add belongs to the caller so that routing can gate it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Param, SeqLayout, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            vocab_size: 256,
            max_seq_len: 256,
            rms_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::config("model.rms_eps must be > 0"));
        }
        Ok(())
    }

    pub fn n_modules(&self) -> usize {
        2 * self.n_layers
    }

    pub fn attention_params(&self) -> usize {
        4 * self.d_model * self.d_model + self.d_model
    }

    pub fn mlp_params(&self) -> usize {
        3 * self.d_model * self.d_ff + self.d_model
    }

    pub fn module_params(&self, module: usize) -> usize {
        match ModuleKind::of(module) {
            ModuleKind::Attention => self.attention_params(),
            ModuleKind::Mlp => self.mlp_params(),
        }
    }

    /// Base model parameters (embeddings, all modules, final norm, LM head).
    pub fn total_params(&self) -> usize {
        let emb = (self.vocab_size + self.max_seq_len) * self.d_model;
        let head = self.d_model + self.d_model * self.vocab_size;
        emb + self.n_layers * (self.attention_params() + self.mlp_params()) + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    Attention,
    Mlp,
}

impl ModuleKind {
    pub fn of(module: usize) -> Self {
        if module.is_multiple_of(2) {
            ModuleKind::Attention
        } else {
            ModuleKind::Mlp
        }
    }
}

/// `attn0, mlp0, attn1, mlp1, ...`
pub fn module_label(module: usize) -> String {
    match ModuleKind::of(module) {
        ModuleKind::Attention => format!("attn{}", module / 2),
        ModuleKind::Mlp => format!("mlp{}", module / 2),
    }
}

/// Low-rank update `W + scale · A·B` attached to one projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    pub target: String,
    pub rank: usize,
    pub scale: f64,
    pub a: Param<T>,
    pub b: Param<T>,
}

impl<T: Float> LoraAdapter<T> {
    /// Standard init: `A ~ N(0, 1/d_in)`, `B = 0`, so the adapted weight starts equal to `W`.
    pub fn init(target: &str, d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let a = Tensor::randn([d_in, rank], 1.0 / (d_in as f64).sqrt(), rng);
        Self::from_factors(target, scale, a, Tensor::zeros([rank, d_out]))
    }

    pub fn from_factors(target: &str, scale: f64, a: Tensor<T>, b: Tensor<T>) -> Self {
        Self {
            target: target.to_string(),
            rank: a.cols(),
            scale,
            a: Param::new(format!("{target}.lora_a"), a),
            b: Param::new(format!("{target}.lora_b"), b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    /// Short projection names applied to every layer.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 2.0,
            targets: PROJECTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const PROJECTIONS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Float> Linear<T> {
    fn new(name: String, d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(name, Tensor::randn([d_in, d_out], std, rng)),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let y = g.matmul(x, w)?;
        match &self.lora {
            None => Ok(y),
            Some(ad) => {
                let a = g.param(&ad.a.name, &ad.a.value);
                let b = g.param(&ad.b.name, &ad.b.value);
                let xa = g.matmul(x, a)?;
                let delta = g.matmul(xa, b)?;
                let delta = g.scale(delta, T::of(ad.scale));
                g.add(y, delta)
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.lora.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock<T> {
    pub norm: Param<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlpBlock<T> {
    pub norm: Param<T>,
    pub w_gate: Linear<T>,
    pub w_up: Linear<T>,
    pub w_down: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub attn: AttentionBlock<T>,
    pub mlp: MlpBlock<T>,
}

impl<T: Float> Layer<T> {
    fn linears(&self) -> [&Linear<T>; 7] {
        let (a, m) = (&self.attn, &self.mlp);
        [&a.wq, &a.wk, &a.wv, &a.wo, &m.w_gate, &m.w_up, &m.w_down]
    }

    fn linears_mut(&mut self) -> [&mut Linear<T>; 7] {
        let (a, m) = (&mut self.attn, &mut self.mlp);
        [
            &mut a.wq,
            &mut a.wk,
            &mut a.wv,
            &mut a.wo,
            &mut m.w_gate,
            &mut m.w_up,
            &mut m.w_down,
        ]
    }
}

/// Residual-stream states captured by a dense pass: `states[i]` is the input
/// of module `i`, `states[2L]` the input of the final norm.
pub struct DenseTrace {
    pub logits: Var,
    pub states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub tok_emb: Param<T>,
    pub pos_emb: Param<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

impl<T: Float> Transformer<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = |s: &str| format!("layers.{i}.{s}");
                Layer {
                    attn: AttentionBlock {
                        norm: Param::new(p("attn.norm"), Tensor::full([d], T::one())),
                        wq: Linear::new(p("attn.wq"), d, d, std, rng),
                        wk: Linear::new(p("attn.wk"), d, d, std, rng),
                        wv: Linear::new(p("attn.wv"), d, d, std, rng),
                        wo: Linear::new(p("attn.wo"), d, d, resid_std, rng),
                    },
                    mlp: MlpBlock {
                        norm: Param::new(p("mlp.norm"), Tensor::full([d], T::one())),
                        w_gate: Linear::new(p("mlp.w_gate"), d, config.d_ff, std, rng),
                        w_up: Linear::new(p("mlp.w_up"), d, config.d_ff, std, rng),
                        w_down: Linear::new(p("mlp.w_down"), config.d_ff, d, resid_std, rng),
                    },
                }
            })
            .collect();
        Ok(Self {
            tok_emb: Param::new("tok_emb", Tensor::randn([config.vocab_size, d], std, rng)),
            pos_emb: Param::new("pos_emb", Tensor::randn([config.max_seq_len, d], std, rng)),
            layers,
            final_norm: Param::new("final_norm", Tensor::full([d], T::one())),
            lm_head: Param::new("lm_head", Tensor::randn([d, config.vocab_size], std, rng)),
            config,
        })
    }

    pub fn n_modules(&self) -> usize {
        self.config.n_modules()
    }

    /// All tensors in a fixed order: base weights first, then adapters.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.push(&layer.attn.norm);
            out.extend([&layer.attn.wq, &layer.attn.wk, &layer.attn.wv, &layer.attn.wo].map(|l| &l.weight));
            out.push(&layer.mlp.norm);
            out.extend([&layer.mlp.w_gate, &layer.mlp.w_up, &layer.mlp.w_down].map(|l| &l.weight));
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out.extend(self.adapters().flat_map(|a| [&a.a, &a.b]));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut base = vec![&mut self.tok_emb, &mut self.pos_emb];
        let mut adapters = Vec::new();
        for layer in &mut self.layers {
            let (a, m) = (&mut layer.attn, &mut layer.mlp);
            base.push(&mut a.norm);
            for lin in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
                let mut it = lin.params_mut();
                base.push(it.next().expect("weight"));
                adapters.extend(it);
            }
            base.push(&mut m.norm);
            for lin in [&mut m.w_gate, &mut m.w_up, &mut m.w_down] {
                let mut it = lin.params_mut();
                base.push(it.next().expect("weight"));
                adapters.extend(it);
            }
        }
        base.push(&mut self.final_norm);
        base.push(&mut self.lm_head);
        base.extend(adapters);
        base
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.linears().into_iter().filter_map(|lin| lin.lora.as_ref()))
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }

    pub fn is_adapter_param(name: &str) -> bool {
        name.ends_with(".lora_a") || name.ends_with(".lora_b")
    }

    /// Marks base weights and adapter tensors trainable or frozen.
    pub fn set_trainable(&mut self, base: bool, adapters: bool) {
        for p in self.params_mut() {
            let flag = if Self::is_adapter_param(&p.name) {
                adapters
            } else {
                base
            };
            p.value.set_requires_grad(flag);
        }
    }

    fn linear_mut(&mut self, name: &str) -> Option<&mut Linear<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.linears_mut())
            .find(|lin| lin.weight.name == name)
    }

    /// Attaches adapters by full weight name (`layers.{i}.attn.wq`, ...).
    pub fn apply_lora(&mut self, adapters: Vec<LoraAdapter<T>>) -> Result<()> {
        for ad in &adapters {
            let lin = self
                .linear_mut(&ad.target)
                .ok_or_else(|| Error::config(format!("unknown adapter target `{}`", ad.target)))?;
            let (d_in, d_out) = (lin.d_in(), lin.d_out());
            if ad.rank == 0 || ad.rank > d_in.min(d_out) {
                return Err(Error::config(format!(
                    "adapter rank {} invalid for `{}` ({d_in}×{d_out})",
                    ad.rank, ad.target
                )));
            }
            if ad.a.value.shape() != [d_in, ad.rank] || ad.b.value.shape() != [ad.rank, d_out] {
                return Err(Error::Shape {
                    op: "apply_lora",
                    left: ad.a.value.shape().to_vec(),
                    right: ad.b.value.shape().to_vec(),
                });
            }
        }
        for ad in adapters {
            let lin = self.linear_mut(&ad.target).expect("validated above");
            lin.lora = Some(ad);
        }
        Ok(())
    }

    /// Builds freshly initialised adapters for every layer's `cfg.targets`.
    pub fn init_lora(&self, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<Vec<LoraAdapter<T>>> {
        for t in &cfg.targets {
            if !PROJECTIONS.contains(&t.as_str()) {
                return Err(Error::config(format!("unknown adapter target `{t}`")));
            }
        }
        let mut out = Vec::new();
        for layer in &self.layers {
            for lin in layer.linears() {
                let short = lin.weight.name.rsplit('.').next().unwrap_or_default();
                if cfg.targets.iter().any(|t| t == short) {
                    out.push(LoraAdapter::init(
                        &lin.weight.name,
                        lin.d_in(),
                        lin.d_out(),
                        cfg.rank,
                        cfg.scale,
                        rng,
                    ));
                }
            }
        }
        Ok(out)
    }

    fn check_layout(&self, layout: SeqLayout) -> Result<()> {
        if layout.seq_len > self.config.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {} exceeds max_seq_len {}",
                layout.seq_len, self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Token plus learned absolute position embeddings, `[n_seqs·seq_len × d]`.
    pub fn embed(&self, g: &mut Graph<T>, tokens: &[usize], layout: SeqLayout) -> Result<Var> {
        self.check_layout(layout)?;
        if tokens.len() != layout.rows() {
            return Err(Error::Shape {
                op: "embed",
                left: vec![tokens.len()],
                right: vec![layout.n_seqs, layout.seq_len],
            });
        }
        let tok = g.param(&self.tok_emb.name, &self.tok_emb.value);
        let pos = g.param(&self.pos_emb.name, &self.pos_emb.value);
        let x = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..layout.rows()).map(|r| r % layout.seq_len).collect();
        let p = g.embedding(pos, &positions)?;
        g.add(x, p)
    }

    /// `f_l(x)` for module `module` without the residual.
    ///
    /// With `active = Some(rows)` only those rows are computed and the result
    /// has `rows.len()` rows. Attention still reads keys and values from every
    /// row of `x`, so skipped tokens stay visible as context.
    pub fn forward_module(
        &self,
        g: &mut Graph<T>,
        module: usize,
        x: Var,
        layout: SeqLayout,
        active: Option<&[usize]>,
    ) -> Result<Var> {
        self.check_layout(layout)?;
        let layer = self.layers.get(module / 2).ok_or(Error::Index {
            op: "forward_module",
            index: module,
            bound: self.n_modules(),
        })?;
        let eps = self.config.rms_eps;
        match ModuleKind::of(module) {
            ModuleKind::Attention => {
                let a = &layer.attn;
                let gain = g.param(&a.norm.name, &a.norm.value);
                let h = g.rms_norm(x, gain, eps)?;
                let hq = match active {
                    Some(rows) => g.gather_rows(h, rows)?,
                    None => h,
                };
                let q = a.wq.forward(g, hq)?;
                let k = a.wk.forward(g, h)?;
                let v = a.wv.forward(g, h)?;
                let o = g.causal_attention(q, k, v, self.config.n_heads, layout, active)?;
                a.wo.forward(g, o)
            }
            ModuleKind::Mlp => {
                let m = &layer.mlp;
                let xs = match active {
                    Some(rows) => g.gather_rows(x, rows)?,
                    None => x,
                };
                let gain = g.param(&m.norm.name, &m.norm.value);
                let h = g.rms_norm(xs, gain, eps)?;
                let gate = m.w_gate.forward(g, h)?;
                let gate = g.silu(gate);
                let up = m.w_up.forward(g, h)?;
                let inner = g.mul(gate, up)?;
                m.w_down.forward(g, inner)
            }
        }
    }

    /// Final norm and LM head.
    pub fn head(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = g.param(&self.final_norm.name, &self.final_norm.value);
        let h = g.rms_norm(x, gain, self.config.rms_eps)?;
        let w = g.param(&self.lm_head.name, &self.lm_head.value);
        g.matmul(h, w)
    }

    /// All `2L` modules with residual adds, attention then MLP per layer.
    pub fn forward_dense(&self, g: &mut Graph<T>, tokens: &[usize], layout: SeqLayout) -> Result<Var> {
        Ok(self.forward_dense_traced(g, tokens, layout)?.logits)
    }

    pub fn forward_dense_traced(&self, g: &mut Graph<T>, tokens: &[usize], layout: SeqLayout) -> Result<DenseTrace> {
        let mut x = self.embed(g, tokens, layout)?;
        let mut states = Vec::with_capacity(self.n_modules() + 1);
        states.push(x);
        for m in 0..self.n_modules() {
            let f = self.forward_module(g, m, x, layout, None)?;
            x = g.add(f, x)?;
            states.push(x);
        }
        let logits = self.head(g, x)?;
        Ok(DenseTrace { logits, states })
    }

    pub fn cast<U: Float>(&self) -> Transformer<U> {
        let p = |p: &Param<T>| Param::new(p.name.clone(), p.value.cast());
        let lin = |l: &Linear<T>| Linear {
            weight: p(&l.weight),
            lora: l.lora.as_ref().map(|a| LoraAdapter {
                target: a.target.clone(),
                rank: a.rank,
                scale: a.scale,
                a: p(&a.a),
                b: p(&a.b),
            }),
        };
        Transformer {
            config: self.config.clone(),
            tok_emb: p(&self.tok_emb),
            pos_emb: p(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn: AttentionBlock {
                        norm: p(&l.attn.norm),
                        wq: lin(&l.attn.wq),
                        wk: lin(&l.attn.wk),
                        wv: lin(&l.attn.wv),
                        wo: lin(&l.attn.wo),
                    },
                    mlp: MlpBlock {
                        norm: p(&l.mlp.norm),
                        w_gate: lin(&l.mlp.w_gate),
                        w_up: lin(&l.mlp.w_up),
                        w_down: lin(&l.mlp.w_down),
                    },
                })
                .collect(),
            final_norm: p(&self.final_norm),
            lm_head: p(&self.lm_head),
        }
    }
}
