use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use skiplab::analysis::{
    config_hash, cosine_trace, evaluate, export_trace, module_type_sparsity, redundancy_shift, sparsity_sweep,
    static_drop_baseline, DropBudget, EvalRouting,
};
use skiplab::checkpoint::{load_checkpoint_for, save_checkpoint, Checkpoint, VERSION};
use skiplab::config::{resolve_config, Settings};
use skiplab::data::{make_batches, validation_batches, Corpus};
use skiplab::model::{ModelConfig, Transformer};
use skiplab::objective::SparsityReport;
use skiplab::routing::RouterBank;
use skiplab::trace::TraceMatrix;
use skiplab::training::{joint_tune, lora_tune, pretrain_dense, router_tune, RunConfig, Stage, TrainLog};
use skiplab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "skiplab",
    version,
    about = "Train, route and analyse byte-level transformers with per-token module skipping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense base model.
    Pretrain(Common),
    /// Learn per-module routers on a frozen pretrained model.
    RouterTune(Common),
    /// Recover quality with low-rank adapters under frozen routing.
    LoraTune(Common),
    /// Train routers and adapters together.
    JointTune(Common),
    /// Report perplexity and sparsity of a checkpoint.
    Eval(Common),
    /// Export cosine-redundancy and routing-decision traces.
    Trace(Common),
    /// Router-tune from scratch for each target in `analysis.sweep`.
    Sweep(Common),
    /// Static module-dropping baseline.
    Baseline(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (flat dotted-key TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set target.T=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; each command writes into its own subdirectory.
    #[arg(long, env = "SKIPLAB_OUT", default_value = "runs")]
    out: PathBuf,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Input checkpoint; defaults to the previous stage's output in `--out`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Pretrain(c) => ("pretrain", c),
            Command::RouterTune(c) => ("router-tune", c),
            Command::LoraTune(c) => ("lora-tune", c),
            Command::JointTune(c) => ("joint-tune", c),
            Command::Eval(c) => ("eval", c),
            Command::Trace(c) => ("trace", c),
            Command::Sweep(c) => ("sweep", c),
            Command::Baseline(c) => ("baseline", c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingCheckpoint(_) => 3,
        Error::Divergence { .. } | Error::NumericDomain { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::new(
                e.kind(),
                format!("{} is held by another run; remove it if stale", path.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Ctx {
    settings: Settings,
    model_config: ModelConfig,
    out: PathBuf,
    stage_dir: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn run_config(&self, stage: Stage) -> Result<RunConfig> {
        let mut cfg = self.settings.run_config(stage)?;
        cfg.verify_freeze = stage != Stage::Pretrain;
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.settings.int("train.seed") as u64
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.stage_dir.join(name), contents)?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// `--checkpoint`, else the first existing default, else a missing-checkpoint error.
    fn input(&self, defaults: &[&str]) -> Result<Checkpoint<f32>> {
        let path = match &self.checkpoint {
            Some(p) => p.clone(),
            None => {
                let candidates: Vec<PathBuf> = defaults
                    .iter()
                    .map(|s| self.out.join(s).join("checkpoint.skpt"))
                    .collect();
                candidates
                    .iter()
                    .find(|p| p.exists())
                    .unwrap_or(candidates.last().expect("at least one default"))
                    .clone()
            }
        };
        load_checkpoint_for(&path, &self.model_config)
    }

    fn save_log(&self, log: &TrainLog) -> Result<()> {
        self.write("train_log.ndjson", log.to_ndjson()?)?;
        self.write("train_log.csv", log.to_csv())
    }
}

fn run(command: &Command) -> Result<()> {
    let (name, common) = command.parts();
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let settings = resolve_config(common.config.as_deref(), &overrides)?;
    let model_config = settings.model_config()?;
    let _lock = Lock::acquire(&common.out)?;
    let stage_dir = common.out.join(name);
    fs::create_dir_all(&stage_dir)?;
    let ctx = Ctx {
        settings,
        model_config,
        out: common.out.clone(),
        stage_dir,
        checkpoint: common.checkpoint.clone(),
    };
    ctx.write("config.toml", ctx.settings.snapshot())?;
    ctx.write_json(
        "version.json",
        &json!({
            "tool": "skiplab",
            "version": env!("CARGO_PKG_VERSION"),
            "command": name,
            "checkpoint_format": VERSION,
            "config_hash": config_hash(&ctx.model_config),
        }),
    )?;
    let corpus = ctx.settings.corpus()?;
    match command {
        Command::Pretrain(_) => pretrain(&ctx, &corpus),
        Command::RouterTune(_) => tune_routers(&ctx, &corpus),
        Command::LoraTune(_) => tune_adapters(&ctx, &corpus),
        Command::JointTune(_) => tune_joint(&ctx, &corpus),
        Command::Eval(_) => eval(&ctx, &corpus),
        Command::Trace(_) => trace(&ctx, &corpus),
        Command::Sweep(_) => sweep(&ctx, &corpus),
        Command::Baseline(_) => baseline(&ctx, &corpus),
    }
}

const ANY_STAGE: [&str; 4] = ["lora-tune", "joint-tune", "router-tune", "pretrain"];

fn eval_json(log: &TrainLog) -> Value {
    json!({ "final": log.final_eval(), "evals": log.evals })
}

fn sparsity_json(ctx: &Ctx, decisions: Option<&TraceMatrix>, run: &RunConfig) -> Result<Value> {
    Ok(match decisions {
        Some(d) => serde_json::to_value(SparsityReport::from_decisions(d, &ctx.model_config, &run.target)?)?,
        None => Value::Null,
    })
}

fn pretrain(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::Pretrain)?;
    let mut model = Transformer::<f32>::new(ctx.model_config.clone(), &mut ChaCha8Rng::seed_from_u64(ctx.seed()))?;
    let log = pretrain_dense(&mut model, corpus, &cfg)?;
    save_checkpoint(&ctx.stage_dir.join("checkpoint.skpt"), &model, None)?;
    ctx.save_log(&log)?;
    ctx.write_json("eval.json", &eval_json(&log))?;
    report_final(&log);
    Ok(())
}

fn tune_routers(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::RouterTune)?;
    let ck = ctx.input(&["pretrain"])?;
    let mut routers = RouterBank::new(
        &ck.model.config,
        &mut ChaCha8Rng::seed_from_u64(ctx.seed().wrapping_add(1)),
    );
    let log = router_tune(&ck.model, &mut routers, corpus, &cfg)?;
    save_checkpoint(&ctx.stage_dir.join("checkpoint.skpt"), &ck.model, Some(&routers))?;
    ctx.save_log(&log)?;
    routed_report(ctx, corpus, &ck.model, &routers, &cfg, &log)
}

fn tune_adapters(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::LoraTune)?;
    let mut ck = ctx.input(&["router-tune"])?;
    let routers = ck
        .routers
        .take()
        .ok_or_else(|| Error::Contract("adapter tuning needs a checkpoint with tuned routers".into()))?;
    if !ck.model.has_adapters() {
        let ads = ck
            .model
            .init_lora(&cfg.lora, &mut ChaCha8Rng::seed_from_u64(ctx.seed().wrapping_add(2)))?;
        ck.model.apply_lora(ads)?;
    }
    let log = lora_tune(&mut ck.model, &routers, corpus, &cfg)?;
    save_checkpoint(&ctx.stage_dir.join("checkpoint.skpt"), &ck.model, Some(&routers))?;
    ctx.save_log(&log)?;
    routed_report(ctx, corpus, &ck.model, &routers, &cfg, &log)
}

fn tune_joint(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::Joint)?;
    let mut ck = ctx.input(&["pretrain"])?;
    if !ck.model.has_adapters() {
        let ads = ck
            .model
            .init_lora(&cfg.lora, &mut ChaCha8Rng::seed_from_u64(ctx.seed().wrapping_add(2)))?;
        ck.model.apply_lora(ads)?;
    }
    let mut routers = match ck.routers.take() {
        Some(r) => r,
        None => RouterBank::new(
            &ck.model.config,
            &mut ChaCha8Rng::seed_from_u64(ctx.seed().wrapping_add(1)),
        ),
    };
    let log = joint_tune(&mut ck.model, &mut routers, corpus, &cfg)?;
    save_checkpoint(&ctx.stage_dir.join("checkpoint.skpt"), &ck.model, Some(&routers))?;
    ctx.save_log(&log)?;
    routed_report(ctx, corpus, &ck.model, &routers, &cfg, &log)
}

fn routed_report(
    ctx: &Ctx,
    corpus: &Corpus,
    model: &Transformer<f32>,
    routers: &RouterBank<f32>,
    cfg: &RunConfig,
    log: &TrainLog,
) -> Result<()> {
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let res = evaluate(model, EvalRouting::Argmax(routers), &eval)?;
    let mut report = eval_json(log);
    report["sparsity"] = sparsity_json(ctx, res.decisions.as_ref(), cfg)?;
    ctx.write_json("eval.json", &report)?;
    report_final(log);
    Ok(())
}

fn report_final(log: &TrainLog) {
    if let Some(e) = log.final_eval() {
        match e.r {
            Some(r) => println!(
                "{}: ppl {:.4} loss {:.4} r {:.4}",
                log.stage.name(),
                e.ppl,
                e.lm_loss,
                r
            ),
            None => println!("{}: ppl {:.4} loss {:.4}", log.stage.name(), e.ppl, e.lm_loss),
        }
    }
}

fn eval(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::RouterTune)?;
    let ck = ctx.input(&ANY_STAGE)?;
    let batches = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let dense = evaluate(&ck.model, EvalRouting::Dense, &batches)?;
    let mut report = json!({
        "tokens": dense.tokens,
        "dense": { "lm_loss": dense.lm_loss, "ppl": dense.ppl },
        "routed": Value::Null,
    });
    println!("dense: ppl {:.4} loss {:.4}", dense.ppl, dense.lm_loss);
    if let Some(routers) = &ck.routers {
        let res = evaluate(&ck.model, EvalRouting::Argmax(routers), &batches)?;
        report["routed"] = json!({
            "lm_loss": res.lm_loss,
            "ppl": res.ppl,
            "sparsity": sparsity_json(ctx, res.decisions.as_ref(), &cfg)?,
        });
        println!("routed: ppl {:.4} loss {:.4} r {:.4}", res.ppl, res.lm_loss, res.r);
    }
    ctx.write_json("eval.json", &report)
}

fn trace(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::RouterTune)?;
    let ck = ctx.input(&ANY_STAGE)?;
    let n = ctx.settings.usize("analysis.sequences")?;
    let seqs = validation_batches(corpus, 1, cfg.seq_len, n)?;
    let cosines = seqs
        .iter()
        .map(|b| cosine_trace(&ck.model, &b.inputs).map(|c| c.matrix))
        .collect::<Result<Vec<_>>>()?;
    export_trace(&ctx.stage_dir, "cosine", &cosines[0], "cosine", &ck.model.config)?;
    export_trace(
        &ctx.stage_dir,
        "cosine_mean",
        &mean_matrix(&cosines),
        "cosine_mean",
        &ck.model.config,
    )?;
    let mut summary = json!({ "sequences": seqs.len(), "seq_len": cfg.seq_len, "routed": Value::Null });
    if let Some(routers) = &ck.routers {
        let res = evaluate(&ck.model, EvalRouting::Argmax(routers), &seqs)?;
        let decisions = res.decisions.expect("routed evaluation records decisions");
        let per_seq = decisions.split_sequences(cfg.seq_len);
        export_trace(&ctx.stage_dir, "decisions", &per_seq[0], "decision", &ck.model.config)?;
        export_trace(
            &ctx.stage_dir,
            "decisions_mean",
            &mean_matrix(&per_seq),
            "execute_rate",
            &ck.model.config,
        )?;
        let window = ctx.settings.usize("analysis.window")?;
        let stride = ctx.settings.usize("analysis.stride")?;
        summary["routed"] = json!({
            "r": res.r,
            "ppl": res.ppl,
            "module_type": module_type_sparsity(&decisions)?,
            "redundancy_shift": redundancy_shift(&per_seq, window, stride)?,
        });
    }
    ctx.write_json("trace.json", &summary)
}

fn mean_matrix(parts: &[TraceMatrix]) -> TraceMatrix {
    let mut acc = TraceMatrix::filled(parts[0].rows, parts[0].cols, 0.0);
    for p in parts {
        for (a, v) in acc.data.iter_mut().zip(&p.data) {
            *a += v;
        }
    }
    let k = parts.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= k);
    acc
}

fn sweep(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::RouterTune)?;
    let ck = ctx.input(&["pretrain"])?;
    let targets = ctx.settings.floats("analysis.sweep");
    let result = sparsity_sweep(&ck.model, corpus, &targets, &cfg)?;
    ctx.write("sweep.csv", result.to_csv())?;
    ctx.write_json("sweep.json", &serde_json::to_value(&result)?)?;
    println!("dense ppl {:.4}", result.dense_ppl);
    for p in &result.points {
        println!("T {:.3}: r {:.4} ppl {:.4}", p.target, p.r, p.ppl);
    }
    Ok(())
}

fn baseline(ctx: &Ctx, corpus: &Corpus) -> Result<()> {
    let cfg = ctx.run_config(Stage::RouterTune)?;
    let ck = ctx.input(&ANY_STAGE)?;
    let budget = match ctx.settings.string("baseline.mode") {
        "params" => DropBudget::ParamRatio(ctx.settings.float("baseline.budget")),
        _ => {
            let k = ctx.settings.float("baseline.budget");
            if k < 0.0 || k.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "baseline.budget must be a whole module count, got {k}"
                )));
            }
            DropBudget::Modules(k as usize)
        }
    };
    let calib: Vec<_> = make_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)?
        .take(cfg.eval_batches)
        .collect();
    let eval = validation_batches(corpus, cfg.batch_size, cfg.seq_len, cfg.eval_batches)?;
    let res = static_drop_baseline(&ck.model, &calib, budget, &eval)?;
    println!("static drop {:?}: r {:.4} ppl {:.4}", res.dropped, res.r, res.ppl);
    let mut report = json!({ "budget": budget, "static": res, "routed": Value::Null });
    if let Some(routers) = &ck.routers {
        let routed = evaluate(&ck.model, EvalRouting::Argmax(routers), &eval)?;
        println!("router-tuned: r {:.4} ppl {:.4}", routed.r, routed.ppl);
        report["routed"] = json!({ "r": routed.r, "ppl": routed.ppl });
    }
    ctx.write_json("baseline.json", &report)
}
