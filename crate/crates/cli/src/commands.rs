use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use neko_core::corpus::{build_mixture, MixtureDataset};
use neko_core::metrics::{evaluate, route_statistics, Corrector, ModelCorrector};
use neko_core::model::TransformerParams;
use neko_core::tensor::{DType, Scalar};
use neko_core::train::{checkpoint_dtype, metrics_csv_header, Checkpoint, StepMetrics, TrainState, Trainer};
use serde::Serialize;

use crate::config::{Precision, RunConfig, SeedUse};
use crate::CliError;

pub struct Context {
    pub config: RunConfig,
    /// Precision given on the command line, if any. Commands that read a
    /// checkpoint otherwise use the checkpoint's own precision.
    pub precision_flag: Option<Precision>,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

pub fn gen_data(ctx: &Context, out: &Path, split: Split) -> Result<(), CliError> {
    let c = &ctx.config;
    let (train_pool, eval_pool) = c.pools()?;
    let (pool, per_task, seed) = match split {
        Split::Train => (train_pool, c.corpus.samples_per_task, c.derived_seed(SeedUse::TrainData)),
        Split::Eval => (eval_pool, c.corpus.eval_samples_per_task, c.derived_seed(SeedUse::EvalData)),
    };
    if per_task == 0 {
        return Err(CliError::Usage("samples per task must be positive".into()));
    }
    let data = build_mixture(&c.sources()?, &pool, per_task, c.n_best, seed, ctx.threads)?;
    data.write(out)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    for t in &c.tasks {
        println!("  {:<12} {}", t.name, data.count_task(&t.name));
    }
    Ok(())
}

fn checkpoint_precision(ctx: &Context, path: &Path) -> Result<Precision, CliError> {
    if let Some(p) = ctx.precision_flag {
        return Ok(p);
    }
    Ok(match checkpoint_dtype(path)? {
        DType::F32 => Precision::F32,
        DType::F64 => Precision::F64,
    })
}

fn load_state<S: Scalar>(path: &Path) -> Result<TrainState<S>, CliError> {
    Ok(TrainState::from_checkpoint(Checkpoint::<S>::load(path)?))
}

pub fn train(
    ctx: &Context,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<usize>,
    time_limit_secs: Option<f64>,
) -> Result<(), CliError> {
    let dataset = MixtureDataset::read(data)?;
    fs::create_dir_all(out)?;
    let precision = match resume {
        Some(p) => checkpoint_precision(ctx, p)?,
        None => ctx.config.precision,
    };
    let limits = Limits {
        max_steps,
        time_limit_secs,
    };
    match precision {
        Precision::F32 => train_as::<f32>(ctx, dataset, out, resume, limits),
        Precision::F64 => train_as::<f64>(ctx, dataset, out, resume, limits),
    }
}

struct Limits {
    max_steps: Option<usize>,
    time_limit_secs: Option<f64>,
}

fn train_as<S: Scalar>(
    ctx: &Context,
    dataset: MixtureDataset,
    out: &Path,
    resume: Option<&Path>,
    limits: Limits,
) -> Result<(), CliError> {
    let c = &ctx.config;
    let state = match resume {
        Some(p) => load_state::<S>(p)?,
        None => {
            let params = TransformerParams::<S>::init(&c.model, c.derived_seed(SeedUse::Init))?;
            TrainState::fresh(
                params,
                c.registry()?,
                c.derived_seed(SeedUse::ExpertMap),
                c.train.clone(),
                &c.corpus.alphabet,
                c.n_best,
            )?
        }
    };
    let mut effective = c.clone();
    effective.model = state.params.config.clone();
    effective.train = state.train.clone();
    effective.n_best = state.n_best;
    effective.precision = match S::DTYPE {
        DType::F32 => Precision::F32,
        DType::F64 => Precision::F64,
    };
    fs::write(out.join("config.toml"), effective.to_toml())?;

    let mut trainer = Trainer::new(state, dataset, ctx.threads)?;
    trainer.set_dump_dir(out.to_path_buf());
    if trainer.skipped_samples() > 0 {
        eprintln!(
            "skipped {} samples longer than max_seq_len {}",
            trainer.skipped_samples(),
            trainer.state.params.config.max_seq_len
        );
    }
    let metrics_path = out.join("metrics.csv");
    let append = resume.is_some() && metrics_path.exists();
    let mut metrics = BufWriter::new(OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(&metrics_path)?);
    if !append {
        writeln!(metrics, "{}", metrics_csv_header(trainer.state.params.config.n_experts))?;
    }

    let total = trainer.state.total_steps;
    let started = Instant::now();
    let mut steps_run = 0usize;
    let mut last: Option<StepMetrics> = None;
    eprintln!(
        "training {} parameters for {} steps from step {}",
        trainer.state.params.n_params(),
        total,
        trainer.state.step
    );
    while trainer.state.step < total {
        if limits.max_steps.is_some_and(|m| steps_run >= m) {
            break;
        }
        if limits.time_limit_secs.is_some_and(|t| started.elapsed().as_secs_f64() >= t) {
            eprintln!("time limit reached");
            break;
        }
        let mut step = None;
        trainer.run(Some(1), |m| {
            step = Some(m.clone());
            true
        })?;
        let m = step.expect("one step ran");
        steps_run += 1;
        writeln!(metrics, "{}", m.csv_row())?;
        if m.step % 25 == 0 || m.step == total || steps_run == 1 {
            metrics.flush()?;
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  lr {:.2e}  grad_norm {:.3}  {:.0}s",
                m.step,
                m.loss,
                m.lr,
                m.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
        if c.checkpoint_every > 0 && m.step % c.checkpoint_every == 0 {
            trainer.state.to_checkpoint().save(&out.join(format!("step_{:06}.ckpt", m.step)))?;
        }
        last = Some(m);
    }
    metrics.flush()?;
    let ckpt = trainer.state.to_checkpoint();
    ckpt.save(&out.join("latest.ckpt"))?;
    if trainer.state.step == total {
        ckpt.save(&out.join("final.ckpt"))?;
    }
    println!(
        "ran {steps_run} steps (at step {} of {total}) in {:.1}s; last loss {}",
        trainer.state.step,
        started.elapsed().as_secs_f64(),
        last.map_or("n/a".to_string(), |m| format!("{:.4}", m.loss))
    );
    Ok(())
}

pub fn eval(ctx: &Context, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = MixtureDataset::read(data)?;
    match checkpoint_precision(ctx, checkpoint)? {
        Precision::F32 => eval_as::<f32>(ctx, checkpoint, &dataset, out),
        Precision::F64 => eval_as::<f64>(ctx, checkpoint, &dataset, out),
    }
}

fn eval_as<S: Scalar>(ctx: &Context, checkpoint: &Path, data: &MixtureDataset, out: Option<&Path>) -> Result<(), CliError> {
    let state = load_state::<S>(checkpoint)?;
    let tok = state.tokenizer()?;
    let corrector = ModelCorrector {
        params: &state.params,
        tokenizer: &tok,
        n_best: state.n_best,
        max_new_tokens: ctx.config.max_new_tokens,
    };
    let report = evaluate(&corrector, &state.tasks, data, ctx.threads)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

pub fn correct(ctx: &Context, checkpoint: &Path, task: &str) -> Result<(), CliError> {
    match checkpoint_precision(ctx, checkpoint)? {
        Precision::F32 => correct_as::<f32>(ctx, checkpoint, task),
        Precision::F64 => correct_as::<f64>(ctx, checkpoint, task),
    }
}

fn correct_as<S: Scalar>(ctx: &Context, checkpoint: &Path, task: &str) -> Result<(), CliError> {
    let state = load_state::<S>(checkpoint)?;
    let task = state.tasks.get(task).map_err(|e| CliError::Usage(e.to_string()))?.clone();
    let mut hypotheses = Vec::new();
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let line = line.trim();
        if !line.is_empty() {
            hypotheses.push(line.to_string());
        }
    }
    if hypotheses.is_empty() {
        return Err(CliError::Usage("no hypotheses on standard input".into()));
    }
    let tok = state.tokenizer()?;
    for h in &hypotheses {
        if let Some(ch) = h.chars().find(|&ch| !tok.contains(ch)) {
            return Err(CliError::Usage(format!("character {ch:?} is not in the model's alphabet")));
        }
    }
    let corrector = ModelCorrector {
        params: &state.params,
        tokenizer: &tok,
        n_best: state.n_best,
        max_new_tokens: ctx.config.max_new_tokens,
    };
    println!("{}", corrector.correct(&task, &hypotheses)?);
    Ok(())
}

#[derive(Serialize)]
struct RouteStatsOutput<'a> {
    expert_map: Vec<(&'a str, usize)>,
    report: &'a neko_core::moe::UtilizationReport,
}

pub fn route_stats(ctx: &Context, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = MixtureDataset::read(data)?;
    match checkpoint_precision(ctx, checkpoint)? {
        Precision::F32 => route_stats_as::<f32>(checkpoint, &dataset, out),
        Precision::F64 => route_stats_as::<f64>(checkpoint, &dataset, out),
    }
}

fn route_stats_as<S: Scalar>(checkpoint: &Path, data: &MixtureDataset, out: Option<&Path>) -> Result<(), CliError> {
    let state = load_state::<S>(checkpoint)?;
    let tok = state.tokenizer()?;
    let report = route_statistics(&state.params, &tok, &state.tasks, data, state.n_best)?;
    let n = report.n_experts;
    print!("{:<12} {:>6} {:>8}", "task", "f(T)", "hit");
    for e in 0..n {
        print!(" {:>7}", format!("e{e}"));
    }
    println!();
    let mut expert_map = Vec::new();
    for t in state.tasks.tasks() {
        let mapped = state.map.expert(t)?;
        expert_map.push((t.name.as_str(), mapped));
        let Some(u) = report.task(&t.name) else { continue };
        print!("{:<12} {:>6} {:>8.4}", t.name, mapped, u.fraction[mapped]);
        for f in &u.fraction {
            print!(" {f:>7.4}");
        }
        println!();
    }
    print!("{:<12} {:>6} {:>8}", "load", "", "");
    for l in &report.expert_load {
        print!(" {l:>7.4}");
    }
    println!();
    if let Some(p) = out {
        let w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(
            w,
            &RouteStatsOutput {
                expert_map,
                report: &report,
            },
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}
