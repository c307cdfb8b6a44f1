//! Command-line entry point: dataset generation, teacher training,
//! joint/two-step distillation, budget-sweep evaluation, and report export,
//! all driven by one TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/flag errors.

use anyhow::{bail, Context};
use breadcrumbs::checkpoint::{load_checkpoint, save_checkpoint};
use breadcrumbs::compression::{self, CompressionRule, ConstantPolicy, EventKind, Limits, Mode};
use breadcrumbs::config::{load_run_config, write_manifest, RunConfig};
use breadcrumbs::eval::{
    self, curve_rows, evaluate, mode_label, CurveRow, EvalCurve, SummaryRow,
};
use breadcrumbs::model::{PolicyModel, Role};
use breadcrumbs::tasks::{self, TaskInstance};
use breadcrumbs::training::{
    append_jsonl, format_warmup, mix_seed, JointTrainer, PpoTrainer, TaskEnv, TrajectoryStore,
    TwoStepTrainer,
};
use breadcrumbs::vocab::Vocabulary;
use breadcrumbs::{AdamW, AdamWConfig};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "breadcrumbs", version, about = "KV-cache beacon compression testbed")]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Worker threads for rollouts and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dataset utilities.
    Tasks {
        #[command(subcommand)]
        cmd: TasksCmd,
    },
    /// Train the teacher (PPO) and optionally distill students.
    Train {
        #[arg(long, value_enum, default_value_t = TrainMode::Teacher)]
        mode: TrainMode,
        /// Override run.train_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a trained model under a cache or length budget.
    Eval {
        /// Which method to evaluate; omit to sweep all modes over the
        /// configured ratio grid.
        #[arg(long, value_enum)]
        mode: Option<EvalCliMode>,
        /// Compression ratio c (ignored by mode `none`).
        #[arg(long)]
        ratio: Option<usize>,
        /// Checkpoint directory override.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge eval outputs into summary CSVs and an accuracy plot.
    Report,
    /// Roll a few episodes from a checkpoint and print the completions.
    Sample {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        /// Checkpoint directory (default: <out_dir>/teacher).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed_start: u64,
    },
    /// Dump the cache occupancy trace of one episode.
    Trace {
        #[arg(long, default_value_t = 2)]
        ratio: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Question length for the synthetic dump.
        #[arg(long, default_value_t = 3)]
        question: usize,
        /// Trace a real checkpoint on a test instance instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        instance_seed: u64,
    },
}

#[derive(Subcommand)]
enum TasksCmd {
    /// Write task instances as JSONL.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Teacher,
    Joint,
    TwoStep,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalCliMode {
    Br,
    Tova,
    Streaming,
    None,
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            std::process::exit(1);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_run_config(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    match cli.cmd {
        Cmd::Tasks { cmd: TasksCmd::Gen { out, count, split } } => cmd_tasks_gen(&cfg, out, count, split),
        Cmd::Train { mode, steps } => cmd_train(&cfg, mode, steps),
        Cmd::Eval { mode, ratio, checkpoint } => cmd_eval(&cfg, mode, ratio, checkpoint),
        Cmd::Report => cmd_report(&cfg),
        Cmd::Sample { count, temperature, checkpoint, seed_start } => {
            cmd_sample(&cfg, count, temperature, checkpoint, seed_start)
        }
        Cmd::Trace { ratio, steps, question, checkpoint, instance_seed } => {
            cmd_trace(&cfg, ratio, steps, question, checkpoint, instance_seed)
        }
    }
}

fn cmd_tasks_gen(
    cfg: &RunConfig,
    out: Option<PathBuf>,
    count: usize,
    split: Split,
) -> anyhow::Result<()> {
    let env = TaskEnv::new(cfg.task.clone());
    let (label, instances): (&str, Vec<TaskInstance>) = match split {
        Split::Test => ("test", env.test_set(count)?),
        Split::Train => (
            "train",
            (0..count as u64).map(|i| env.train_instance(i)).collect::<breadcrumbs::Result<_>>()?,
        ),
    };
    let path = out.unwrap_or_else(|| cfg.out_dir.join(format!("instances_{label}.jsonl")));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    tasks::write_instances_jsonl(&path, &instances)?;
    println!("wrote {count} {label} instances to {}", path.display());
    Ok(())
}

fn teacher_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("teacher")
}

fn student_dir(cfg: &RunConfig, two_step: bool, c: usize) -> PathBuf {
    if two_step {
        cfg.out_dir.join(format!("two_step_student_c{c}"))
    } else {
        cfg.out_dir.join(format!("student_c{c}"))
    }
}

fn fresh_log(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(())
}

fn warmed_up_teacher(cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<PolicyModel> {
    let mcfg = cfg.model.to_model_config(vocab.len());
    let mut actor = PolicyModel::new(mcfg, Role::Teacher, cfg.seed)?;
    let env = TaskEnv::new(cfg.task.clone());
    if cfg.run.warmup_steps > 0 {
        let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.run.warmup_lr), &actor.param_sizes());
        let losses = format_warmup(
            &mut actor,
            &mut opt,
            &env,
            vocab,
            cfg.run.warmup_steps,
            cfg.run.warmup_batch,
            mix_seed(cfg.seed, 0x77AB, 0),
        )?;
        let waypoints: Vec<String> = losses
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 200 == 0 || *i == losses.len() - 1)
            .map(|(i, l)| format!("{i}:{l:.3}"))
            .collect();
        eprintln!("warmup: {} steps, loss {}", losses.len(), waypoints.join(" "));
    }
    Ok(actor)
}

fn cmd_train(cfg: &RunConfig, mode: TrainMode, steps: Option<usize>) -> anyhow::Result<()> {
    write_manifest(&cfg.out_dir, cfg, "train")?;
    let vocab = Vocabulary::core();
    let steps = steps.unwrap_or(cfg.run.train_steps);
    let log_path = cfg.out_dir.join("train_log.jsonl");
    fresh_log(&log_path)?;
    let store = if cfg.run.save_trajectories {
        Some(TrajectoryStore::create(&cfg.out_dir.join("trajectories.bin"))?)
    } else {
        None
    };

    match mode {
        TrainMode::Teacher | TrainMode::Joint => {
            let actor = warmed_up_teacher(cfg, &vocab)?;
            let env = TaskEnv::new(cfg.task.clone());
            let ppo = PpoTrainer::new(actor, env, vocab.clone(), cfg.ppo.clone(), cfg.seed)?;
            let students = if mode == TrainMode::Joint {
                cfg.distill.to_configs(cfg.ppo.batch)
            } else {
                Vec::new()
            };
            let mut joint = JointTrainer::new(ppo, students, store)?;
            let mut window = VecDeque::with_capacity(cfg.run.accuracy_window);
            for _ in 0..steps {
                let stats = joint.step()?;
                if window.len() == cfg.run.accuracy_window {
                    window.pop_front();
                }
                window.push_back(stats.ppo.accuracy);
                let rolling = window.iter().sum::<f32>() / window.len() as f32;
                if stats.ppo.step % cfg.run.log_every == 0 {
                    eprintln!(
                        "step {:4}  reward {:.3}  acc {:.3} (rolling {rolling:.3})  fmt {:.2}  len {:.1}  ent {:.3}",
                        stats.ppo.step,
                        stats.ppo.mean_reward,
                        stats.ppo.accuracy,
                        stats.ppo.format_rate,
                        stats.ppo.mean_len,
                        stats.ppo.update.entropy,
                    );
                }
                append_jsonl(&log_path, &stats)?;
                if let Some(target) = cfg.run.early_stop_accuracy {
                    if window.len() == cfg.run.accuracy_window && rolling >= target {
                        eprintln!("early stop: rolling accuracy {rolling:.3} >= {target:.3}");
                        break;
                    }
                }
            }
            save_checkpoint(&teacher_dir(cfg), &joint.ppo.actor, &joint.ppo.vocab)?;
            eprintln!("saved teacher to {}", teacher_dir(cfg).display());
            for slot in &joint.students {
                let dir = student_dir(cfg, false, slot.cfg.ratio_c);
                save_checkpoint(&dir, &slot.model, &joint.ppo.vocab)?;
                eprintln!("saved student c={} to {}", slot.cfg.ratio_c, dir.display());
            }
            if let Some(store) = joint.store.take() {
                store.finalize()?;
            }
        }
        TrainMode::TwoStep => {
            let tdir = teacher_dir(cfg);
            let (teacher, ck_vocab) = load_checkpoint(&tdir).with_context(|| {
                format!(
                    "no teacher checkpoint in {}; run `train --mode teacher` first",
                    tdir.display()
                )
            })?;
            let env = TaskEnv::new(cfg.task.clone());
            let mut trainer = TwoStepTrainer::new(
                teacher,
                cfg.distill.to_configs(cfg.ppo.batch),
                env,
                ck_vocab.clone(),
                cfg.ppo.batch,
                cfg.ppo.max_new_tokens,
                cfg.ppo.top_k,
                cfg.seed,
                store,
            )?;
            for _ in 0..steps {
                let stats = trainer.step()?;
                if stats.step % cfg.run.log_every == 0 {
                    let losses: Vec<String> =
                        stats.distill.iter().map(|d| format!("{:.4}", d.loss)).collect();
                    eprintln!(
                        "step {:4}  teacher reward {:.3}  distill [{}]",
                        stats.step,
                        stats.mean_reward,
                        losses.join(", ")
                    );
                }
                append_jsonl(&log_path, &stats)?;
            }
            for slot in &trainer.students {
                let dir = student_dir(cfg, true, slot.cfg.ratio_c);
                save_checkpoint(&dir, &slot.model, &ck_vocab)?;
                eprintln!("saved two-step student c={} to {}", slot.cfg.ratio_c, dir.display());
            }
            if let Some(store) = trainer.store.take() {
                store.finalize()?;
            }
        }
    }
    Ok(())
}

/// One method evaluation: resolve the checkpoint, run the sweep, write
/// curve/summary/outcome files.
fn eval_once(
    cfg: &RunConfig,
    mode: Mode,
    c: usize,
    checkpoint: Option<&Path>,
) -> anyhow::Result<SummaryRow> {
    let default_dir = match mode {
        Mode::Breadcrumbs => student_dir(cfg, false, c),
        _ => teacher_dir(cfg),
    };
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or(default_dir);
    let (model, vocab) = load_checkpoint(&dir).with_context(|| {
        format!("no checkpoint in {}; train the required model first", dir.display())
    })?;
    let env = TaskEnv::new(cfg.task.clone());
    let instances = env.test_set(cfg.eval.test_instances)?;
    let protocol = cfg.eval.to_protocol();
    let rule = CompressionRule::new(mode, c.max(1))?;
    let report = evaluate(&model, &rule, &instances, &vocab, &protocol)?;

    let label = if mode == Mode::None {
        "none".to_string()
    } else {
        format!("{}_c{c}", mode_label(mode))
    };
    let eval_dir = cfg.out_dir.join("eval");
    let model_tag = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = curve_rows(&report, cfg.task.task_kind().as_str(), &model_tag, mode, c);
    eval::write_csv(&eval_dir.join(format!("curve_{label}.csv")), &rows)?;
    eval::write_outcomes_jsonl(
        &eval_dir.join(format!("outcomes_{label}.jsonl")),
        &report.outcomes,
    )?;
    let summary = SummaryRow {
        method: mode_label(mode).to_string(),
        c,
        acc_c: report.acc_c,
        auac: report.auac,
    };
    eval::write_csv(&eval_dir.join(format!("summary_{label}.csv")), &[&summary])?;
    println!(
        "{label}: Acc_c {:.4}  AUAC {:.4}  ({} instances)",
        report.acc_c,
        report.auac,
        report.curve.n
    );
    Ok(summary)
}

fn cmd_eval(
    cfg: &RunConfig,
    mode: Option<EvalCliMode>,
    ratio: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    write_manifest(&cfg.out_dir, cfg, "eval")?;
    match mode {
        Some(m) => {
            let mode = match m {
                EvalCliMode::Br => Mode::Breadcrumbs,
                EvalCliMode::Tova => Mode::Tova,
                EvalCliMode::Streaming => Mode::Streaming,
                EvalCliMode::None => Mode::None,
            };
            let c = match mode {
                Mode::None => 1,
                _ => ratio.or_else(|| cfg.eval.ratios.first().copied()).unwrap_or(2),
            };
            eval_once(cfg, mode, c, checkpoint.as_deref())?;
        }
        None => {
            // full grid: every compressed method at every ratio, plus the
            // uncompressed teacher once
            if checkpoint.is_some() {
                bail!("--checkpoint needs an explicit --mode");
            }
            eval_once(cfg, Mode::None, 1, None)?;
            for &c in &cfg.eval.ratios {
                for mode in [Mode::Breadcrumbs, Mode::Tova, Mode::Streaming] {
                    eval_once(cfg, mode, c, None)?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> anyhow::Result<()> {
    let eval_dir = cfg.out_dir.join("eval");
    let entries = std::fs::read_dir(&eval_dir)
        .with_context(|| format!("no eval outputs in {}; run `eval` first", eval_dir.display()))?;
    let mut summaries: Vec<SummaryRow> = Vec::new();
    let mut curves: BTreeMap<String, Vec<CurveRow>> = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("summary_") && name.ends_with(".csv") {
            let mut rdr = csv::Reader::from_path(&path)?;
            for row in rdr.deserialize::<SummaryRow>() {
                summaries.push(row?);
            }
        } else if name.starts_with("curve_") && name.ends_with(".csv") {
            let label = name.trim_start_matches("curve_").trim_end_matches(".csv").to_string();
            let mut rdr = csv::Reader::from_path(&path)?;
            for row in rdr.deserialize::<CurveRow>() {
                curves.entry(label.clone()).or_default().push(row?);
            }
        }
    }
    if summaries.is_empty() {
        bail!("no summary_*.csv files under {}; run `eval` first", eval_dir.display());
    }
    summaries.sort_by(|a, b| (&a.method, a.c).cmp(&(&b.method, b.c)));
    eval::write_csv(&eval_dir.join("summary.csv"), &summaries)?;
    let mut all_rows: Vec<&CurveRow> = curves.values().flatten().collect();
    all_rows.sort_by(|a, b| {
        (&a.mode, a.c, a.budget).partial_cmp(&(&b.mode, b.c, b.budget)).expect("finite budgets")
    });
    let merged: Vec<CurveRow> = all_rows
        .into_iter()
        .map(|r| CurveRow {
            task: r.task.clone(),
            model_tag: r.model_tag.clone(),
            mode: r.mode.clone(),
            c: r.c,
            budget: r.budget,
            accuracy: r.accuracy,
            n: r.n,
        })
        .collect();
    eval::write_csv(&eval_dir.join("curves.csv"), &merged)?;

    let mut plot_curves: Vec<(String, EvalCurve)> = Vec::new();
    for (label, rows) in &curves {
        let mut rows: Vec<&CurveRow> = rows.iter().collect();
        rows.sort_by(|a, b| a.budget.partial_cmp(&b.budget).expect("finite budgets"));
        let budgets: Vec<f64> = rows.iter().map(|r| r.budget).collect();
        let accuracy: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let n = rows.first().map(|r| r.n).unwrap_or(0);
        plot_curves.push((label.clone(), EvalCurve::new(budgets, accuracy, n)?));
    }
    let refs: Vec<(String, &EvalCurve)> =
        plot_curves.iter().map(|(l, c)| (l.clone(), c)).collect();
    let x_label = match cfg.eval.mode {
        eval::EvalMode::FixedCache => "cache budget (entries)",
        eval::EvalMode::FixedLength => "generated tokens",
    };
    let svg = eval::render_svg(&refs, cfg.eval.limit as f64, x_label);
    std::fs::write(eval_dir.join("plot.svg"), svg)?;
    println!(
        "report: {} methods -> {}/summary.csv, curves.csv, plot.svg",
        summaries.len(),
        eval_dir.display()
    );
    Ok(())
}

fn cmd_sample(
    cfg: &RunConfig,
    count: usize,
    temperature: f32,
    checkpoint: Option<PathBuf>,
    seed_start: u64,
) -> anyhow::Result<()> {
    let dir = checkpoint.unwrap_or_else(|| cfg.out_dir.join("teacher"));
    let (model, vocab) = load_checkpoint(&dir)?;
    let rule = CompressionRule::new(Mode::None, 2)?;
    let limits = Limits {
        max_cache_entries: usize::MAX,
        max_new_tokens: cfg.ppo.max_new_tokens,
    };
    for i in 0..count {
        let inst = tasks::generate(&cfg.task, seed_start + i as u64)?;
        let prompt = vocab.tokenize(&inst.prompt_text)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5A3F, seed_start + i as u64));
        let result =
            compression::generate(&model, &prompt, &rule, &limits, temperature, &mut rng, None)?;
        let text = vocab.detokenize(&result.tokens)?;
        let level = tasks::score(&inst, &text);
        println!("--- instance {} ({:?}, {:?})", seed_start + i as u64, level, result.stopped_by);
        println!("prompt: {}", inst.prompt_text.escape_debug());
        println!("completion: {}", text.escape_debug());
    }
    Ok(())
}

fn cmd_trace(
    cfg: &RunConfig,
    ratio: usize,
    steps: usize,
    question: usize,
    checkpoint: Option<PathBuf>,
    instance_seed: u64,
) -> anyhow::Result<()> {
    let rule = CompressionRule::new(Mode::Breadcrumbs, ratio)?;
    let limits = Limits { max_cache_entries: 1000, max_new_tokens: steps };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (result, q_len) = match checkpoint {
        Some(dir) => {
            let (model, vocab) = load_checkpoint(&dir)?;
            let inst = tasks::generate(&cfg.task, instance_seed)?;
            let prompt = vocab.tokenize(&inst.prompt_text)?;
            let q = prompt.len();
            (compression::generate(&model, &prompt, &rule, &limits, 0.0, &mut rng, None)?, q)
        }
        None => {
            let policy = ConstantPolicy { vocab_size: 16, favored: 7 };
            let prompt: Vec<u32> = (0..question as u32).map(|i| 8 + (i % 4)).collect();
            (compression::generate(&policy, &prompt, &rule, &limits, 0.0, &mut rng, None)?, question)
        }
    };
    println!("question entries: {q_len}");
    for ev in &result.events {
        let what = match ev.event {
            EventKind::Sample => format!("sample token {:?}", ev.token),
            EventKind::Beacon => "feed beacon".to_string(),
            EventKind::Evict => "evict window".to_string(),
            EventKind::Stop => "stop".to_string(),
        };
        println!("step {:3}  {:20}  entries {}", ev.step, what, ev.entries_now);
    }
    println!("occupancy trace: {:?}", result.occupancy_trace());
    println!("stopped by: {:?}; peak entries {}", result.stopped_by, result.final_stats.peak_entries);
    Ok(())
}
