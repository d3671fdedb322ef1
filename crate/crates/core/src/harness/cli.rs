use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::config::ExperimentConfig;
use super::experiment::{records_to_csv, run_baseline, run_experiment, MetricsRecord};
use super::oracle::{brute_force_oracle, DEFAULT_BUDGET};
use super::report::{read_results, summarize, summary_csv, summary_table};
use crate::baselines::{sanity_ablate, Ablated, BaselineMethod, SanityKind};
use crate::controllers::ControllerMode;
use crate::data::{load_dataset, BlobSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::mask::{MaskDistribution, Ticket};
use crate::nn::{train, Arch, Checkpoint, Precision, Trainer};
use crate::objectives::ObjectiveKind;
use crate::search::{draw_objective, evaluate_ticket, evaluation_batch, run_cts, pretrain, RunMetrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CELL_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "cts", version, about = "Concrete ticket search and pruning baselines")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// f64 or f32 training arithmetic.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct TaskArgs {
    #[arg(long)]
    arch: Option<Arch>,
    /// Target density κ.
    #[arg(long)]
    kappa: Option<f64>,
    /// Total training steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Rewind step k.
    #[arg(long)]
    rewind_step: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One CTS run: search, clamp, retrain.
    Search {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        #[arg(long)]
        controller: Option<ControllerMode>,
        #[arg(long)]
        search_steps: Option<usize>,
        #[arg(long)]
        quick_factor: Option<f64>,
    },
    /// One baseline run.
    Baseline {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        method: BaselineMethod,
    },
    /// The method × sparsity × seed grid.
    Sweep {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        sparsities: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Add ablation rows next to every CTS row.
        #[arg(long)]
        sanity: bool,
    },
    /// Ablations of an existing ticket against its rewind checkpoint.
    Sanity {
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Needed for `invert`.
        #[arg(long)]
        distribution: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "shuffle,reinit,invert")]
        kinds: Vec<SanityKind>,
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        /// Total training steps T.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Exhaustive search over every mask of the requested size.
    Oracle {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        /// Evaluation batch size.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u128,
    },
    /// Mean ± std per (method, sparsity) over one or more results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

impl clap::ValueEnum for SanityKind {
    fn value_variants<'a>() -> &'a [Self] {
        &SanityKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.tag()))
    }
}

/// Parses `argv` and runs the subcommand. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownArch(_) | Error::InvalidDensity(_) => EXIT_USAGE,
                _ => EXIT_CELL_FAILURES,
            }
        }
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.train.precision = p;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn apply_task(cfg: &mut ExperimentConfig, task: &TaskArgs) {
    if let Some(a) = task.arch {
        cfg.task.arch = a;
    }
    if let Some(k) = task.kappa {
        cfg.search.kappa = k;
    }
    if let Some(s) = task.steps {
        cfg.train.steps = s;
    }
    if let Some(k) = task.rewind_step {
        cfg.train.rewind_step = k;
    }
    if let Some(b) = task.batch_size {
        cfg.train.batch_size = b;
    }
}

fn out_dir(cfg: &ExperimentConfig, fallback: &str) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Search {
            ref task,
            objective,
            controller,
            search_steps,
            quick_factor,
        } => {
            apply_task(&mut cfg, task);
            if let Some(o) = objective {
                cfg.search.objective = o;
            }
            if let Some(c) = controller {
                cfg.search.controller = c;
            }
            if let Some(s) = search_steps {
                cfg.search.search_steps = s;
            }
            if let Some(q) = quick_factor {
                cfg.search.quick_factor = q;
            }
            cfg.validate()?;
            let data = load_dataset(&cfg.task.dataset)?;
            let kappa = cfg.search.kappa;
            let search = cfg.search_for(kappa, cfg.seed);
            let start = Instant::now();
            let out = run_cts(&search, cfg.task.arch, &data)?;
            let wall = start.elapsed().as_secs_f64();
            let dir = out_dir(&cfg, "cts-search")?;
            out.ticket.save(&dir.join("ticket.json"))?;
            out.distribution.save(&dir.join("distribution.json"))?;
            Checkpoint::from_model(&out.pre.model, out.pre.step as u64, Some(&out.pre.momentum))
                .save(&dir.join("rewind.ckpt"))?;
            write(&dir.join("trace.csv"), out.trace.to_csv())?;
            let row = MetricsRecord::from_run("cts", 1.0 - kappa, cfg.seed, &out.ticket, &out.metrics, wall);
            write(&dir.join("metrics.csv"), records_to_csv(std::slice::from_ref(&row))?)?;
            print_run(&row, &out.ticket);
            println!(
                "search: {} steps, {} overshoot violations, {} degenerate steps",
                out.trace.records.last().map_or(0, |r| r.step + 1),
                out.trace.overshoot_violations,
                out.trace.degenerate_steps
            );
            Ok(EXIT_OK)
        }
        Command::Baseline { ref task, method } => {
            apply_task(&mut cfg, task);
            cfg.validate()?;
            let data = load_dataset(&cfg.task.dataset)?;
            let kappa = cfg.search.kappa;
            let start = Instant::now();
            let out = run_baseline(&cfg, method, kappa, cfg.seed, &data)?;
            let wall = start.elapsed().as_secs_f64();
            let dir = out_dir(&cfg, "cts-baseline")?;
            out.ticket.save(&dir.join("ticket.json"))?;
            Checkpoint::from_model(&out.pre.model, out.pre.step as u64, Some(&out.pre.momentum))
                .save(&dir.join("rewind.ckpt"))?;
            let row = MetricsRecord::from_run(method.tag(), 1.0 - kappa, cfg.seed, &out.ticket, &out.metrics, wall);
            write(&dir.join("metrics.csv"), records_to_csv(std::slice::from_ref(&row))?)?;
            print_run(&row, &out.ticket);
            Ok(EXIT_OK)
        }
        Command::Sweep {
            ref task,
            ref methods,
            ref sparsities,
            repeats,
            workers,
            sanity,
        } => {
            apply_task(&mut cfg, task);
            if let Some(m) = methods {
                cfg.methods = m.clone();
            }
            if let Some(s) = sparsities {
                cfg.sparsities = s.clone();
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.sanity |= sanity;
            cfg.validate()?;
            let data = load_dataset(&cfg.task.dataset)?;
            let dir = out_dir(&cfg, "cts-sweep")?;
            write(&dir.join("config.toml"), cfg.to_toml())?;
            let summary = run_experiment(&cfg, &data, &dir)?;
            print!("{}", summary_table(&summarize(&summary.records)));
            println!(
                "{} rows, {} reused cells, {} failures -> {}",
                summary.records.len(),
                summary.reused,
                summary.failures,
                summary.csv_path.display()
            );
            Ok(if summary.failures > 0 { EXIT_CELL_FAILURES } else { EXIT_OK })
        }
        Command::Sanity {
            ref ticket,
            ref checkpoint,
            ref distribution,
            ref kinds,
            objective,
            steps,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let kind = objective.unwrap_or(cfg.search.objective);
            let ticket = Ticket::load(ticket)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let dist = distribution.as_deref().map(MaskDistribution::load).transpose()?;
            let data = load_dataset(&cfg.task.dataset)?;
            let model = ckpt.to_model()?;
            let mut train_cfg = train_for(&cfg);
            train_cfg.rewind_step = ckpt.step as usize;
            let mut pre = Trainer::new(model.clone(), &data, train_cfg.clone(), None)?;
            if let Some(m) = ckpt.momentum_for(&model)? {
                pre = pre.resume(ckpt.step as usize, m)?;
            } else {
                pre.step = ckpt.step as usize;
            }
            let sparsity = 1.0 - ticket.kappa;
            let mut records = Vec::new();
            let (_, m) = evaluate_ticket(&pre, &ticket, &data, kind)?;
            records.push(MetricsRecord::from_run(&ticket.method, sparsity, cfg.seed, &ticket, &m, 0.0));
            let mut failures = 0;
            for &k in kinds {
                let name = format!("{}+{}", ticket.method, k.tag());
                let outcome = sanity_ablate(k, &ticket, &model, dist.as_ref(), cfg.seed).and_then(|a| match a {
                    Ablated::Ticket(t) => evaluate_ticket(&pre, &t, &data, kind).map(|(_, m)| (t, m)),
                    Ablated::Model(fresh) => {
                        let obj = draw_objective(&fresh, &data, kind, &ticket, train_cfg.batch_size)?;
                        let draw = fresh.evaluate(&data, &data.test, Some(&ticket.as_overlay()))?;
                        let mut from_zero = train_cfg.clone();
                        from_zero.rewind_step = 0;
                        let trained = train(fresh, &data, &from_zero, Some(&ticket))?;
                        let final_eval = trained.evaluate(&data, &data.test, None)?;
                        Ok((
                            ticket.clone(),
                            RunMetrics {
                                draw_objective: obj,
                                draw,
                                final_eval,
                            },
                        ))
                    }
                });
                match outcome {
                    Ok((t, m)) => records.push(MetricsRecord::from_run(&name, sparsity, cfg.seed, &t, &m, 0.0)),
                    Err(e) => {
                        eprintln!("{name}: {e}");
                        failures += 1;
                    }
                }
            }
            let dir = out_dir(&cfg, "cts-sanity")?;
            write(&dir.join("sanity.csv"), records_to_csv(&records)?)?;
            print!("{}", summary_table(&summarize(&records)));
            Ok(if failures > 0 { EXIT_CELL_FAILURES } else { EXIT_OK })
        }
        Command::Oracle {
            ref task,
            objective,
            batch,
            budget,
        } => {
            if cli.config.is_none() {
                // The default task is far too large to enumerate.
                cfg.task.arch = Arch::TinyMlp;
                cfg.task.dataset = DatasetSpec::SyntheticBlobs(BlobSpec::new(2, 2, 400, 7));
                cfg.train.rewind_step = 0;
            }
            apply_task(&mut cfg, task);
            let kind = objective.unwrap_or(cfg.search.objective);
            cfg.validate()?;
            let data = load_dataset(&cfg.task.dataset)?;
            let pre = pretrain(cfg.task.arch, &data, &train_for(&cfg), cfg.seed)?;
            let eval = evaluation_batch(&data, batch);
            let result = brute_force_oracle(&pre.model, &eval, cfg.search.kappa, kind, budget)?;
            let dir = out_dir(&cfg, "cts-oracle")?;
            write(&dir.join("oracle_table.csv"), result.to_csv())?;
            result.best.save(&dir.join("oracle_ticket.json"))?;
            println!(
                "{} masks enumerated, best {} = {:.6e}, worst = {:.6e}",
                result.table.len(),
                kind.tag(),
                result.table[0].value,
                result.table[result.table.len() - 1].value
            );
            Ok(EXIT_OK)
        }
        Command::Report { ref results } => {
            let mut records = Vec::new();
            for path in results {
                records.extend(read_results(path)?);
            }
            let groups = summarize(&records);
            print!("{}", summary_table(&groups));
            if let Some(dir) = &cfg.out {
                fs::create_dir_all(dir)?;
                write(&dir.join("summary.csv"), summary_csv(&groups))?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn train_for(cfg: &ExperimentConfig) -> crate::nn::TrainConfig {
    crate::nn::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    }
}

fn print_run(r: &MetricsRecord, ticket: &Ticket) {
    println!(
        "{}: density {:.6} ({} of {}), draw objective {:.6e}, draw acc {:.4}, test acc {:.4}, test loss {:.4}, {:.1}s",
        r.method,
        r.density,
        ticket.retained(),
        ticket.d(),
        r.draw_objective,
        r.draw_accuracy,
        r.test_accuracy,
        r.test_loss,
        r.wall_time_s
    );
}
