use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use reasonroute_cli::config::{BackendKind, PipelineConfig, SplitName};
use reasonroute_cli::eval::Arm;
use reasonroute_cli::stages::{self, IngestSources, StageSummary};
use reasonroute_cli::error_kind;
use reasonroute_core::policy::Anchor;
use reasonroute_core::ranking::UtilityMetric;

#[derive(Parser)]
#[command(name = "reasonroute", version, about = "Cost-aware Think/Non-Think routing for LLM ranking")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

fn parse_anchor(s: &str) -> Result<Anchor, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown anchor `{s}` (knee, utopia, epsilon, umax, manual)"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload with a planted routing signal.
    Synth {
        #[arg(long)]
        n_instances: Option<usize>,
        #[arg(long)]
        n_candidates: Option<usize>,
    },
    /// Import externally produced records as pipeline files.
    Ingest {
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dual_mode: Option<PathBuf>,
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Compute per-instance advantage labels from the dual-mode log.
    Label {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        metric: Option<UtilityMetric>,
    },
    /// Extract ranking-aware features, the extra-cost estimate and checklist signals.
    Features {
        #[arg(long)]
        checklist: Option<PathBuf>,
    },
    /// Ask the backbone the diagnostic checklist for each instance.
    Probe {
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        checklist: Option<PathBuf>,
    },
    /// Select a sparse, consistent, non-redundant feature set.
    Select {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train the monotone router.
    Train {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_depth: Option<usize>,
    },
    /// Trace the token/utility frontier over the routing threshold.
    Sweep {
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Freeze a deployable policy at an anchor of the frontier.
    Policy {
        #[arg(long, value_parser = parse_anchor)]
        anchor: Option<Anchor>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        token_budget: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        u_base: Option<f64>,
    },
    /// Apply the frozen policy to one split.
    Route {
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Score every arm on the routed split from logged outcomes.
    Eval {
        #[arg(long)]
        random_p: Option<f64>,
        #[arg(long, value_enum)]
        baseline: Option<Arm>,
    },
    /// Write Markdown/JSON reports and frontier plot data.
    Report {
        #[arg(long, value_enum)]
        baseline: Option<Arm>,
    },
    /// Generate both modes per instance through the gateway (resumable).
    Collect {
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Also log a run where the model picks its own mode.
        #[arg(long)]
        self_select: bool,
    },
    /// Run every offline stage, synth through report.
    Run {
        #[arg(long)]
        n_instances: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Label { .. } => "label",
            Command::Features { .. } => "features",
            Command::Probe { .. } => "probe",
            Command::Select { .. } => "select",
            Command::Train { .. } => "train",
            Command::Sweep { .. } => "sweep",
            Command::Policy { .. } => "policy",
            Command::Route { .. } => "route",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
            Command::Collect { .. } => "collect",
            Command::Run { .. } => "run",
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.work_dir, g.work_dir.clone());
    set(&mut cfg.seed, g.seed);
    cfg.sequential |= g.sequential;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<StageSummary>> {
    let mut cfg = load_config(&cli.global)?;
    let one = |s: StageSummary| vec![s];
    Ok(match cli.command {
        Command::Synth { n_instances, n_candidates } => {
            set(&mut cfg.synth.n_instances, n_instances);
            set(&mut cfg.synth.n_candidates, n_candidates);
            one(stages::synth(&cfg)?)
        }
        Command::Ingest {
            instances,
            embeddings,
            dual_mode,
            probes,
        } => one(stages::ingest(
            &cfg,
            &IngestSources {
                instances,
                embeddings,
                dual_mode,
                probes,
            },
        )?),
        Command::Label { lambda, metric } => {
            set(&mut cfg.lambda, lambda);
            set(&mut cfg.metric, metric);
            one(stages::label(&cfg)?)
        }
        Command::Features { checklist } => {
            cfg.checklist = checklist.or(cfg.checklist);
            one(stages::features(&cfg)?)
        }
        Command::Probe {
            split,
            backend,
            checklist,
        } => {
            set(&mut cfg.backend, backend);
            cfg.checklist = checklist.or(cfg.checklist);
            one(stages::probe(&cfg, split)?)
        }
        Command::Select { tau, rho, alpha } => {
            set(&mut cfg.select.tau, tau);
            set(&mut cfg.select.rho, rho);
            cfg.select.alpha = alpha.or(cfg.select.alpha);
            one(stages::select(&cfg)?)
        }
        Command::Train {
            rounds,
            learning_rate,
            max_depth,
        } => {
            set(&mut cfg.train.n_rounds, rounds);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.max_depth, max_depth);
            one(stages::train(&cfg)?)
        }
        Command::Sweep { grid_size, split } => {
            set(&mut cfg.policy.grid_size, grid_size);
            set(&mut cfg.policy.sweep_split, split);
            one(stages::sweep(&cfg)?)
        }
        Command::Policy {
            anchor,
            eta,
            token_budget,
            epsilon,
            u_base,
        } => {
            set(&mut cfg.policy.anchor, anchor);
            cfg.policy.eta = eta.or(cfg.policy.eta);
            cfg.policy.token_budget = token_budget.or(cfg.policy.token_budget);
            set(&mut cfg.policy.epsilon, epsilon);
            cfg.policy.u_base = u_base.or(cfg.policy.u_base);
            one(stages::policy(&cfg)?)
        }
        Command::Route { split } => one(stages::route(&cfg, split.unwrap_or(cfg.eval.split))?),
        Command::Eval { random_p, baseline } => {
            set(&mut cfg.eval.random_p, random_p);
            set(&mut cfg.eval.baseline, baseline);
            one(stages::eval(&cfg)?)
        }
        Command::Report { baseline } => one(stages::report(&cfg, baseline)?),
        Command::Collect {
            split,
            backend,
            self_select,
        } => {
            set(&mut cfg.backend, backend);
            one(stages::collect(&cfg, split, self_select)?)
        }
        Command::Run { n_instances } => {
            set(&mut cfg.synth.n_instances, n_instances);
            stages::run_all(&cfg)?
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "stage": null,
                "kind": "usage",
                "message": e.to_string().trim_end(),
            });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let stage = cli.command.name();
    match run(cli) {
        Ok(summaries) => {
            for s in summaries {
                let outs: Vec<String> = s.outputs.iter().map(|p| p.display().to_string()).collect();
                println!("{}: {} -> {}", s.stage, s.detail, outs.join(", "));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "stage": stage,
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
