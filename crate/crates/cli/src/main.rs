//! `dlstm`: data generation, distributed LSTM training, and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlstm_core::SyncStrategy;

use commands::RunCtx;
use config::{usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "dlstm", version, about = "Distributed LSTM acoustic model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/valid JSONL data.
    GenData(Common),
    /// Train a model from scratch with cross entropy.
    Train(Common),
    /// Grow a model one layer at a time.
    Layerwise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_layers: Option<usize>,
    },
    /// Train a student on a teacher's posteriors.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Fine-tune a base model with sMBR, optionally on a data subset.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        lattices: Option<PathBuf>,
        #[arg(long)]
        subset_fraction: Option<f64>,
    },
    /// Report FER, cross entropy and inference speed on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Time mesh allreduce rounds at several worker counts.
    AllreduceBench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',')]
        bench_workers: Option<Vec<usize>>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
    },
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// JSON run configuration (a previous run's manifest.json works too).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    valid_data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    mini_batch: Option<usize>,
    #[arg(long)]
    sync_period: Option<usize>,
    /// `ma`, or `bmuf` with --eta/--zeta (defaults 0.9 and 1.0).
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    /// EMA decay in (0, 1); 0 disables EMA.
    #[arg(long)]
    ema_alpha: Option<f64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.manifest = None;
        if cfg.data.train.is_none() && cfg.hmm.is_none() && self.train_data.is_none() {
            cfg.task.get_or_insert_with(Default::default);
        }
        if self.train_data.is_some() || self.valid_data.is_some() {
            cfg.data.train = self.train_data.clone().or(cfg.data.train);
            cfg.data.valid = self.valid_data.clone().or(cfg.data.valid);
        }
        let needs_train = self.seed.is_some()
            || self.workers.is_some()
            || self.epochs.is_some()
            || self.learning_rate.is_some()
            || self.mini_batch.is_some()
            || self.sync_period.is_some()
            || self.sync.is_some()
            || self.eta.is_some()
            || self.zeta.is_some()
            || self.ema_alpha.is_some();
        if needs_train && cfg.train.is_none() {
            let (train, valid) = cfg.datasets()?;
            cfg.train = Some(cfg.train_config(&train, &valid)?);
        }
        if let Some(t) = &mut cfg.train {
            if let Some(v) = self.seed {
                t.seed = v;
            }
            if let Some(v) = self.workers {
                t.workers = v;
            }
            if let Some(v) = self.epochs {
                t.epochs = v;
            }
            if let Some(v) = self.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = self.mini_batch {
                t.mini_batch = v;
            }
            if let Some(v) = self.sync_period {
                t.sync_period = v;
            }
            if let Some(v) = self.ema_alpha {
                t.ema_alpha = (v != 0.0).then_some(v);
            }
            let (mut eta, mut zeta) = match t.sync {
                SyncStrategy::Bmuf { eta, zeta } => (eta, zeta),
                SyncStrategy::ModelAverage => (0.9, 1.0),
            };
            eta = self.eta.unwrap_or(eta);
            zeta = self.zeta.unwrap_or(zeta);
            match self.sync.as_deref() {
                Some("ma") => t.sync = SyncStrategy::ModelAverage,
                Some("bmuf") => t.sync = SyncStrategy::Bmuf { eta, zeta },
                Some(other) => {
                    return Err(usage(format!("--sync: expected `ma` or `bmuf`, got `{other}`")))
                }
                None => {
                    if let SyncStrategy::Bmuf { .. } = t.sync {
                        t.sync = SyncStrategy::Bmuf { eta, zeta };
                    } else if self.eta.is_some() || self.zeta.is_some() {
                        return Err(usage("--eta/--zeta need BMUF sync"));
                    }
                }
            }
        }
        cfg.absolutize()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&ctx(&c, "gen-data"), c.resolve()?),
        Command::Train(c) => commands::train(&ctx(&c, "train"), c.resolve()?),
        Command::Layerwise { common, max_layers } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = max_layers {
                cfg.layerwise.get_or_insert_with(Default::default).max_layers = m;
            }
            commands::layerwise(&ctx(&common, "layerwise"), cfg)
        }
        Command::Distill { common, teacher } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = teacher {
                cfg.distill.get_or_insert_with(Default::default).teacher = Some(t);
                cfg.absolutize()?;
            }
            commands::distill_cmd(&ctx(&common, "distill"), cfg)
        }
        Command::Transfer {
            common,
            base,
            lattices,
            subset_fraction,
        } => {
            let mut cfg = common.resolve()?;
            let section = cfg.transfer.get_or_insert_with(Default::default);
            if let Some(b) = base {
                section.base = Some(b);
            }
            if let Some(l) = lattices {
                section.lattices = Some(l);
            }
            if let Some(f) = subset_fraction {
                section.subset_fraction = f;
            }
            cfg.absolutize()?;
            commands::transfer(&ctx(&common, "transfer"), cfg)
        }
        Command::Eval { common, model } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = model {
                cfg.eval.get_or_insert_with(Default::default).model = Some(m);
                cfg.absolutize()?;
            }
            commands::eval(&ctx(&common, "eval"), cfg)
        }
        Command::AllreduceBench {
            common,
            bench_workers,
            len,
            rounds,
        } => {
            let mut cfg = common.resolve()?;
            let b = cfg.allreduce_bench.get_or_insert_with(Default::default);
            if let Some(w) = bench_workers {
                b.workers = w;
            }
            if let Some(l) = len {
                b.len = l;
            }
            if let Some(r) = rounds {
                b.rounds = r;
            }
            commands::allreduce_bench(&ctx(&common, "allreduce-bench"), cfg)
        }
    }
}

fn ctx(c: &Common, command: &'static str) -> RunCtx {
    RunCtx {
        out: c.out.clone(),
        command,
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<dlstm_core::Error>(),
                Some(dlstm_core::Error::Config { .. })
            )
    })
}

fn main() -> ExitCode {
    let level = std::env::var("DST_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
