use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sharpqos::evalcli::{self, EvalReport, ExperimentConfig, Overrides, Pipeline, Stage};
use sharpqos::qosdata::{self, synth};
use sharpqos::trainloop::Balancing;

#[derive(Parser)]
#[command(name = "sharpqos", version, about = "Joint multi-task QoS prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training density in percent.
    #[arg(long)]
    td: Option<f64>,
    #[arg(long, value_enum)]
    balancing: Option<BalancingArg>,
    /// Cold-start scenario `KIND:PCT` with KIND in CU, CS, CB.
    #[arg(long = "cold-start")]
    cold_start: Option<String>,
    /// Percentage of test entries removed as outliers.
    #[arg(long = "outlier-frac")]
    outlier_frac: Option<f64>,
    /// Sequential kernels and a timing-free report.
    #[arg(long = "strict-determinism")]
    strict_determinism: bool,
    /// Output directory (overrides `evalcli.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalancingArg {
    Equal,
    Dwa,
    Huw,
    Ema,
}

impl From<BalancingArg> for Balancing {
    fn from(b: BalancingArg) -> Self {
        match b {
            BalancingArg::Equal => Balancing::Equal,
            BalancingArg::Dwa => Balancing::Dwa,
            BalancingArg::Huw => Balancing::Huw,
            BalancingArg::Ema => Balancing::Ema,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Lowrank,
    WsdreamLike,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load/generate the dataset, split it and write the archive.
    Preprocess(Common),
    /// Preprocess, then build (or reuse) the initial features.
    Features(Common),
    /// Everything up to training; writes model.ckpt, history.csv and gates.
    Train(Common),
    /// Evaluate an existing model.ckpt; writes report.json and summary.md.
    Eval(Common),
    /// All stages.
    Run(Common),
    /// Base run plus cold-start scenarios, one subdirectory each.
    Coldstart {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "CB:10,CB:20")]
        scenarios: Vec<String>,
    },
    /// Train once, evaluate with increasing outlier removal.
    Outliers {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8,10")]
        fractions: Vec<f64>,
    },
    /// Re-render summary.md from report.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report file (default: <out>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset archive.
    Synth {
        #[arg(long, value_enum, default_value = "lowrank")]
        kind: SynthKind,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        td: c.td,
        balancing: c.balancing.map(Into::into),
        cold_start: c.cold_start.clone(),
        outlier_frac: c.outlier_frac,
        strict_determinism: c.strict_determinism,
        output_dir: c.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn stage(c: &Common, last: Stage, train: bool) -> Result<()> {
    let cfg = load_config(c)?;
    let out = cfg.evalcli.output_dir.clone();
    let mut pipe = Pipeline::new(cfg, &out)?;
    if let Some(r) = pipe.run_until(last, train)? {
        print_report(&r);
    }
    log::info!("artifacts in {}", out.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    for t in &r.tasks {
        println!(
            "{}: MAE {:.4} RMSE {:.4} (service-mean baseline MAE {:.4}, RMSE {:.4})",
            t.name, t.mae, t.rmse, t.baseline_mae, t.baseline_rmse
        );
    }
}

fn print_sweep(runs: &[(String, EvalReport)]) {
    for (label, r) in runs {
        let cells: Vec<String> = r.tasks.iter().map(|t| format!("{} MAE {:.4}", t.name, t.mae)).collect();
        println!("{label}: {}", cells.join(", "));
    }
}

fn report(c: &Common, path: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let out = cfg.evalcli.output_dir;
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| out.join("report.json"));
    let r = EvalReport::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let md = r.to_markdown();
    let dest = path.with_file_name("summary.md");
    fs::write(&dest, &md).with_context(|| format!("writing {}", dest.display()))?;
    print!("{md}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Preprocess(c) => stage(c, Stage::Preprocess, false),
        Cmd::Features(c) => stage(c, Stage::Features, false),
        Cmd::Train(c) => stage(c, Stage::Train, true),
        Cmd::Eval(c) => stage(c, Stage::Evaluate, false),
        Cmd::Run(c) => stage(c, Stage::Evaluate, true),
        Cmd::Coldstart { common, scenarios } => {
            let cfg = load_config(common)?;
            let runs = evalcli::cold_start_sweep(&cfg, &cfg.evalcli.output_dir, scenarios)?;
            print_sweep(&runs);
            Ok(())
        }
        Cmd::Outliers { common, fractions } => {
            let cfg = load_config(common)?;
            let runs = evalcli::outlier_sweep(&cfg, &cfg.evalcli.output_dir, fractions)?;
            print_sweep(&runs);
            Ok(())
        }
        Cmd::Report { common, report: path } => report(common, path.as_deref()),
        Cmd::Synth { kind, n, m, rank, tasks, seed, out } => {
            if *n == 0 || *m == 0 {
                bail!("n and m must be positive");
            }
            let ds = match kind {
                SynthKind::Lowrank => synth::low_rank(*n, *m, *rank, *tasks, *seed),
                SynthKind::WsdreamLike => synth::wsdream_like(*n, *m, *seed),
            };
            let name = match kind {
                SynthKind::Lowrank => "lowrank",
                SynthKind::WsdreamLike => "wsdream_like",
            };
            qosdata::write_archive(out, &ds, Some(*seed), name)?;
            println!("wrote {}×{} ({} tasks) to {}", ds.n, ds.m, ds.tasks(), out.display());
            Ok(())
        }
    }
}
