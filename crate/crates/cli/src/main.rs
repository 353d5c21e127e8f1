use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rcu::harness::{
    beta_sweep, emit_report, emit_sweeps, load_model, load_run, make_suite, pretrain_base, read_records, run_continual_with,
    verify_all, write_run, Ablations, ExperimentConfig, SweepShape, DESK_CONFIG, MODEL_FILE, RECORDS_FILE,
};
use rcu::par::Exec;

#[derive(Parser)]
#[command(name = "rcu", version, about = "Rotation-controlled continual unlearning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tasks and pretrain the base classifier.
    Pretrain(ExpArgs),
    /// Run the full continual-unlearning experiment.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        /// Pretrained model archive to start from instead of pretraining.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Lie-group, Taylor-bound and gradient suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy-vs-beta curves for every request of a finished run.
    Sweep {
        /// Directory written by `rcu run`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Rebuild table.csv from records.jsonl and print it.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment TOML; the built-in desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: none, no_Lo, no_LSk, no_RC_LoRA, no_LUa.
    #[arg(long)]
    ablation: Option<String>,
    /// stacked or from-base.
    #[arg(long)]
    composition: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Run every data-parallel loop on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::from_toml(DESK_CONFIG)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.ablation {
            cfg.ablations = Ablations::from_name(a)?;
        }
        if let Some(c) = &self.composition {
            cfg.composition = c.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        exec(self.sequential)
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn pretrain_cmd(args: &ExpArgs) -> Result<()> {
    let cfg = args.config()?;
    let suite = make_suite(&cfg)?;
    let (model, acc) = pretrain_base(&cfg, &suite, args.exec())?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join(MODEL_FILE);
    model.to_archive().save(&path)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml()?)?;
    println!("pretrain accuracy {acc:.4}; wrote {}", path.display());
    Ok(())
}

fn run_cmd(args: &ExpArgs, model_path: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let exec = args.exec();
    let suite = make_suite(&cfg)?;
    let model = match model_path {
        Some(p) => {
            let m = load_model(p).with_context(|| format!("loading {}", p.display()))?;
            if m.shape != cfg.model.shape() {
                bail!("model {} has shape {:?}, config expects {:?}", p.display(), m.shape, cfg.model.shape());
            }
            m
        }
        None => {
            let (m, acc) = pretrain_base(&cfg, &suite, exec)?;
            info!("pretrain accuracy {acc:.4}");
            m
        }
    };
    let out = run_continual_with(&cfg, suite, model, exec)?;
    let files = write_run(&cfg, &out, &args.out)?;
    info!("wrote {} files to {}", files.len(), args.out.display());
    println!("base: su {:?} du {:?} rd {:.4} utility {:.4} {:.4}", out.base.su, out.base.du, out.base.rd, out.base.utility_1, out.base.utility_2);
    print_table(out.records.records());
    Ok(())
}

fn print_table(records: &[rcu::harness::RequestRecord]) {
    println!("{:>7} {:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>10}", "request", "ablation", "S.U.", "D.U.", "R.D.", "utility1", "utility2", "skew_max");
    for r in records {
        let m = r.metrics;
        let skew = r.composite.skew_ratio.iter().copied().fold(0.0, f64::max);
        println!(
            "{:>7} {:<12} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>10.4}",
            r.request_index, r.ablation, m.su, m.du, m.rd, m.utility_1, m.utility_2, skew
        );
    }
}

fn verify_cmd(seed: u64) -> Result<bool> {
    let reports = verify_all(seed)?;
    for r in &reports {
        println!(
            "{} {:<13} cases {:>4} failures {:>3} worst {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.worst,
            r.tolerance
        );
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn sweep_cmd(out: &Path, sequential: bool) -> Result<()> {
    let run = load_run(out)?;
    let cfg = &run.config;
    let suite = make_suite(cfg)?;
    let grid = cfg.sweep.grid()?;
    let mut curves = Vec::new();
    for t in 0..run.stack.len() {
        let sets = [&suite.unlearn_train[t], &suite.unlearn_test[t]];
        let c = beta_sweep(&run.model, &run.stack, t, &sets, &grid, exec(sequential))?;
        let test: Vec<f64> = c.points.iter().map(|p| p.accuracy[1]).collect();
        let shape = SweepShape::analyze(&grid, &test, 0.02)?;
        println!(
            "request {}: flat until beta {:.2}, plateau from {:.2}, drop {:.3}, max rise {:.3}",
            t + 1,
            shape.flat_until,
            shape.plateau_from,
            shape.total_drop,
            shape.max_rise
        );
        curves.push(c);
    }
    for p in emit_sweeps(&curves, out)? {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn report_cmd(out: &Path) -> Result<()> {
    let records = read_records(&out.join(RECORDS_FILE))?;
    let files = emit_report(&records, out)?;
    print_table(&records);
    info!("wrote {}", files.table.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(args) => pretrain_cmd(args).map(|_| true),
        Command::Run { exp, model } => run_cmd(exp, model.as_deref()).map(|_| true),
        Command::Verify { seed } => verify_cmd(*seed),
        Command::Sweep { out, sequential } => sweep_cmd(out, *sequential).map(|_| true),
        Command::Report { out } => report_cmd(out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
