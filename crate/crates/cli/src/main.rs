use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rresm_cli::gen::RdsOptions;
use rresm_cli::infer::InferOptions;
use rresm_cli::{bench, eval, gen, infer, train, CliError, CliResult, RunConfig};
use rresm_core::selftest::{self, SelftestOptions};

#[derive(Parser, Debug)]
#[command(name = "rresm", version, about = "Stereo disparity estimation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict disparity for one image pair.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Ground-truth disparity PFM; enables the report and error map.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Calibration file (focal_px, baseline_mm); enables depth output.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Train on a manifest of samples.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Maximum number of optimizer steps.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Time forward passes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Run the built-in oracle suite.
    Selftest {
        #[arg(long, hide = true)]
        corrupt_haar: bool,
    },
    /// Write synthetic random-dot stereograms and a manifest.
    GenRds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        d_left: u32,
        #[arg(long, default_value_t = 16)]
        d_right: u32,
    },
}

fn run_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if common.checkpoint.is_some() {
        cfg.checkpoint.clone_from(&common.checkpoint);
    }
    if common.out.is_some() {
        cfg.out_dir.clone_from(&common.out);
    }
    Ok(cfg)
}

fn required(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::Usage(format!("missing --{what}")))
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Infer { common, left, right, gt, calib } => {
            let cfg = run_config(&common)?;
            let opts = InferOptions {
                left,
                right,
                gt,
                calib,
                checkpoint: cfg.checkpoint.clone(),
                model: common.config.is_some().then(|| cfg.model.clone()),
                out_dir: required(cfg.out_dir.clone(), "out")?,
            };
            let out = infer::run(&opts)?;
            for p in &out.written {
                println!("wrote {}", p.display());
            }
            if let Some(r) = out.report {
                println!("{}", r.to_json_line());
            }
        }
        Command::TrainToy { common, manifest, iters } => {
            let mut cfg = run_config(&common)?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if let Some(n) = iters {
                cfg.train.max_steps = n;
            }
            let report = train::run(&cfg, |step, l| {
                println!("step {step} total {:.4} d_f {:.4} d_cg {:.4} d_dr {:.4}", l.total, l.d_f, l.d_cg, l.d_dr);
            })?;
            println!("final_epe {:.4}", report.final_epe);
            println!("wrote {}", report.checkpoint.display());
            println!("wrote {}", report.loss_curve.display());
        }
        Command::Eval { common, manifest } => {
            let cfg = run_config(&common)?;
            let manifest = required(manifest.or(cfg.manifest.clone()), "manifest")?;
            let model = common.config.is_some().then(|| cfg.model.clone());
            let (reports, agg, _) = eval::run(&manifest, cfg.checkpoint.as_deref(), model.as_ref(), cfg.out_dir.as_deref())?;
            for r in reports.iter().chain([&agg]) {
                println!("{}", r.to_json_line());
            }
        }
        Command::Bench { common, height, width, iters } => {
            let cfg = run_config(&common)?;
            let model = common.config.is_some().then(|| cfg.model.clone());
            let r = bench::run(cfg.checkpoint.as_deref(), model.as_ref(), height, width, iters, cfg.train.seed)?;
            print!("{}", r.to_text());
        }
        Command::Selftest { corrupt_haar } => {
            let results = selftest::run(&SelftestOptions { corrupt_haar });
            print!("{}", selftest::render_table(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Selftest(format!("{failed} check(s) failed")));
            }
        }
        Command::GenRds { common, count, height, width, d_left, d_right } => {
            let cfg = run_config(&common)?;
            let out = required(cfg.out_dir.clone(), "out")?;
            let opts = RdsOptions {
                count,
                height,
                width,
                d_left,
                d_right,
                max_disparity: cfg.model.max_disparity,
                seed: cfg.train.seed,
            };
            println!("wrote {}", gen::run(&out, &opts)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    rresm_numerics::init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
