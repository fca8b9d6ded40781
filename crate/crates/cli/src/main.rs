use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use escore::experiment::{self, ExperimentError, Role, RunConfig, SweepParam};
use escore::gradcheck;
use escore::mar::DecodeConfig;

#[derive(Parser)]
#[command(name = "escore", version, about = "One-step energy-distance sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file, overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory (default: `<out>/<command>-<digest>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Energy,
    Diffusion,
    Flow,
    Shortcut,
    Meanflow,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Swissroll,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Lambda,
    Cfg,
    M,
    Wiring,
}

#[derive(Subcommand)]
enum Command {
    /// Train one unconditional toy head.
    TrainHead {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_enum, default_value = "swissroll")]
        dataset: Dataset,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw samples from a trained toy head.
    Sample {
        /// Run directory or checkpoint file.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Also write a scatter plot against fresh data.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Append a metrics row comparing two point CSVs.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Label stored in the method column.
        #[arg(long, default_value = "generated")]
        method: String,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV to append to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all five heads per seed and compare their samplers.
    CompareSwissroll {
        /// Comma-separated seeds (default: metrics.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the sequence-model teacher or a student.
    TrainMar {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Teacher run directory; required for students with lambda > 0.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode class-conditional sequences from a trained sequence model.
    Decode {
        #[arg(long)]
        run: PathBuf,
        #[arg(long = "cfg")]
        cfg_scale: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Skip the null-conditioned pass.
        #[arg(long)]
        no_guidance: bool,
        #[arg(long)]
        head_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score students over a grid of one parameter.
    Sweep {
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check gradients of every primitive and composite loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn resolve(args: &ConfigArgs, flags: Vec<String>) -> Result<RunConfig, ExperimentError> {
    let text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ExperimentError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })?),
        None => None,
    };
    // Explicit flags win over --set.
    let mut overrides = args.sets.clone();
    overrides.extend(flags);
    Ok(RunConfig::resolve(text.as_deref(), &overrides)?)
}

fn out_dir(args: &ConfigArgs, cfg: &RunConfig, verb: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out).join(format!("{verb}-{}", &cfg.digest()[..12])))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Energy => "energy",
        Method::Diffusion => "diffusion",
        Method::Flow => "flow",
        Method::Shortcut => "shortcut",
        Method::Meanflow => "meanflow",
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    experiment::configure_threads()?;
    match cli.command {
        Command::TrainHead {
            method,
            dataset: Dataset::Swissroll,
            seed,
            cfg,
        } => {
            let mut flags = vec![format!("head.kind=\"{}\"", method_name(method))];
            flags.extend(seed.map(|s| format!("seed={s}")));
            let run = resolve(&cfg, flags)?;
            let out = out_dir(&cfg, &run, "train-head");
            experiment::cmd_train_head(&run, &out)?;
            println!("{}", out.display());
        }
        Command::Sample {
            run,
            steps,
            n,
            seed,
            output,
            svg,
        } => {
            let x = experiment::cmd_sample(&run, steps, n, seed, &output, svg.as_deref())?;
            println!("wrote {} samples to {}", x.rows(), output.display());
        }
        Command::Eval {
            generated,
            reference,
            method,
            steps,
            seed,
            out,
        } => {
            let r = experiment::cmd_eval(&generated, &reference, &method, steps, seed, &out)?;
            println!("{}\n{}", escore::stats::METRICS_HEADER, r.csv_row());
        }
        Command::CompareSwissroll { seeds, cfg } => {
            let mut flags = Vec::new();
            if !seeds.is_empty() {
                flags.push(format!("metrics.seeds={}", serde_json::json!(seeds)));
            }
            let run = resolve(&cfg, flags)?;
            let out = out_dir(&cfg, &run, "compare-swissroll");
            let cells = experiment::cmd_compare_swissroll(&run, &out)?;
            println!("{}", escore::stats::METRICS_HEADER);
            for c in &cells {
                for r in &c.rows {
                    println!("{}", r.csv_row());
                }
            }
            println!("{}", out.display());
        }
        Command::TrainMar {
            role,
            teacher,
            lambda,
            seed,
            cfg,
        } => {
            let mut flags: Vec<String> = lambda.map(|l| format!("mar.student.lambda={l}")).into_iter().collect();
            flags.extend(seed.map(|s| format!("seed={s}")));
            let run = resolve(&cfg, flags)?;
            let role = match role {
                RoleArg::Teacher => Role::Teacher,
                RoleArg::Student => Role::Student,
            };
            let out = out_dir(&cfg, &run, &format!("train-mar-{}", role.name()));
            let trained = experiment::cmd_train_mar(&run, role, teacher.as_deref(), &out)?;
            if let Some(last) = trained.log.last() {
                println!("final {}", last.csv_row());
            }
            println!("{}", out.display());
        }
        Command::Decode {
            run,
            cfg_scale,
            iterations,
            no_guidance,
            head_steps,
            seed,
            per_class,
            output,
        } => {
            let (stored, role, _) = experiment::load_mar(&run)?;
            let base = match role {
                Role::Teacher => DecodeConfig {
                    head_steps: stored.mar.teacher_head_steps,
                    ..stored.decode
                },
                Role::Student => stored.decode,
            };
            let dcfg = DecodeConfig {
                cfg_scale: cfg_scale.unwrap_or(base.cfg_scale),
                iterations: iterations.unwrap_or(base.iterations),
                guidance: base.guidance && !no_guidance,
                head_steps: head_steps.unwrap_or(base.head_steps),
                seed: seed.unwrap_or(base.seed),
                ..base
            };
            let out = experiment::cmd_decode(&run, &dcfg, per_class, &output)?;
            println!(
                "decoded {} sequences with {} backbone forwards into {}",
                out.sequences.len(),
                out.backbone_forwards,
                output.display()
            );
        }
        Command::Sweep {
            param,
            values,
            teacher,
            cfg,
        } => {
            let run = resolve(&cfg, Vec::new())?;
            let param = match param {
                Param::Lambda => SweepParam::Lambda,
                Param::Cfg => SweepParam::Cfg,
                Param::M => SweepParam::M,
                Param::Wiring => SweepParam::Wiring,
            };
            let out = out_dir(&cfg, &run, &format!("sweep-{}", param.name()));
            let rows = experiment::cmd_sweep(&run, param, &values, teacher.as_deref(), &out)?;
            println!("{}", experiment::sweep_header(run.mar.model.num_classes));
            for r in &rows {
                println!("{}", r.csv_row());
            }
            println!("{}", out.display());
        }
        Command::Gradcheck { points, seed } => {
            let mut failed = 0;
            for r in gradcheck::run_suite(points, seed) {
                let status = if r.passed() { "ok" } else { "FAILED" };
                println!(
                    "{:28} points {:4}  grad {:.2e}  jvp {:.2e}  {status}",
                    r.name, r.points, r.max_grad_err, r.max_jvp_err
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(ExperimentError::Numeric(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
