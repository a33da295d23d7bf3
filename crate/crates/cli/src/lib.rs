//! Command-line front end: training, evaluation, density maps, sampling,
//! gradient checks and parameter counts, driven by flat run-config files.

pub mod config;
pub mod experiment;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcnaf::experiments::{density_grid, DensityGrid};
use hcnaf::hypernet::param_counts;
use hcnaf::model::ConditionalModel;
use hcnaf::training::{grad_check, train, GradCheckOptions};
use hcnaf::{Error, Result};

use config::{parse_precision, Experiment, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.hcnaf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "hcnaf", version, about = "Hyper-conditioned autoregressive flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Print held-out metrics of a checkpoint as key=value lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation overrides, e.g. eval.n_samples=2000.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate the density of a 2-D model on a lattice.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cond: ConditionArgs,
        /// x_lo,x_hi,y_lo,y_hi
        #[arg(long, default_value = "-5,5,-5,5", allow_hyphen_values = true)]
        bounds: String,
        /// N or NX,NY cells.
        #[arg(long, default_value = "100")]
        res: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: DensityFormat,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples with their log-probabilities as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cond: ConditionArgs,
        #[arg(short = 'n', long = "num", default_value = "1000")]
        n: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences at initialization.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// double or single; defaults to train.precision.
        #[arg(long)]
        precision: Option<String>,
        /// Maximum accepted relative error; 1e-4 at double and 1e-2 at single precision by default.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Rows of training data in the checked batch.
        #[arg(long, default_value = "16")]
        batch: usize,
        #[arg(long, default_value = "0")]
        seed: u64,
    },
    /// Print parameter counts of a hyper-network architecture.
    Paramcount {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        cond_dim: Option<usize>,
        #[arg(long)]
        hidden_layers: Option<usize>,
        #[arg(long)]
        width_per_dim: Option<usize>,
        /// Comma-separated trunk widths.
        #[arg(long)]
        trunk: Option<String>,
        #[arg(long)]
        head_width_w: Option<usize>,
        #[arg(long)]
        head_width_b: Option<usize>,
    },
    /// Print the resolved run configuration.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Where a run configuration comes from.
#[derive(Args, Debug)]
pub struct RunArgs {
    /// Config file.
    #[arg(long, conflicts_with = "experiment")]
    pub config: Option<PathBuf>,
    /// Start from the defaults of toy1, toy2, toypom or mnist.
    #[arg(long)]
    pub experiment: Option<String>,
    /// Overrides applied after loading, e.g. train.max_iters=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; overrides output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConditionArgs {
    /// Comma-separated condition vector.
    #[arg(long, allow_hyphen_values = true)]
    pub condition: Option<String>,
    /// Toy-POM scenario index.
    #[arg(long)]
    pub scenario: Option<usize>,
    /// Toy-POM horizon in seconds.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DensityFormat {
    Csv,
    Pgm,
}

fn parse_set(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.experiment) {
            (Some(path), None) => RunConfig::parse(&fs::read_to_string(path)?)?,
            (None, Some(name)) => RunConfig::defaults(name.parse::<Experiment>()?),
            _ => return Err(Error::Argument("give exactly one of --config and --experiment".into())),
        };
        for (k, v) in parse_set(&self.set)? {
            cfg.set(&k, &v)?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = write!(stderr, "{e}");
            return EXIT_USAGE;
        }
        Err(e) => {
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    if let Err(e) = configure_threads() {
        let _ = writeln!(stderr, "error: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

/// Caps the worker pool at `HCNAF_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HCNAF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("HCNAF_THREADS must be a positive integer, got '{v}'")))?;
    // a pool built earlier in the same process is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train { run, force } => {
            let cfg = run.resolve()?;
            cmd_train(&cfg, force, out)?;
        }
        Command::Eval { checkpoint, set } => {
            let (mut cfg, model) = experiment::load_checkpoint(&checkpoint)?;
            for (k, v) in parse_set(&set)? {
                if !k.starts_with("eval.") {
                    return Err(Error::Argument(format!("eval accepts only eval.* overrides, got '{k}'")));
                }
                cfg.set(&k, &v)?;
            }
            cfg.validate()?;
            let report = experiment::evaluate(&cfg, &model)?;
            out.write_all(report.to_text().as_bytes())?;
        }
        Command::Density {
            checkpoint,
            cond,
            bounds,
            res,
            format,
            out: path,
        } => {
            let (cfg, model) = experiment::load_checkpoint(&checkpoint)?;
            let c = experiment::resolve_condition(&cfg, cond.condition.as_deref(), cond.scenario, cond.horizon)?;
            let bounds = parse_bounds(&bounds)?;
            let (nx, ny) = parse_res(&res)?;
            let grid = density_grid(&model, &c, bounds, nx, ny)?;
            let bytes = match format {
                DensityFormat::Csv => density_csv(&grid).into_bytes(),
                DensityFormat::Pgm => density_pgm(&grid),
            };
            write_output(path.as_deref(), &bytes, out)?;
        }
        Command::Sample {
            checkpoint,
            cond,
            n,
            seed,
            out: path,
        } => {
            let (cfg, model) = experiment::load_checkpoint(&checkpoint)?;
            let c = experiment::resolve_condition(&cfg, cond.condition.as_deref(), cond.scenario, cond.horizon)?;
            let s = model.sample(&c, n, seed)?;
            let mut csv: Vec<String> = (1..=model.dim()).map(|d| format!("x{d}")).collect();
            csv.push("log_prob".into());
            let mut text = csv.join(",") + "\n";
            for (p, lp) in s.points.iter().zip(&s.log_probs) {
                let mut row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
                row.push(format!("{lp:?}"));
                text.push_str(&row.join(","));
                text.push('\n');
            }
            write_output(path.as_deref(), text.as_bytes(), out)?;
        }
        Command::Gradcheck {
            run,
            precision,
            tolerance,
            batch,
            seed,
        } => {
            let cfg = run.resolve()?;
            let precision = match precision {
                Some(p) => parse_precision(&p)?,
                None => cfg.train.precision,
            };
            let tol = tolerance.unwrap_or(match precision {
                hcnaf::tensor::Precision::Double => 1e-4,
                hcnaf::tensor::Precision::Single => 1e-2,
            });
            let report = cmd_gradcheck(&cfg, precision, batch, seed)?;
            writeln!(out, "max_rel_err={:?}", report.max_rel_err)?;
            writeln!(out, "checked={}", report.checked)?;
            if let Some(w) = &report.worst {
                writeln!(out, "worst={}[{}]", w.0, w.1)?;
            }
            writeln!(out, "tolerance={tol:?}")?;
            let pass = report.max_rel_err < tol;
            writeln!(out, "pass={pass}")?;
            if !pass {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::Paramcount {
            run,
            dim,
            cond_dim,
            hidden_layers,
            width_per_dim,
            trunk,
            head_width_w,
            head_width_b,
        } => {
            let base = if run.config.is_some() || run.experiment.is_some() {
                run.resolve()?
            } else {
                RunConfig::defaults(Experiment::Toy1)
            };
            let mut flow = base.flow.clone();
            let mut hyper = base.hyper.clone();
            flow.dim = dim.unwrap_or(flow.dim);
            flow.hidden_layers = hidden_layers.unwrap_or(flow.hidden_layers);
            flow.width_per_dim = width_per_dim.unwrap_or(flow.width_per_dim);
            hyper.cond_dim = cond_dim.unwrap_or(hyper.cond_dim);
            if let Some(t) = trunk {
                let mut tmp = base.clone();
                tmp.set("hyper.trunk_widths", &t)?;
                hyper.trunk_widths = tmp.hyper.trunk_widths;
            }
            hyper.head_width_w = head_width_w.unwrap_or(hyper.head_width_w);
            hyper.head_width_b = head_width_b.unwrap_or(hyper.head_width_b);
            flow.validate()?;
            hyper.validate()?;
            let p = param_counts(&flow, &hyper);
            for (k, v) in [
                ("n_w", p.n_w),
                ("n_b", p.n_b),
                ("n_h", p.n_h),
                ("total", p.total),
                ("stored_w", p.stored_w),
                ("allocated", p.allocated),
            ] {
                writeln!(out, "{k}={v}")?;
            }
        }
        Command::Config { run } => {
            out.write_all(run.resolve()?.to_text().as_bytes())?;
        }
    }
    Ok(EXIT_OK)
}

/// Trains per `cfg` and writes the checkpoint, metrics CSV and resolved
/// config into `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    prepare_output_dir(&cfg.output_dir, force)?;
    let data = experiment::training_data(cfg)?;
    let mut model = experiment::build_model(cfg)?;
    let report = train(&mut model, &data, &cfg.train)?;
    experiment::save_checkpoint(&model, cfg, &cfg.output_dir.join(CHECKPOINT_FILE))?;
    fs::write(cfg.output_dir.join(METRICS_FILE), report.metrics_csv())?;
    fs::write(cfg.output_dir.join(CONFIG_FILE), cfg.to_text())?;
    writeln!(out, "initial_val_nll={:?}", report.initial_val_nll)?;
    writeln!(out, "best_val_nll={:?}", report.best_val_nll)?;
    writeln!(out, "best_iter={}", report.best_iter)?;
    writeln!(out, "checkpoint={}", cfg.output_dir.join(CHECKPOINT_FILE).display())?;
    Ok(())
}

pub fn cmd_gradcheck(
    cfg: &RunConfig,
    precision: hcnaf::tensor::Precision,
    batch: usize,
    seed: u64,
) -> Result<hcnaf::training::GradCheckReport> {
    if batch == 0 {
        return Err(Error::Argument("--batch must be at least 1".into()));
    }
    let data = experiment::training_data(cfg)?;
    let model = experiment::build_model(cfg)?;
    // rows spread over the whole set so that every condition appears
    let stride = (data.len() / batch).max(1);
    let idx: Vec<usize> = (0..data.len()).step_by(stride).take(batch).collect();
    let sub = data.subset(&idx);
    let mut opts = GradCheckOptions::new(precision);
    opts.seed = seed;
    grad_check(&model, &sub.x, &sub.c, &opts)
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Argument(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Argument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_output(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => out.write_all(bytes)?,
    }
    Ok(())
}

pub fn parse_bounds(s: &str) -> Result<[f64; 4]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Argument(format!("invalid bounds '{s}'"))))
        .collect::<Result<_>>()?;
    let b: [f64; 4] = v
        .try_into()
        .map_err(|_| Error::Argument(format!("bounds need four values, got '{s}'")))?;
    hcnaf::experiments::validate_bounds(b, 1, 1)?;
    Ok(b)
}

pub fn parse_res(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("invalid resolution '{s}'"));
    let v: Vec<usize> = s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let (nx, ny) = match v.as_slice() {
        [n] => (*n, *n),
        [nx, ny] => (*nx, *ny),
        _ => return Err(bad()),
    };
    if nx == 0 || ny == 0 {
        return Err(bad());
    }
    Ok((nx, ny))
}

/// `x,y,density` rows at cell centers, x fastest, y ascending.
pub fn density_csv(g: &DensityGrid) -> String {
    let mut s = String::from("x,y,density\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (x, y) = g.center(i, j);
            s.push_str(&format!("{x:?},{y:?},{:?}\n", g.value(i, j)));
        }
    }
    s
}

/// Binary P5 image scaled so the largest density maps to 255; the first
/// image row is the top edge of the bounds.
pub fn density_pgm(g: &DensityGrid) -> Vec<u8> {
    let max = g.values.iter().copied().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", g.nx, g.ny).into_bytes();
    for j in (0..g.ny).rev() {
        for i in 0..g.nx {
            let v = if max > 0.0 { (g.value(i, j) / max * 255.0).round() } else { 0.0 };
            bytes.push(v as u8);
        }
    }
    bytes
}
