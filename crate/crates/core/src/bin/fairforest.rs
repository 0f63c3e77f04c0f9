use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use fairforest::baselines::{build_learner, resume_learner, Baseline, BaselineOptions, MajorityConfig, MajoritySource};
use fairforest::data::{
    generate_synthetic, read_stream, rescale_to_bound, write_csv, DatasetSchema, Instance, Normalization,
    SyntheticConfig,
};
use fairforest::error::{Error, Result};
use fairforest::forest::ForestShape;
use fairforest::gradients::HuberParams;
use fairforest::learner::{LearnerConfig, StepRecord};
use fairforest::optim::AdamConfig;
use fairforest::stats::FairnessNotion;
use fairforest::verify::{audit_estimation_error, gradcheck_trial, record_trace, reports_to_json};

const PROGRESS_EVERY: u64 = 1000;
const GRADCHECK_THRESHOLD: f64 = 1e-4;
const TRAJECTORY_HEADER: &str = "step,y,a,pred,running_accuracy,dp_hard,dp_soft,grad_norm_total,grad_norm_fair";

#[derive(Parser)]
#[command(name = "fairforest", version, about = "Online fair classification with oblique soft forests")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one stream and write the per-step trajectory and a summary.
    Run(RunArgs),
    /// Repeat `run` for several lambdas and tabulate the final metrics.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated regularization weights.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Compare analytic task gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb the analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Audit the aggregate gradient estimates against full recomputation.
    Audit {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic biased stream as CSV.
    Synth {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0.6)]
        bias: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = SyntheticConfig::default().separation)]
        separation: f64,
        #[arg(long, default_value_t = SyntheticConfig::default().group_shift)]
        group_shift: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// CSV stream to learn from.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Learn from the seeded synthetic stream.
    #[arg(long)]
    synthetic: bool,
    /// `key = value` file of defaults; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    trees: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value = "dp")]
    fairness: String,
    #[arg(long, default_value = "node")]
    baseline: String,
    /// Seeds the model and, unless `--data-seed` is given, the synthetic stream.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Floor on the running-mean step weight of the aggregates.
    #[arg(long)]
    ema: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write `checkpoint.json` every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint, skipping the instances it has seen.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Rescale every input so that the largest norm equals this bound.
    #[arg(long)]
    input_bound: Option<f64>,

    #[arg(long, default_value = "y")]
    label: String,
    #[arg(long, default_value = "a")]
    group: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Feature standardization for CSV input: none or online.
    #[arg(long, default_value = "none")]
    normalize: String,

    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 0.6)]
    bias: f64,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().separation)]
    separation: f64,
    #[arg(long, default_value_t = SyntheticConfig::default().group_shift)]
    group_shift: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    data_seed: Option<u64>,

    /// Hidden width of the MLP baseline.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Probability that the majority baseline keeps the model's prediction.
    #[arg(long, default_value_t = 0.5)]
    majority_p: f64,
    /// Fixed majority label; the running majority is used when absent.
    #[arg(long)]
    majority_label: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn baseline(&self) -> Result<Baseline> {
        self.baseline.parse()
    }

    fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n: self.n,
            dim: self.dim,
            bias: self.bias,
            separation: self.separation,
            group_shift: self.group_shift,
            noise: self.noise,
            seed: self.data_seed.unwrap_or(self.seed),
        }
    }

    fn schema(&self, path: &Path) -> Result<DatasetSchema> {
        let mut schema = DatasetSchema::from_header(path, &self.label, &self.group, self.classes, self.groups)?;
        schema.normalization = match self.normalize.as_str() {
            "none" => Normalization::None,
            "online" => Normalization::Online,
            other => return Err(Error::Config(format!("unknown normalization {other:?}"))),
        };
        Ok(schema)
    }

    fn dim_and_classes(&self) -> Result<(usize, usize)> {
        match (&self.data, self.synthetic) {
            (Some(path), false) => Ok((self.schema(path)?.dim(), self.classes)),
            (None, true) => Ok((self.dim, 2)),
            _ => Err(Error::Config("give exactly one of --data PATH or --synthetic".into())),
        }
    }

    fn learner_config(&self, lambda: f64) -> Result<LearnerConfig> {
        let (dim, classes) = self.dim_and_classes()?;
        let groups = if self.synthetic { 2 } else { self.groups };
        let config = LearnerConfig {
            shape: ForestShape::new(self.height, self.trees, dim, classes)?,
            huber: HuberParams::new(self.delta, lambda)?,
            notion: self.fairness.parse::<FairnessNotion>()?,
            groups,
            adam: AdamConfig { learning_rate: self.lr, ..AdamConfig::default() },
            seed: self.seed,
            ema: self.ema,
        };
        config.validate()?;
        Ok(config)
    }

    fn options(&self) -> Result<BaselineOptions> {
        let source = match self.majority_label {
            Some(label) => MajoritySource::Fixed(label),
            None => MajoritySource::Running,
        };
        Ok(BaselineOptions { hidden: self.hidden, majority: MajorityConfig::new(self.majority_p, source)? })
    }

    fn stream(&self) -> Result<Box<dyn Iterator<Item = Result<Instance>>>> {
        let stream: Box<dyn Iterator<Item = Result<Instance>>> = match (&self.data, self.synthetic) {
            (Some(path), false) => Box::new(read_stream(path, &self.schema(path)?)?),
            (None, true) => Box::new(generate_synthetic(&self.synthetic_config())?),
            _ => return Err(Error::Config("give exactly one of --data PATH or --synthetic".into())),
        };
        match self.input_bound {
            None => Ok(stream),
            Some(bound) => {
                if !(bound > 0.0 && bound.is_finite()) {
                    return Err(Error::Config(format!("input bound must be positive, got {bound}")));
                }
                let mut all = stream.collect::<Result<Vec<_>>>()?;
                rescale_to_bound(&mut all, bound);
                Ok(Box::new(all.into_iter().map(Ok)))
            }
        }
    }

    fn config_echo(&self, config: &LearnerConfig, baseline: Baseline) -> serde_json::Value {
        json!({
            "learner": config,
            "baseline": baseline.to_string(),
            "data": match &self.data {
                Some(path) => json!({ "path": path.display().to_string(), "normalize": self.normalize }),
                None => json!({ "synthetic": self.synthetic_config() }),
            },
            "input_bound": self.input_bound,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn trajectory_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        r.y,
        r.a,
        r.pred,
        r.running_accuracy,
        fmt_opt(r.dp_hard),
        fmt_opt(r.dp_soft),
        r.grad_norm_total,
        r.grad_norm_fair
    )
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct RunOutcome {
    steps: u64,
    accuracy: f64,
    dp_hard: Option<f64>,
    dp_soft: Option<f64>,
    state_bytes: usize,
    wall_time: f64,
}

/// Trains one learner over the stream; `trajectory` receives every row.
fn train(
    args: &RunArgs,
    lambda: f64,
    stream: Box<dyn Iterator<Item = Result<Instance>>>,
    mut trajectory: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<(RunOutcome, LearnerConfig, Baseline)> {
    let baseline = args.baseline()?;
    let config = args.learner_config(lambda)?;
    let mut learner = match &args.resume {
        Some(path) => resume_learner(baseline, &fs::read_to_string(path)?)?,
        None => build_learner(&config, baseline, &args.options()?)?,
    };
    let skip = learner.metrics().total() as usize;
    let started = Instant::now();
    let mut peak = learner.state_bytes();
    let every = args.checkpoint_every.filter(|n| *n > 0);

    for (idx, inst) in stream.skip(skip).enumerate() {
        let at = |e: Error| Error::AtStep { step: skip + idx + 1, source: Box::new(e) };
        let inst = inst.map_err(at)?;
        let rec = learner.step(&inst.x, inst.y, inst.a).map_err(at)?;
        if let Some(out) = trajectory.as_deref_mut() {
            writeln!(out, "{}", trajectory_row(&rec))?;
        }
        if rec.step % PROGRESS_EVERY == 0 {
            peak = peak.max(learner.state_bytes());
            if !args.quiet {
                eprintln!(
                    "step {:>7}  acc {:.4}  dp {}",
                    rec.step,
                    rec.running_accuracy,
                    rec.dp_hard.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
                );
            }
        }
        if let (Some(n), Some(dir)) = (every, checkpoint_dir) {
            if rec.step % n == 0 {
                write_atomic(&dir.join("checkpoint.json"), &learner.checkpoint_json()?)?;
            }
        }
    }
    if learner.metrics().total() == 0 {
        return Err(Error::Precondition("empty stream".into()));
    }
    let m = learner.metrics();
    let outcome = RunOutcome {
        steps: m.total(),
        accuracy: m.accuracy(),
        dp_hard: m.dp_hard(),
        dp_soft: m.dp_soft(),
        state_bytes: peak.max(learner.state_bytes()),
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok((outcome, config, baseline))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let stream = args.stream()?;
    let mut csv = BufWriter::new(File::create(args.out.join("trajectory.csv"))?);
    writeln!(csv, "{TRAJECTORY_HEADER}")?;
    let (outcome, config, baseline) = train(args, args.lambda, stream, Some(&mut csv), Some(&args.out))?;
    csv.flush()?;
    let summary = json!({
        "steps": outcome.steps,
        "final_accuracy": outcome.accuracy,
        "final_dp_hard": outcome.dp_hard,
        "final_dp_soft": outcome.dp_soft,
        "wall_time_secs": outcome.wall_time,
        "peak_state_bytes": outcome.state_bytes,
        "config": args.config_echo(&config, baseline),
    });
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn cmd_sweep(args: &RunArgs, lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    fs::create_dir_all(&args.out)?;
    let instances = args.stream()?.collect::<Result<Vec<_>>>()?;
    let mut order: Vec<f64> = lambdas.to_vec();
    order.sort_by(f64::total_cmp);
    let results: Vec<Result<RunOutcome>> = order
        .par_iter()
        .map(|lambda| {
            let stream = Box::new(instances.clone().into_iter().map(Ok));
            let mut sub = args.clone();
            sub.quiet = true;
            sub.resume = None;
            train(&sub, *lambda, stream, None, None).map(|r| r.0)
        })
        .collect();
    let mut out = BufWriter::new(File::create(args.out.join("sweep.csv"))?);
    writeln!(out, "lambda,final_accuracy,final_dp_hard,final_dp_soft")?;
    let mut first_error = None;
    for (lambda, res) in order.iter().zip(results) {
        match res {
            Ok(r) => writeln!(out, "{lambda},{},{},{}", r.accuracy, fmt_opt(r.dp_hard), fmt_opt(r.dp_soft))?,
            Err(e) => {
                eprintln!("lambda {lambda}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    out.flush()?;
    first_error.map_or(Ok(()), Err)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => writeln!(io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize, out: Option<&Path>, corrupt: bool) -> Result<()> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let results =
        (0..trials as u64).map(|k| gradcheck_trial(seed.wrapping_add(k), corrupt)).collect::<Result<Vec<_>>>()?;
    let max_error = results.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    let max_consistency = results.iter().map(|t| t.step_consistency).fold(0.0, f64::max);
    let pass = max_error <= GRADCHECK_THRESHOLD;
    let report = json!({
        "seed": seed,
        "trials": trials,
        "threshold": GRADCHECK_THRESHOLD,
        "max_relative_error": max_error,
        "max_step_consistency": max_consistency,
        "pass": pass,
        "results": results,
    });
    emit(out, &serde_json::to_string_pretty(&report)?)?;
    if !pass {
        return Err(Error::Numerical(format!(
            "max relative gradient error {max_error:e} exceeds {GRADCHECK_THRESHOLD:e}"
        )));
    }
    Ok(())
}

fn cmd_audit(steps: usize, seed: u64, lambda: f64, delta: f64, out: Option<&Path>) -> Result<()> {
    let synth = SyntheticConfig { n: steps, seed, ..SyntheticConfig::default() };
    let mut instances = generate_synthetic(&synth)?.collect::<Result<Vec<_>>>()?;
    rescale_to_bound(&mut instances, 1.0);
    let mut config = LearnerConfig::new(synth.dim, 2, lambda)?;
    config.huber = HuberParams::new(delta, lambda)?;
    config.seed = seed;
    let trace = record_trace(config, &instances)?;
    let reports = audit_estimation_error(&trace, delta, 1.0)?;
    emit(out, &reports_to_json(&reports)?)?;
    if let Some(bad) = reports.iter().find(|r| !r.pass) {
        return Err(Error::Numerical(format!(
            "{} exceeds its bound: {} > {}",
            bad.name, bad.observed, bad.theoretical
        )));
    }
    Ok(())
}

fn cmd_synth(config: &SyntheticConfig, out: &Path) -> Result<()> {
    let rows = write_csv(BufWriter::new(File::create(out)?), config.dim, generate_synthetic(config)?)?;
    eprintln!("wrote {rows} rows to {}", out.display());
    Ok(())
}

/// Expands `--config FILE` into flags placed before the user's own, so that
/// explicit flags override file values.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let pos = argv.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_owned(),
        None => argv.get(pos + 1).cloned().ok_or_else(|| Error::Config("--config needs a path".into()))?,
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let mut flags = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{path}:{}: expected key = value", lineno + 1)))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => flags.push(flag),
            "false" => {}
            v => {
                flags.push(flag);
                flags.push(v.to_owned());
            }
        }
    }
    let subcommand = argv.iter().skip(1).position(|a| !a.starts_with('-')).map_or(1, |i| i + 2);
    let mut out: Vec<String> = argv[..subcommand.min(argv.len())].to_vec();
    out.extend(flags);
    out.extend(argv[subcommand.min(argv.len())..].iter().cloned());
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep { run, lambdas } => cmd_sweep(&run, &lambdas),
        Command::Gradcheck { seed, trials, out, corrupt_gradient } => {
            cmd_gradcheck(seed, trials, out.as_deref(), corrupt_gradient)
        }
        Command::Audit { steps, seed, lambda, delta, out } => cmd_audit(steps, seed, lambda, delta, out.as_deref()),
        Command::Synth { n, bias, seed, dim, separation, group_shift, noise, out } => {
            let config = SyntheticConfig { n, dim, bias, separation, group_shift, noise, seed };
            cmd_synth(&config, &out)
        }
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
