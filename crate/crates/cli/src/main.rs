use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dba_core::data::{compute_label_stats, DatasetRole};
use dba_core::estimators::{
    DiffDistEstimator, EstimatorConfig, KnownSEstimator, Regime, SameDistEstimator,
};
use dba_core::eval::{
    accuracy_metrics, misspecification_study, run_experiment, train_method, write_report,
    AssertExpr, ExperimentConfig, Method, MethodSettings,
};
use dba_core::io::{read_dataset, read_json, write_column, write_dataset, write_json};
use dba_core::oracle::{
    check_is_identity, check_randomized, check_theorem1, check_theorem2, check_theorem3,
    AugmentationSpec, CheckKind, CheckReport,
};
use dba_core::synthgen::{DiscreteGenSpec, GenSpec};
use dba_core::trainer::SoftmaxModel;
use dba_core::weights::BracketForm;
use dba_core::DbaError;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  I/O error while reading or writing files
  2  configuration error (bad flags, missing input file, malformed config)
  3  a check or assertion failed

Environment:
  DBA_THREADS  maximum worker threads (default: all cores, 1 = serial)";

#[derive(Parser)]
#[command(name = "dba", version, about = "Importance-weighted training under subpopulation shift", after_help = AFTER_HELP)]
struct Cli {
    /// Seed for generation, estimation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress diagnostics on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Train,
    Val,
    Test,
}

impl From<RoleArg> for DatasetRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Train => DatasetRole::Train,
            RoleArg::Val => DatasetRole::Val,
            RoleArg::Test => DatasetRole::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Known,
    Same,
    Diff,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Theorem1,
    Theorem2,
    Theorem3,
    IsIdentity,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Corrected,
    Maintext,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a generator spec (discrete or Gaussian).
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        role: RoleArg,
    },
    /// Estimate the spurious posterior rho for every training sample.
    Estimate {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Estimator settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one method and write the selected model.
    Train {
        #[arg(long)]
        method: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Method settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        p_m0: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Also write the training weights as a `g` column.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Accuracy metrics of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify closed-form weights against exact enumeration.
    Oracle {
        #[arg(long, value_enum)]
        check: CheckArg,
        /// Spec file; theorem3 expects a two-group augmentation spec.
        #[arg(long, conflicts_with = "random")]
        spec: Option<PathBuf>,
        /// Validation-law spec for is-identity (defaults to the training law).
        #[arg(long)]
        val_spec: Option<PathBuf>,
        /// Number of random specs to check.
        #[arg(long, alias = "trials")]
        random: Option<usize>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, value_enum, default_value = "corrected")]
        variant: VariantArg,
    },
    /// Multi-seed experiment; writes summary.csv, runs.json and plotdata.csv.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Run the class-imbalance study (ERM, reweight, known-attribute DBCM) instead.
        #[arg(long)]
        misspecification: bool,
        /// Required average-accuracy gap between ERM and reweighting in the study.
        #[arg(long, default_value_t = 0.01)]
        margin: f64,
        /// Write 0 instead of wall time so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
}

enum Failure {
    Io(String),
    Config(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Check(m) => m,
        }
    }
}

impl From<DbaError> for Failure {
    fn from(e: DbaError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Config("--out is required".into()))
    }
}

fn require(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{}: no such file", path.display())))
    }
}

fn load_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    require(path)?;
    read_json(path).map_err(|e| match e {
        DbaError::Io(e) => Failure::Io(format!("{}: {e}", path.display())),
        e => Failure::Config(format!("{}: {e}", path.display())),
    })
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json values serialize")
    );
}

fn cmd_gen(ctx: &Ctx, spec: &Path, n: usize, role: RoleArg) -> CmdResult {
    let out = ctx.out()?;
    let mut spec: GenSpec = load_json(spec)?;
    if let Some(seed) = ctx.seed {
        spec = spec.with_seed(seed);
    }
    spec.validate()?;
    if n == 0 {
        return Err(Failure::Config("--n must be at least 1".into()));
    }
    let data = spec.generate(n, role.into())?;
    write_dataset(&data, out)?;
    ctx.note(format!("wrote {n} samples to {}", out.display()));
    print_json(&json!({"n": n, "role": data.role(), "seed": data.seed(), "path": out}));
    Ok(())
}

fn cmd_estimate(
    ctx: &Ctx,
    regime: RegimeArg,
    train: &Path,
    val: Option<&Path>,
    tau: Option<f64>,
    config: Option<&Path>,
) -> CmdResult {
    let out = ctx.out()?;
    require(train)?;
    if let Some(v) = val {
        require(v)?;
    }
    let mut cfg: EstimatorConfig = match config {
        Some(p) => load_json(p)?,
        None => EstimatorConfig::default(),
    };
    cfg.regime = match regime {
        RegimeArg::Known => Regime::Known,
        RegimeArg::Same => Regime::Same,
        RegimeArg::Diff => Regime::Diff,
    };
    if let Some(t) = tau {
        cfg.tau = t;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let train = read_dataset(train)?;
    let rho = match cfg.regime {
        Regime::Known => KnownSEstimator::fit(&train, &cfg)?.rho(&train)?,
        Regime::Same => {
            let val =
                val.ok_or_else(|| Failure::Config("--val is required for the same regime".into()))?;
            SameDistEstimator::fit(&train, &read_dataset(val)?, &cfg)?.rho(&train)?
        }
        Regime::Diff => DiffDistEstimator::fit(&train, &cfg)?.rho(&train)?,
    };
    write_column(rho.values(), "rho", out)?;
    print_json(&json!({"n": rho.len(), "regime": cfg.regime, "tau": cfg.tau, "path": out}));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Ctx,
    method: &str,
    train: &Path,
    val: Option<&Path>,
    config: Option<&Path>,
    p_m0: Option<f64>,
    tau: Option<f64>,
    weights_out: Option<&Path>,
) -> CmdResult {
    let out = ctx.out()?;
    let method: Method = method.parse()?;
    require(train)?;
    if let Some(v) = val {
        require(v)?;
    }
    let mut settings: MethodSettings = match config {
        Some(p) => load_json(p)?,
        None => MethodSettings::default(),
    };
    if p_m0.is_some() {
        settings.p_m0 = p_m0;
    }
    if let Some(t) = tau {
        settings.tau = t;
    }
    settings.validate()?;
    let train = read_dataset(train)?;
    let val = val.map(read_dataset).transpose()?;
    let trained = train_method(
        method,
        &train,
        val.as_ref(),
        &settings,
        ctx.seed.unwrap_or(0),
    )?;
    write_json(&trained.model, out)?;
    if let Some(path) = weights_out {
        let ones;
        let values = match &trained.weights {
            Some(w) => w.values(),
            None => {
                ones = vec![1.0; train.len()];
                &ones
            }
        };
        write_column(values, "g", path)?;
    }
    if method == Method::DbcmKnown && !ctx.quiet {
        let stats = compute_label_stats(&train, settings.p_m0(), settings.tau)?;
        ctx.note(format!(
            "class prior {:?}, p_m0 {}",
            stats.p_y(),
            stats.p_m0()
        ));
    }
    print_json(&json!({"method": method, "selected_epoch": trained.selected_epoch, "path": out}));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, model: &Path, data: &Path) -> CmdResult {
    let model: SoftmaxModel = load_json(model)?;
    model.validate()?;
    require(data)?;
    let data = read_dataset(data)?;
    let metrics = accuracy_metrics(&model, &data)?;
    if metrics.class_only {
        ctx.note("warning: attributes unknown; groups are classes only");
    }
    match &ctx.out {
        Some(out) => write_json(&metrics, out)?,
        None => print_json(&serde_json::to_value(&metrics).expect("metrics serialize")),
    }
    Ok(())
}

fn cmd_oracle(
    ctx: &Ctx,
    check: CheckArg,
    spec: Option<&Path>,
    val_spec: Option<&Path>,
    random: Option<usize>,
    tol: f64,
    variant: VariantArg,
) -> CmdResult {
    if !(tol >= 0.0) {
        return Err(Failure::Config("--tol must be nonnegative".into()));
    }
    let form = match variant {
        VariantArg::Corrected => BracketForm::Corrected,
        VariantArg::Maintext => BracketForm::MainText,
    };
    let seed = ctx.seed.unwrap_or(0);
    let report: CheckReport = match (spec, random) {
        (Some(path), _) => match check {
            CheckArg::Theorem3 => {
                let spec: AugmentationSpec = load_json(path)?;
                check_theorem3(&spec, tol)?
            }
            _ => {
                let spec: DiscreteGenSpec = load_json(path)?;
                match check {
                    CheckArg::Theorem1 => check_theorem1(&spec, tol, form)?,
                    CheckArg::Theorem2 => check_theorem2(&spec, tol)?,
                    _ => {
                        let val: DiscreteGenSpec = match val_spec {
                            Some(p) => load_json(p)?,
                            None => spec.clone(),
                        };
                        check_is_identity(&spec, &val, 100, seed, tol)?
                    }
                }
            }
        },
        (None, Some(trials)) => {
            let kind = match check {
                CheckArg::Theorem1 => CheckKind::Theorem1,
                CheckArg::Theorem2 => CheckKind::Theorem2,
                CheckArg::Theorem3 => CheckKind::Theorem3,
                CheckArg::IsIdentity => CheckKind::IsIdentity,
            };
            check_randomized(kind, trials, seed, tol, form)?
        }
        (None, None) => return Err(Failure::Config("give --spec or --random N".into())),
    };
    let value = serde_json::to_value(&report).expect("report serializes");
    if let Some(out) = &ctx.out {
        write_json(&report, out)?;
    }
    print_json(&value);
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} check failed (max error {:e})",
            report.check, report.max_rel_err
        )))
    }
}

fn cmd_experiment(
    ctx: &Ctx,
    config: &Path,
    misspecification: bool,
    margin: f64,
    no_timing: bool,
) -> CmdResult {
    let dir = ctx.out()?.to_path_buf();
    let mut cfg: ExperimentConfig = load_json(config)?;
    if no_timing {
        cfg.timing = false;
    }
    if let Some(seed) = ctx.seed {
        cfg.seeds = (0..cfg.seeds.len() as u64)
            .map(|i| seed.wrapping_add(i))
            .collect();
    }
    let asserts = cfg
        .asserts
        .iter()
        .map(|a| AssertExpr::parse(a))
        .collect::<Result<Vec<_>, _>>()?;
    cfg.validate()?;

    if misspecification {
        let report = misspecification_study(&cfg, margin)?;
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        write_json(&report, &dir.join("misspecification.json"))?;
        for row in [&report.erm, &report.reweight, &report.dbcm] {
            ctx.note(format!(
                "{:<12} avg {:.4} worst {:.4}",
                row.method, row.avg_mean, row.worst_mean
            ));
        }
        print_json(&json!({
            "reweight_below_erm": report.reweight_below_erm,
            "dbcm_at_least_erm": report.dbcm_at_least_erm,
            "pass": report.pass(),
        }));
        return if report.pass() {
            Ok(())
        } else {
            Err(Failure::Check("misspecification ordering failed".into()))
        };
    }

    let report = run_experiment(&cfg)?;
    write_report(&report, &dir)?;
    for row in &report.summary {
        ctx.note(format!(
            "{:<14} avg {:.4} ± {:.4}  worst {:.4} ± {:.4}",
            row.method, row.avg_mean, row.avg_std, row.worst_mean, row.worst_std
        ));
    }
    let mut failed = Vec::new();
    let mut results = Vec::new();
    for a in &asserts {
        let ok = a.evaluate(&report.summary)?;
        results.push(json!({"assert": a.source(), "pass": ok}));
        if !ok {
            failed.push(a.source().to_string());
        }
    }
    print_json(&json!({"rows": report.summary.len(), "out": dir, "asserts": results}));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "assertion failed: {}",
            failed.join("; ")
        )))
    }
}

fn configure_threads() -> CmdResult {
    if let Ok(v) = std::env::var("DBA_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            Failure::Config(format!("DBA_THREADS must be a positive integer, got `{v}`"))
        })?;
        if n == 0 {
            return Err(Failure::Config("DBA_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Gen { spec, n, role } => cmd_gen(&ctx, &spec, n, role),
        Command::Estimate {
            regime,
            train,
            val,
            tau,
            config,
        } => cmd_estimate(&ctx, regime, &train, val.as_deref(), tau, config.as_deref()),
        Command::Train {
            method,
            train,
            val,
            config,
            p_m0,
            tau,
            weights_out,
        } => cmd_train(
            &ctx,
            &method,
            &train,
            val.as_deref(),
            config.as_deref(),
            p_m0,
            tau,
            weights_out.as_deref(),
        ),
        Command::Eval { model, data } => cmd_eval(&ctx, &model, &data),
        Command::Oracle {
            check,
            spec,
            val_spec,
            random,
            tol,
            variant,
        } => cmd_oracle(
            &ctx,
            check,
            spec.as_deref(),
            val_spec.as_deref(),
            random,
            tol,
            variant,
        ),
        Command::Experiment {
            config,
            misspecification,
            margin,
            no_timing,
        } => cmd_experiment(&ctx, &config, misspecification, margin, no_timing),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
