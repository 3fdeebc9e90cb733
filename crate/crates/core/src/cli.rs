//! Command-line surface. [`run`] is the whole program minus process exit.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{attack_stats, AttackKind};
use crate::cert::{
    certify, corollary_bound, plan_parameters, spectral_cap, table_bound, CertStatus, GlobalBudget,
    LayerBudget, PlanningPolicy, QuasiDominance,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::experiment::{clean_accuracy, evaluate, train, ExperimentConfig};
use crate::linalg::{power_iteration, spectral_norm_exact, EXACT_MAX_SIDE};
use crate::spectral::Semantics;

#[derive(Parser, Debug)]
#[command(
    name = "lyapnet",
    version,
    about = "Lyapunov-budgeted training, certification and attack verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan per-layer budgets for a global budget and print their caps.
    Plan(PlanArgs),
    /// Build the cascade certificate for a set of budgets.
    Check(CheckArgs),
    /// Train a model and write a checkpoint and training log.
    Train(TrainArgs),
    /// Robust accuracy of a checkpoint under an attack sweep.
    Attack(EvalArgs),
    /// Compare measured output deviations with both bounds.
    VerifyBound(EvalArgs),
    /// Per-layer spectral norms of a checkpoint.
    Spectral(SpectralArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigSource {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in configuration: mnist, ci or residual-demo.
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<Option<ExperimentConfig>> {
        match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p).map(Some),
            (None, Some(n)) => ExperimentConfig::preset(n).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SemanticsArg {
    Sigma,
    Sigma2,
}

impl From<SemanticsArg> for Semantics {
    fn from(s: SemanticsArg) -> Self {
        match s {
            SemanticsArg::Sigma => Semantics::Sigma,
            SemanticsArg::Sigma2 => Semantics::SigmaSquared,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    Fgm,
    Pgd,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Fgm => AttackKind::Fgm,
            AttackArg::Pgd => AttackKind::Pgd,
        }
    }
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Global budget as `delta,nu`.
    #[arg(long, value_name = "D,N")]
    global: Option<String>,
    /// Number of dense/conv layers.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Explicit budgets `d1,n1;d2,n2;...` to validate instead of planning.
    #[arg(long, value_name = "LIST")]
    budgets: Option<String>,
    #[arg(long)]
    margin_out: Option<f64>,
    #[arg(long)]
    margin_in: Option<f64>,
    #[arg(long)]
    slack: Option<f64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Per-layer budgets `d1,n1;d2,n2;...`.
    #[arg(long, value_name = "LIST")]
    budgets: Option<String>,
    /// Global budget as `delta,nu`.
    #[arg(long, value_name = "D,N")]
    global: Option<String>,
    /// Attack radii at which to print both bounds.
    #[arg(long, value_name = "LIST")]
    eps: Option<String>,
    /// Also require quasi-dominance of the cascade matrix.
    #[arg(long)]
    strict_cert: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "lyapnet-out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    semantics: Option<SemanticsArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    strict_cert: bool,
    /// Run the configured attack sweep after training.
    #[arg(long)]
    evaluate: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint written by `train`. Its directory's config.json is used
    /// when no configuration is given.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "LIST")]
    eps: Option<String>,
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    /// PGD iterations.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strict_cert: bool,
    /// Evaluate on the first N test samples only.
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpectralArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Power iterations per layer.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err(Error::Config(format!(
            "{what} must be `delta,nu`, got {s:?}"
        )));
    };
    let num = |t: &str| {
        t.parse::<f64>()
            .map_err(|_| Error::Config(format!("{what}: {t:?} is not a number")))
    };
    Ok((num(a)?, num(b)?))
}

fn parse_global(s: &str) -> Result<GlobalBudget> {
    let (d, n) = parse_pair(s, "--global")?;
    Ok(GlobalBudget::new(d, n))
}

fn parse_budgets(s: &str) -> Result<Vec<LayerBudget>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_pair(p, "--budgets").map(|(d, n)| LayerBudget::new(d, n)))
        .collect()
}

fn parse_eps(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("--eps: {t:?} is not a number")))
        })
        .collect()
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn save_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct PlanReport {
    global: GlobalBudget,
    gain: f64,
    budgets: Vec<LayerBudget>,
    caps: Vec<f64>,
}

fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.source.load()?;
    let global = match (&a.global, &cfg) {
        (Some(g), _) => parse_global(g)?,
        (None, Some(c)) => c.global,
        _ => {
            return Err(Error::Config(
                "plan needs --global or a configuration".into(),
            ))
        }
    };
    let policy = match (&a.budgets, &cfg) {
        (Some(b), _) => PlanningPolicy::Explicit {
            budgets: parse_budgets(b)?,
        },
        (None, Some(c)) if a.margin_out.is_none() && a.margin_in.is_none() && a.slack.is_none() => {
            c.planning.clone()
        }
        _ => {
            let PlanningPolicy::Default {
                margin_out,
                margin_in,
                slack,
            } = PlanningPolicy::default()
            else {
                unreachable!("default policy")
            };
            PlanningPolicy::Default {
                margin_out: a.margin_out.unwrap_or(margin_out),
                margin_in: a.margin_in.unwrap_or(margin_in),
                slack: a.slack.unwrap_or(slack),
            }
        }
    };
    let n = match (&policy, &cfg) {
        (PlanningPolicy::Explicit { budgets }, _) => budgets.len(),
        (_, Some(c)) => crate::harness::experiment::count_linear(&c.layers),
        _ => a.layers,
    };
    let budgets = plan_parameters(n, global, &policy)?;
    let caps = budgets
        .iter()
        .map(|b| spectral_cap(*b))
        .collect::<Result<Vec<_>>>()?;
    let report = PlanReport {
        global,
        gain: global.gain(),
        budgets,
        caps,
    };
    if let Some(dir) = &a.out {
        save_json(dir, "plan.json", &report)?;
    }
    write_json(out, &report)?;
    Ok(0)
}

#[derive(Serialize)]
struct BoundPair {
    eps: f64,
    corollary_bound: f64,
    table_bound: f64,
}

#[derive(Serialize)]
struct CheckReport {
    status: CertStatus,
    strict: bool,
    global: GlobalBudget,
    gain: f64,
    budgets: Vec<LayerBudget>,
    caps: Vec<Option<f64>>,
    /// Rows of `-A`.
    neg_matrix: Vec<Vec<f64>>,
    neg_matrix_frobenius: f64,
    neg_matrix_spectral: f64,
    quasi_dominance: QuasiDominance,
    violations: Vec<String>,
    bound_coefficient: Option<f64>,
    bounds: Vec<BoundPair>,
    notes: Vec<String>,
}

fn cmd_check(a: &CheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = a.source.load()?;
    let global = match (&a.global, &cfg) {
        (Some(g), _) => parse_global(g)?,
        (None, Some(c)) => c.global,
        _ => {
            return Err(Error::Config(
                "check needs --global or a configuration".into(),
            ))
        }
    };
    let budgets = match (&a.budgets, &cfg) {
        (Some(b), _) => parse_budgets(b)?,
        (None, Some(c)) => plan_parameters(
            crate::harness::experiment::count_linear(&c.layers),
            global,
            &c.planning,
        )?,
        _ => {
            return Err(Error::Config(
                "check needs --budgets or a configuration".into(),
            ))
        }
    };
    let eps = match (&a.eps, &cfg) {
        (Some(e), _) => parse_eps(e)?,
        (None, Some(c)) => c.sweep.eps.clone(),
        _ => vec![0.1, 0.2, 0.3],
    };
    let strict = a.strict_cert || cfg.as_ref().is_some_and(|c| c.strict_cert);
    let cert = certify(&budgets, global, strict)?;
    let neg = cert.neg_matrix();
    let bounds = if cert.bound_coefficient.is_some() {
        eps.iter()
            .map(|&e| {
                Ok(BoundPair {
                    eps: e,
                    corollary_bound: corollary_bound(global, e)?,
                    table_bound: table_bound(global, e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let report = CheckReport {
        status: cert.status,
        strict,
        global,
        gain: global.gain(),
        caps: cert.caps.clone(),
        neg_matrix_frobenius: neg.norm(),
        neg_matrix_spectral: spectral_norm_exact(&neg)?,
        neg_matrix: cert.neg_matrix_rows(),
        quasi_dominance: cert.quasi_dominance.clone(),
        violations: cert
            .planning_violations
            .iter()
            .map(|v| v.to_string())
            .collect(),
        bound_coefficient: cert.bound_coefficient,
        bounds,
        notes: cert.notes.clone(),
        budgets,
    };
    if let Some(dir) = &a.out {
        save_json(dir, "certificate.json", &report)?;
    }
    write_json(out, &report)?;
    if cert.passed() {
        Ok(0)
    } else {
        for v in &report.violations {
            writeln!(err, "violation: {v}")?;
        }
        if report.violations.is_empty() {
            for n in &report.notes {
                writeln!(err, "{n}")?;
            }
        }
        Ok(1)
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut cfg = a
        .source
        .load()?
        .ok_or_else(|| Error::Config("train needs --config or --preset".into()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.semantics {
        cfg.regularizer.semantics = s.into();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.strict_cert |= a.strict_cert;
    let resolved = cfg.resolve()?;
    let (train_set, test_set) = cfg.load_data()?;
    writeln!(
        err,
        "training {} on {} samples, {} epochs, semantics {}",
        cfg.name,
        train_set.len(),
        cfg.epochs,
        resolved.regularizer.semantics.name()
    )?;
    let outcome = train(&cfg, &resolved, &train_set, |e| {
        let _ = writeln!(
            err,
            "epoch {:>3}  loss {:.4}  sigma {:?}  {:.1}s",
            e.epoch, e.mean_loss, e.sigmas, e.seconds
        );
    })?;
    fs::create_dir_all(&a.out)?;
    let digest = cfg.digest();
    checkpoint::save(&a.out.join("model.lyap"), &outcome.model, &digest)?;
    fs::write(a.out.join("config.json"), cfg.to_json() + "\n")?;
    save_json(&a.out, "train_log.json", &outcome.log)?;
    if a.evaluate {
        let report = evaluate(&outcome.model, &cfg, &resolved, &test_set, outcome.seconds)?;
        fs::write(a.out.join("report.json"), report.to_json() + "\n")?;
        report.write_csv(fs::File::create(a.out.join("sweep.csv"))?)?;
        write_json(out, &report)?;
    } else {
        #[derive(Serialize)]
        struct Summary<'a> {
            checkpoint: PathBuf,
            digest: String,
            clean_accuracy: f64,
            seconds: f64,
            log: &'a [crate::harness::experiment::EpochLog],
        }
        write_json(
            out,
            &Summary {
                checkpoint: a.out.join("model.lyap"),
                digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
                clean_accuracy: clean_accuracy(&outcome.model, &test_set)?,
                seconds: outcome.seconds,
                log: &outcome.log,
            },
        )?;
    }
    Ok(0)
}

/// Loads the checkpoint and the configuration it was trained with, then
/// applies command-line overrides.
fn load_for_eval(a: &EvalArgs) -> Result<(crate::nn::Model, ExperimentConfig)> {
    let (model, digest) = checkpoint::load(&a.checkpoint)?;
    let mut cfg = match a.source.load()? {
        Some(c) => c,
        None => {
            let p = a
                .checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("config.json");
            ExperimentConfig::load(&p).map_err(|e| {
                Error::Config(format!(
                    "no configuration given and {} unusable: {e}",
                    p.display()
                ))
            })?
        }
    };
    if cfg.digest() != digest {
        return Err(Error::Config(
            "checkpoint was trained with a different configuration (digest mismatch)".into(),
        ));
    }
    if let Some(e) = &a.eps {
        cfg.sweep.eps = parse_eps(e)?;
    }
    if let Some(k) = a.attack {
        cfg.sweep.kinds = vec![k.into()];
    }
    if let Some(k) = a.k {
        cfg.sweep.k = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.strict_cert |= a.strict_cert;
    if let Some(l) = a.test_limit {
        if let crate::harness::experiment::DataSource::Mnist { test_limit, .. } = &mut cfg.data {
            *test_limit = Some(l);
        }
    }
    Ok((model, cfg))
}

fn cmd_attack(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, cfg) = load_for_eval(a)?;
    cfg.resolve()?;
    let (_, mut test) = cfg.load_data()?;
    if let Some(l) = a.test_limit {
        test = test.slice(0..l.min(test.len()));
    }
    #[derive(Serialize)]
    struct Row {
        attack: String,
        eps: f64,
        robust_accuracy: f64,
    }
    let mut rows = Vec::new();
    for &kind in &cfg.sweep.kinds {
        for &eps in &cfg.sweep.eps {
            let s = attack_stats(
                &model,
                &test.x,
                &test.y,
                &cfg.sweep.config(kind, eps, cfg.seed),
            )?;
            rows.push(Row {
                attack: kind.name().into(),
                eps,
                robust_accuracy: s.accuracy(),
            });
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut w =
            csv::Writer::from_path(dir.join("attack.csv")).map_err(|e| Error::Io(e.into()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
    }
    write_json(out, &rows)?;
    Ok(0)
}

fn cmd_verify(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let (model, cfg) = load_for_eval(a)?;
    let resolved = cfg.resolve()?;
    let (_, mut test) = cfg.load_data()?;
    if let Some(l) = a.test_limit {
        test = test.slice(0..l.min(test.len()));
    }
    let report = evaluate(&model, &cfg, &resolved, &test, 0.0)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
        report.write_csv(fs::File::create(dir.join("sweep.csv"))?)?;
    }
    for r in &report.sweep {
        writeln!(
            err,
            "{:<4} eps {:<5} deviation {:.4}  table bound {:.4} [{}]  corollary bound {:.4} [{}]",
            r.attack,
            r.eps,
            r.mean_deviation,
            r.table_bound,
            if r.table_bound_satisfied {
                "ok"
            } else {
                "exceeded"
            },
            r.corollary_bound,
            if r.corollary_bound_satisfied {
                "ok"
            } else {
                "exceeded"
            },
        )?;
    }
    write_json(out, &report)?;
    Ok(0)
}

#[derive(Serialize)]
struct SpectralRow {
    layer: usize,
    shape: Vec<usize>,
    sigma_estimate: f64,
    sigma_exact: Option<f64>,
}

fn cmd_spectral(a: &SpectralArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::new();
    for (i, l) in model.linears().into_iter().enumerate() {
        let op = l.operator();
        let (sigma, _) = power_iteration(op.as_ref(), a.iters, 1e-12, None, &mut rng)?;
        let exact = if op.in_len() <= EXACT_MAX_SIDE && op.out_len() <= EXACT_MAX_SIDE {
            Some(spectral_norm_exact(&l.materialize()?)?)
        } else {
            None
        };
        rows.push(SpectralRow {
            layer: i + 1,
            shape: l.weight().shape().to_vec(),
            sigma_estimate: sigma,
            sigma_exact: exact,
        });
    }
    if let Some(dir) = &a.out {
        save_json(dir, "spectral.json", &rows)?;
    }
    write_json(out, &rows)?;
    Ok(0)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 1 on a configuration or runtime
/// error, 2 on a usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return 0;
                }
                _ => 2,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a, out),
        Command::Check(a) => cmd_check(a, out, err),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Attack(a) => cmd_attack(a, out),
        Command::VerifyBound(a) => cmd_verify(a, out, err),
        Command::Spectral(a) => cmd_spectral(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
