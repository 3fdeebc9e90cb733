//! Experiment configuration, training loop, evaluation sweep and reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::checkpoint::Digest;
use super::data::{default_mnist_dir, load_mnist_dir, synth_dataset, Dataset, SynthSpec};
use crate::attacks::{adversarial_train_step, attack_stats, train_step, AttackConfig, AttackKind};
use crate::cert::{
    certify, corollary_bound, plan_parameters, spectral_cap, table_bound, CertStatus, GlobalBudget,
    LayerBudget, PlanningPolicy, QuasiDominance,
};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, LayerSpec, Model, Optimizer, OptimizerKind, DEFAULT_LEAKY_SLOPE};
use crate::par;
use crate::spectral::{apply_constraints, measure_sigmas, ProjectionMode, RegularizerConfig};

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Mnist {
        /// Defaults to `LYAPNET_MNIST_DIR` or `data/mnist` in the workspace.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        train: SynthSpec,
        test: SynthSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSweep {
    pub kinds: Vec<AttackKind>,
    /// Radii, nonnegative and ascending.
    pub eps: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha_ratio")]
    pub alpha_ratio: f64,
    #[serde(default)]
    pub clip: Option<[f32; 2]>,
}

fn default_k() -> usize {
    100
}
fn default_alpha_ratio() -> f64 {
    0.02
}

impl AttackSweep {
    pub fn config(&self, kind: AttackKind, eps: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            kind,
            eps,
            k: self.k,
            alpha_ratio: self.alpha_ratio,
            seed,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub data: DataSource,
    pub global: GlobalBudget,
    pub planning: PlanningPolicy,
    /// Chosen per-layer levels, each at most its cap. `None` uses the caps.
    #[serde(default)]
    pub reg_levels: Option<Vec<f64>>,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sweep: AttackSweep,
    /// Train on adversarial batches generated with this attack.
    #[serde(default)]
    pub adversarial_training: Option<AttackConfig>,
    pub seed: u64,
    #[serde(default)]
    pub strict_cert: bool,
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 3] = ["mnist", "ci", "residual-demo"];

fn worked_budgets() -> Vec<LayerBudget> {
    vec![
        LayerBudget::new(0.92, 0.27),
        LayerBudget::new(0.78, 0.32),
        LayerBudget::new(1.08, 0.23),
    ]
}

fn forward_net(sizes: &[usize]) -> Vec<LayerSpec> {
    sizes
        .windows(2)
        .flat_map(|w| {
            [
                LayerSpec::Dense {
                    input: w[0],
                    output: w[1],
                },
                LayerSpec::LeakyRelu {
                    slope: DEFAULT_LEAKY_SLOPE,
                },
            ]
        })
        .collect()
}

fn conv3(out_ch: usize, in_ch: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_ch,
        in_ch,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    }
}

/// Number of dense/conv layers, residual branches included.
pub fn count_linear(specs: &[LayerSpec]) -> usize {
    specs
        .iter()
        .map(|s| match s {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => 1,
            LayerSpec::Residual { branch } => count_linear(branch),
            _ => 0,
        })
        .sum()
}

impl ExperimentConfig {
    /// Built-in configurations:
    ///
    /// * `mnist`: 784-50-20-10 forward net with Leaky ReLU, Adam 0.001, 200 epochs.
    /// * `ci`: the same budgets on a 32-16-8-4 net over synthetic blobs, 5 epochs.
    /// * `residual-demo`: a toy conv net with one residual block of 8-channel convs.
    pub fn preset(name: &str) -> Result<Self> {
        let sweep = AttackSweep {
            kinds: vec![AttackKind::Fgm, AttackKind::Pgd],
            eps: vec![0.1, 0.2, 0.3],
            k: default_k(),
            alpha_ratio: default_alpha_ratio(),
            clip: None,
        };
        let base = ExperimentConfig {
            name: name.to_string(),
            input_shape: vec![784],
            layers: forward_net(&[784, 50, 20, 10]),
            data: DataSource::Mnist {
                dir: None,
                train_limit: None,
                test_limit: None,
            },
            global: GlobalBudget::new(1.0, 0.24),
            planning: PlanningPolicy::Explicit {
                budgets: worked_budgets(),
            },
            reg_levels: Some(vec![1.76, 2.46, 1.01]),
            regularizer: RegularizerConfig::default(),
            optimizer: OptimizerKind::adam(0.001),
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 128,
            sweep,
            adversarial_training: None,
            seed: 0,
            strict_cert: false,
        };
        match name {
            "mnist" => Ok(base),
            "ci" => Ok(ExperimentConfig {
                input_shape: vec![32],
                layers: forward_net(&[32, 16, 8, 4]),
                data: DataSource::Synthetic {
                    train: SynthSpec::new(4, 32, 100, 1),
                    test: SynthSpec::new(4, 32, 50, 2),
                },
                epochs: 5,
                batch_size: 32,
                // Short PGD runs keep the total travel k·α at 2ε.
                sweep: AttackSweep {
                    k: 20,
                    alpha_ratio: 0.1,
                    ..base.sweep.clone()
                },
                ..base
            }),
            "residual-demo" => Ok(ExperimentConfig {
                input_shape: vec![1, 12, 12],
                layers: vec![
                    conv3(8, 1),
                    LayerSpec::LeakyRelu {
                        slope: DEFAULT_LEAKY_SLOPE,
                    },
                    LayerSpec::Residual {
                        branch: vec![
                            conv3(8, 8),
                            LayerSpec::LeakyRelu {
                                slope: DEFAULT_LEAKY_SLOPE,
                            },
                            conv3(8, 8),
                        ],
                    },
                    LayerSpec::LeakyRelu {
                        slope: DEFAULT_LEAKY_SLOPE,
                    },
                    LayerSpec::AvgPool { window: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        input: 288,
                        output: 4,
                    },
                ],
                data: DataSource::Synthetic {
                    train: SynthSpec::new(4, 144, 50, 1),
                    test: SynthSpec::new(4, 144, 25, 2),
                },
                planning: PlanningPolicy::default(),
                reg_levels: None,
                epochs: 3,
                batch_size: 32,
                sweep: AttackSweep {
                    k: 10,
                    alpha_ratio: 0.2,
                    ..base.sweep.clone()
                },
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> Digest {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    /// Checks every invariant and derives budgets, caps and the levels the
    /// regularizer enforces.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if self.sweep.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config(format!(
                "attack radii must be nonnegative: {:?}",
                self.sweep.eps
            )));
        }
        if self.sweep.eps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "attack radii must be ascending: {:?}",
                self.sweep.eps
            )));
        }
        for kind in &self.sweep.kinds {
            self.sweep.config(*kind, 0.0, self.seed).validate()?;
        }
        if let Some(a) = &self.adversarial_training {
            a.validate()?;
        }
        let n = count_linear(&self.layers);
        let budgets = plan_parameters(n, self.global, &self.planning)?;
        let caps = budgets
            .iter()
            .map(|b| spectral_cap(*b))
            .collect::<Result<Vec<_>>>()?;
        let mut regularizer = self.regularizer.clone();
        let levels = match (regularizer.mode, regularizer.uniform_beta) {
            (ProjectionMode::Off, _) => None,
            (_, Some(b)) => Some(vec![b; n]),
            _ => Some(self.reg_levels.clone().unwrap_or_else(|| caps.clone())),
        };
        if let Some(levels) = &levels {
            if levels.len() != n {
                return Err(Error::Config(format!(
                    "{} regularization levels for {n} dense/conv layers",
                    levels.len()
                )));
            }
            for (i, (l, c)) in levels.iter().zip(&caps).enumerate() {
                if !(*l > 0.0) {
                    return Err(Error::Config(format!(
                        "regularization level {l} for layer {} is not positive",
                        i + 1
                    )));
                }
                if *l > *c {
                    return Err(Error::Config(format!(
                        "regularization level {l} for layer {} exceeds its cap {c:.4}",
                        i + 1
                    )));
                }
            }
            regularizer.per_layer_beta = levels.clone();
            regularizer.uniform_beta = None;
        }
        Ok(Resolved {
            budgets,
            caps,
            levels,
            regularizer,
        })
    }

    /// Loads train and test sets shaped for the model input.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.data {
            DataSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = dir.clone().unwrap_or_else(default_mnist_dir);
                let (train, test) = load_mnist_dir(&dir)?;
                let cut = |d: Dataset, lim: &Option<usize>| match lim {
                    Some(l) if *l < d.len() => d.slice(0..*l),
                    _ => d,
                };
                (cut(train, train_limit), cut(test, test_limit))
            }
            DataSource::Synthetic { train, test } => (synth_dataset(train)?, synth_dataset(test)?),
        };
        Ok((
            train.with_sample_shape(&self.input_shape)?,
            test.with_sample_shape(&self.input_shape)?,
        ))
    }
}

/// Quantities derived from a validated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub budgets: Vec<LayerBudget>,
    pub caps: Vec<f64>,
    /// Enforced levels; `None` when projection is off.
    pub levels: Option<Vec<f64>>,
    /// Regularizer with per-layer levels filled in.
    pub regularizer: RegularizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Re-estimated `σ_max` per dense/conv layer at the end of the epoch.
    pub sigmas: Vec<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

/// Trains from the configured seed. Deterministic for a given config and
/// dataset. `on_epoch` sees each epoch's log as it completes.
pub fn train(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.input_shape.clone(), &cfg.layers, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay)?;
    let reg = &resolved.regularizer;
    if reg.mode == ProjectionMode::Projection {
        apply_constraints(&mut model, reg, &mut rng)?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk);
            let loss = match &cfg.adversarial_training {
                Some(a) => adversarial_train_step(&mut model, &x, &y, a, &mut opt, reg, &mut rng)?,
                None => train_step(&mut model, &x, &y, &mut opt, reg, &mut rng)?,
            };
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let sigmas = if reg.mode == ProjectionMode::Projection {
            apply_constraints(&mut model, reg, &mut rng)?
                .into_iter()
                .map(|s| s.sigma_after)
                .collect()
        } else {
            measure_sigmas(&mut model, reg.cert_power_iters, &mut rng)?
        };
        let entry = EpochLog {
            epoch,
            mean_loss: if seen > 0 { total / seen as f64 } else { 0.0 },
            sigmas,
            seconds: t.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fraction of samples classified correctly without attack.
pub fn clean_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    let counts = par::map_shards(data.len(), 1024, |r| {
        let out = model.predict(&data.x.slice_rows(r.start, r.end))?;
        Ok(argmax_rows(&out)
            .iter()
            .zip(&data.y[r])
            .filter(|(p, y)| p == y)
            .count())
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Mean over the dataset of `‖model(x_adv) − model(x)‖₂`, with `x_adv`
/// generated against `model` itself.
pub fn measure_deviation(
    model: &Model,
    data: &Dataset,
    cfg: &AttackConfig,
    eps: f64,
) -> Result<f64> {
    Ok(attack_stats(model, &data.x, &data.y, &cfg.with_eps(eps))?.mean_deviation())
}

/// One line of the bound-verification sweep. Field order is the CSV
/// column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub eps: f64,
    pub robust_accuracy: f64,
    pub mean_deviation: f64,
    pub corollary_bound: f64,
    pub table_bound: f64,
    pub table_bound_satisfied: bool,
    pub corollary_bound_satisfied: bool,
}

impl SweepRow {
    pub fn new(
        attack: AttackKind,
        eps: f64,
        robust_accuracy: f64,
        mean_deviation: f64,
        g: GlobalBudget,
    ) -> Result<Self> {
        let corollary = corollary_bound(g, eps)?;
        let table = table_bound(g, eps)?;
        Ok(Self {
            attack: attack.name().to_string(),
            eps,
            robust_accuracy,
            mean_deviation,
            corollary_bound: corollary,
            table_bound: table,
            table_bound_satisfied: mean_deviation <= table,
            corollary_bound_satisfied: mean_deviation <= corollary,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub status: CertStatus,
    pub strict: bool,
    pub quasi_dominance: QuasiDominance,
    pub violations: Vec<String>,
    pub budgets: Vec<LayerBudget>,
    pub caps: Vec<Option<f64>>,
    pub bound_coefficient: Option<f64>,
    /// Rows of `-A`.
    pub neg_matrix: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

pub fn cert_summary(budgets: &[LayerBudget], g: GlobalBudget, strict: bool) -> Result<CertSummary> {
    let c = certify(budgets, g, strict)?;
    Ok(CertSummary {
        status: c.status,
        strict,
        neg_matrix: c.neg_matrix_rows(),
        quasi_dominance: c.quasi_dominance,
        violations: c
            .planning_violations
            .iter()
            .map(|v| v.to_string())
            .collect(),
        budgets: c.budgets,
        caps: c.caps,
        bound_coefficient: c.bound_coefficient,
        notes: c.notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub sigma: f64,
    pub cap: f64,
    pub level: Option<f64>,
    /// Largest admissible `σ_max` under the configured semantics.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub threads: usize,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub resolved: Resolved,
    pub seed: u64,
    pub semantics: String,
    pub clean_accuracy: f64,
    pub sweep: Vec<SweepRow>,
    pub certificate: CertSummary,
    pub layers: Vec<LayerReport>,
    pub runtime: RuntimeInfo,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_sweep_csv(&self.sweep, w)
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    out.flush()?;
    Ok(())
}

/// Per-layer `σ_max` estimates; the model's stored power vectors warm-start them.
pub fn layer_reports(
    model: &Model,
    cfg: &ExperimentConfig,
    resolved: &Resolved,
) -> Result<Vec<LayerReport>> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let sigmas = measure_sigmas(&mut m, resolved.regularizer.cert_power_iters, &mut rng)?;
    let sem = resolved.regularizer.semantics;
    Ok(sigmas
        .into_iter()
        .enumerate()
        .map(|(i, sigma)| {
            let level = resolved.levels.as_ref().map(|l| l[i]);
            LayerReport {
                layer: i + 1,
                sigma,
                cap: resolved.caps[i],
                level,
                threshold: level.map(|l| sem.threshold(l)),
            }
        })
        .collect())
}

/// Runs the attack sweep and assembles the report.
pub fn evaluate(
    model: &Model,
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    test: &Dataset,
    train_seconds: f64,
) -> Result<ExperimentReport> {
    let t = Instant::now();
    let clean = clean_accuracy(model, test)?;
    let mut sweep = Vec::new();
    for &kind in &cfg.sweep.kinds {
        for &eps in &cfg.sweep.eps {
            let stats = attack_stats(
                model,
                &test.x,
                &test.y,
                &cfg.sweep.config(kind, eps, cfg.seed),
            )?;
            sweep.push(SweepRow::new(
                kind,
                eps,
                stats.accuracy(),
                stats.mean_deviation(),
                cfg.global,
            )?);
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        resolved: resolved.clone(),
        seed: cfg.seed,
        semantics: resolved.regularizer.semantics.name().to_string(),
        clean_accuracy: clean,
        sweep,
        certificate: cert_summary(&resolved.budgets, cfg.global, cfg.strict_cert)?,
        layers: layer_reports(model, cfg, resolved)?,
        runtime: RuntimeInfo {
            train_seconds,
            eval_seconds: t.elapsed().as_secs_f64(),
            threads: par::worker_count(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}
