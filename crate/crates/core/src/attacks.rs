//! ℓ2 gradient attacks (FGM, PGD) and adversarial training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, cross_entropy, cross_entropy_per_sample, Model, Optimizer};
use crate::par;
use crate::spectral::{apply_constraints_step, RegularizerConfig};
use crate::tensor::{norm, Tensor};

/// Samples per shard when an attack fans out over threads.
pub const SHARD: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgm,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgm => "fgm",
            AttackKind::Pgd => "pgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ2 radius.
    pub eps: f64,
    /// PGD iterations.
    #[serde(default = "default_k")]
    pub k: usize,
    /// PGD step size as a fraction of `eps`.
    #[serde(default = "default_alpha_ratio")]
    pub alpha_ratio: f64,
    /// Recorded for reproducibility; both attacks are deterministic.
    #[serde(default)]
    pub seed: u64,
    /// Optional `[lo, hi]` box every adversarial pixel is clipped to.
    #[serde(default)]
    pub clip: Option<[f32; 2]>,
}

fn default_k() -> usize {
    100
}
fn default_alpha_ratio() -> f64 {
    0.02
}

impl AttackConfig {
    pub fn fgm(eps: f64) -> Self {
        Self {
            kind: AttackKind::Fgm,
            eps,
            k: default_k(),
            alpha_ratio: default_alpha_ratio(),
            seed: 0,
            clip: None,
        }
    }

    pub fn pgd(eps: f64) -> Self {
        Self {
            kind: AttackKind::Pgd,
            ..Self::fgm(eps)
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self {
            eps,
            ..self.clone()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_ratio * self.eps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "attack radius must be ≥ 0, got {}",
                self.eps
            )));
        }
        if self.kind == AttackKind::Pgd && self.k == 0 {
            return Err(Error::Config("PGD needs at least one iteration".into()));
        }
        if !(self.alpha_ratio > 0.0) || !self.alpha_ratio.is_finite() {
            return Err(Error::Config(format!(
                "step ratio must be positive, got {}",
                self.alpha_ratio
            )));
        }
        if let Some([lo, hi]) = self.clip {
            if !(lo <= hi) {
                return Err(Error::Config(format!("clip box [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Shrinks `delta` onto the closed ℓ2 ball of radius `eps`; returns the
/// factor applied (`1.0` when already inside).
pub fn project_l2_ball(delta: &mut [f64], eps: f64) -> f64 {
    let n = norm(delta);
    if n <= eps {
        return 1.0;
    }
    let f = eps / n;
    delta.iter_mut().for_each(|d| *d *= f);
    f
}

/// Per-sample loss and gradient of each sample's own loss w.r.t. its input.
pub fn input_gradient(model: &Model, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let (logits, cache) = model.forward(x)?;
    let (losses, g) = cross_entropy_per_sample(&logits, y)?;
    let grads = model.backward(&cache, &g, false)?;
    Ok((losses, grads.input))
}

/// Writes `x + delta` in `f32`, clipped to the box if one is set, so that
/// the stored perturbation stays inside the ball despite rounding.
fn commit(x: &[f32], delta: &mut [f64], eps: f64, clip: Option<[f32; 2]>, out: &mut [f32]) {
    for _ in 0..4 {
        for ((o, &xi), &d) in out.iter_mut().zip(x).zip(delta.iter()) {
            let mut v = (xi as f64 + d) as f32;
            if let Some([lo, hi]) = clip {
                v = v.clamp(lo, hi);
            }
            *o = v;
        }
        let actual = out
            .iter()
            .zip(x)
            .map(|(&o, &xi)| {
                let d = o as f64 - xi as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if clip.is_some() {
            for ((d, &o), &xi) in delta.iter_mut().zip(out.iter()).zip(x) {
                *d = o as f64 - xi as f64;
            }
        }
        if actual <= eps {
            return;
        }
        let f = eps / actual * (1.0 - 1e-9);
        delta.iter_mut().for_each(|d| *d *= f);
    }
}

/// Adds `alpha · g/‖g‖` to each sample's perturbation; zero-gradient
/// samples are left alone.
fn normalized_step(delta: &mut [f64], g: &[f32], alpha: f64) {
    let gn = norm(g);
    if gn > 0.0 {
        for (d, &gi) in delta.iter_mut().zip(g) {
            *d += alpha * gi as f64 / gn;
        }
    }
}

fn check_labels(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rank() == 0 || x.batch() != y.len() {
        return Err(Error::shape(format!(
            "{} labels for input of shape {:?}",
            y.len(),
            x.shape()
        )));
    }
    Ok(())
}

fn fgm_batch(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    eps: f64,
    clip: Option<[f32; 2]>,
) -> Result<Tensor> {
    let mut out = x.clone();
    if eps == 0.0 || x.batch() == 0 {
        return Ok(out);
    }
    let (_, g) = input_gradient(model, x, y)?;
    let d = x.row_len();
    let mut delta = vec![0.0; d];
    for i in 0..x.batch() {
        delta.fill(0.0);
        normalized_step(&mut delta, g.row(i), eps);
        commit(x.row(i), &mut delta, eps, clip, out.row_mut(i));
    }
    Ok(out)
}

fn pgd_batch(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Tensor> {
    let mut cur = x.clone();
    if cfg.eps == 0.0 || x.batch() == 0 {
        return Ok(cur);
    }
    let (b, d) = (x.batch(), x.row_len());
    let alpha = cfg.alpha();
    let mut delta = vec![0.0f64; b * d];
    for _ in 0..cfg.k {
        let (losses, g) = input_gradient(model, &cur, y)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(losses);
        }
        for i in 0..b {
            let di = &mut delta[i * d..(i + 1) * d];
            normalized_step(di, g.row(i), alpha);
            project_l2_ball(di, cfg.eps);
            commit(x.row(i), di, cfg.eps, cfg.clip, cur.row_mut(i));
        }
    }
    if let Some(t) = trace {
        let (logits, _) = model.forward(&cur)?;
        t.push(cross_entropy_per_sample(&logits, y)?.0);
    }
    Ok(cur)
}

/// Fast gradient method: `x + eps · g/‖g‖` per sample, `g` the input
/// gradient of that sample's cross-entropy.
pub fn fgm_l2(model: &Model, x: &Tensor, y: &[usize], eps: f64) -> Result<Tensor> {
    attack(model, x, y, &AttackConfig::fgm(eps))
}

/// Projected gradient ascent from the clean point: `k` normalized steps of
/// size `alpha_ratio · eps`, each followed by projection onto the ball.
pub fn pgd_l2(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::Config("pgd_l2 needs a PGD attack config".into()));
    }
    attack(model, x, y, cfg)
}

/// PGD on one batch, also returning the per-sample losses at every iterate
/// (`k + 1` entries, the first at the clean point).
pub fn pgd_l2_with_trace(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    cfg.validate()?;
    check_labels(x, y)?;
    let mut trace = Vec::with_capacity(cfg.k + 1);
    let out = pgd_batch(model, x, y, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

/// Runs the configured attack, sharded across worker threads.
pub fn attack(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_labels(x, y)?;
    if cfg.eps == 0.0 || x.batch() == 0 {
        return Ok(x.clone());
    }
    let parts = par::map_shards(x.batch(), SHARD, |r| {
        let xs = x.slice_rows(r.start, r.end);
        let ys = &y[r];
        match cfg.kind {
            AttackKind::Fgm => fgm_batch(model, &xs, ys, cfg.eps, cfg.clip),
            AttackKind::Pgd => pgd_batch(model, &xs, ys, cfg, None),
        }
    })?;
    Tensor::concat_rows(&parts)
}

/// Counts from attacking a labelled set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub total: usize,
    /// Samples whose attacked prediction is still the true label.
    pub correct: usize,
    /// Sum over samples of `‖model(x_adv) − model(x)‖₂`.
    pub deviation_sum: f64,
}

impl AttackStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn mean_deviation(&self) -> f64 {
        self.deviation_sum / self.total as f64
    }
}

/// Attacks every sample and records robust correctness and the output
/// deviation between the attacked and the clean input.
pub fn attack_stats(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackStats> {
    cfg.validate()?;
    check_labels(x, y)?;
    if x.batch() == 0 {
        return Err(Error::Input(
            "cannot evaluate an attack on an empty dataset".into(),
        ));
    }
    let parts = par::map_shards(x.batch(), SHARD, |r| {
        let xs = x.slice_rows(r.start, r.end);
        let ys = &y[r];
        let adv = match cfg.kind {
            _ if cfg.eps == 0.0 => xs.clone(),
            AttackKind::Fgm => fgm_batch(model, &xs, ys, cfg.eps, cfg.clip)?,
            AttackKind::Pgd => pgd_batch(model, &xs, ys, cfg, None)?,
        };
        let clean_out = model.predict(&xs)?;
        let adv_out = if cfg.eps == 0.0 {
            clean_out.clone()
        } else {
            model.predict(&adv)?
        };
        let pred = argmax_rows(&adv_out);
        let mut s = AttackStats {
            total: ys.len(),
            ..Default::default()
        };
        for i in 0..ys.len() {
            s.correct += usize::from(pred[i] == ys[i]);
            let dev: f64 = adv_out
                .row(i)
                .iter()
                .zip(clean_out.row(i))
                .map(|(&a, &c)| {
                    let d = a as f64 - c as f64;
                    d * d
                })
                .sum();
            s.deviation_sum += dev.sqrt();
        }
        Ok(s)
    })?;
    Ok(parts
        .into_iter()
        .fold(AttackStats::default(), |acc, s| AttackStats {
            total: acc.total + s.total,
            correct: acc.correct + s.correct,
            deviation_sum: acc.deviation_sum + s.deviation_sum,
        }))
}

/// Fraction of samples still classified correctly after the attack.
pub fn robust_accuracy(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<f64> {
    Ok(attack_stats(model, x, y, cfg)?.accuracy())
}

/// One optimizer step on clean data followed by the per-step spectral
/// projection. Returns the batch loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    x: &Tensor,
    y: &[usize],
    opt: &mut Optimizer,
    reg: &RegularizerConfig,
    rng: &mut R,
) -> Result<f64> {
    let (logits, cache) = model.forward(x)?;
    let (loss, g) = cross_entropy(&logits, y)?;
    let grads = model.backward(&cache, &g, true)?;
    opt.step(&mut model.params_mut(), &grads.params)?;
    apply_constraints_step(model, reg, rng)?;
    Ok(loss)
}

/// Attacks the batch with `cfg`, then takes a [`train_step`] on the
/// adversarial batch.
pub fn adversarial_train_step<R: Rng + ?Sized>(
    model: &mut Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    opt: &mut Optimizer,
    reg: &RegularizerConfig,
    rng: &mut R,
) -> Result<f64> {
    let adv = attack(model, x, y, cfg)?;
    train_step(model, &adv, y, opt, reg, rng)
}
