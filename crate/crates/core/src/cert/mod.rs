//! Passivity budgets, the cascade certificate and the bounds derived from it.

mod quasi;

pub use quasi::{comparison_matrix, is_quasi_dominant, QuasiDominance, INVERSE_TOL};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor64;

/// Largest admissible `δ·ν`. Products equal to it are accepted.
pub const MAX_PRODUCT: f64 = 0.25;

// Absorbs rounding in products such as 0.92 * 0.27 that sit near the boundary.
const PRODUCT_EPS: f64 = 1e-12;

/// Per-layer output-strict passivity / input passivity pair `(δ_l, ν_l)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub delta: f64,
    pub nu: f64,
}

impl LayerBudget {
    pub fn new(delta: f64, nu: f64) -> Self {
        Self { delta, nu }
    }
}

/// Whole-network budget `(δ, ν)`; its finite gain is `1/δ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalBudget {
    pub delta: f64,
    pub nu: f64,
}

impl GlobalBudget {
    pub fn new(delta: f64, nu: f64) -> Self {
        Self { delta, nu }
    }

    pub fn gain(&self) -> f64 {
        1.0 / self.delta
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Budget(format!(
                "global δ must be positive and finite, got {}",
                self.delta
            )));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::Budget(format!(
                "global ν must be positive and finite, got {}",
                self.nu
            )));
        }
        Ok(())
    }
}

/// Largest spectral norm a layer may have under budget `b`: `1/δ² + 2|ν|/δ`.
pub fn spectral_cap(b: LayerBudget) -> Result<f64> {
    if !(b.delta > 0.0) || !b.delta.is_finite() || !b.nu.is_finite() {
        return Err(Error::Budget(format!(
            "spectral cap needs δ > 0, got (δ={}, ν={})",
            b.delta, b.nu
        )));
    }
    Ok(1.0 / (b.delta * b.delta) + 2.0 * b.nu.abs() / b.delta)
}

/// Interconnection matrix `A` of a chain of `n ≥ 3` layers closed by the
/// global budget.
pub fn build_cascade_matrix(budgets: &[LayerBudget], g: GlobalBudget) -> Result<Tensor64> {
    let n = budgets.len();
    if n <= 2 {
        return Err(Error::Size(format!(
            "cascade matrix needs more than two layers, got {n}"
        )));
    }
    let side = n + 1;
    let mut a = Tensor64::zeros(vec![side, side]);
    let m = a.data_mut();
    m[0] = g.nu - budgets[0].nu;
    for i in 1..n {
        m[i * side + i] = -budgets[i - 1].delta - budgets[i].nu;
    }
    m[n * side + n] = g.delta - budgets[n - 1].delta;
    for i in 0..n {
        m[i * side + i + 1] = 0.5;
        m[(i + 1) * side + i] = 0.5;
    }
    m[n] = -0.5;
    m[n * side] = -0.5;
    Ok(a)
}

/// Conditions under which the chain keeps its global budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    LayerDeltaPositive,
    GlobalDeltaPositive,
    LastDeltaAboveGlobal,
    GlobalNuPositive,
    FirstNuAboveGlobal,
    Coupling,
    Product,
}

impl Constraint {
    pub fn label(&self) -> &'static str {
        match self {
            Constraint::LayerDeltaPositive => "δ_l > 0",
            Constraint::GlobalDeltaPositive => "δ > 0",
            Constraint::LastDeltaAboveGlobal => "δ_n > δ",
            Constraint::GlobalNuPositive => "ν > 0",
            Constraint::FirstNuAboveGlobal => "ν₁ > ν",
            Constraint::Coupling => "δ_l + ν_{l+1} > 1",
            Constraint::Product => "δ·ν ≤ 0.25",
        }
    }
}

/// A failed condition. `layer` is 1-based; `None` for global conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub layer: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(
                f,
                "{} fails at layer {l}: {}",
                self.constraint.label(),
                self.detail
            ),
            None => write!(f, "{} fails: {}", self.constraint.label(), self.detail),
        }
    }
}

/// Lists every violated planning condition; empty means the budgets compose.
pub fn check_planning_conditions(budgets: &[LayerBudget], g: GlobalBudget) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |constraint, layer, detail: String| {
        out.push(Violation {
            constraint,
            layer,
            detail,
        })
    };
    for (i, b) in budgets.iter().enumerate() {
        if !(b.delta > 0.0) {
            push(
                Constraint::LayerDeltaPositive,
                Some(i + 1),
                format!("δ = {}", b.delta),
            );
        }
    }
    if !(g.delta > 0.0) {
        push(
            Constraint::GlobalDeltaPositive,
            None,
            format!("δ = {}", g.delta),
        );
    }
    if let Some(last) = budgets.last() {
        if !(last.delta > g.delta) {
            push(
                Constraint::LastDeltaAboveGlobal,
                Some(budgets.len()),
                format!("{} ≤ {}", last.delta, g.delta),
            );
        }
    }
    if !(g.nu > 0.0) {
        push(Constraint::GlobalNuPositive, None, format!("ν = {}", g.nu));
    }
    if let Some(first) = budgets.first() {
        if !(first.nu > g.nu) {
            push(
                Constraint::FirstNuAboveGlobal,
                Some(1),
                format!("{} ≤ {}", first.nu, g.nu),
            );
        }
    }
    for (i, w) in budgets.windows(2).enumerate() {
        let s = w[0].delta + w[1].nu;
        if !(s > 1.0) {
            push(
                Constraint::Coupling,
                Some(i + 1),
                format!("{} + {} = {s:.6} ≤ 1", w[0].delta, w[1].nu),
            );
        }
    }
    for (i, b) in budgets.iter().enumerate() {
        let p = b.delta * b.nu;
        if !(p <= MAX_PRODUCT + PRODUCT_EPS) {
            push(
                Constraint::Product,
                Some(i + 1),
                format!("{} · {} = {p:.6}", b.delta, b.nu),
            );
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertStatus {
    Pass,
    Fail,
}

/// Everything the certificate check produced, in one record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CascadeCertificate {
    pub budgets: Vec<LayerBudget>,
    pub global: GlobalBudget,
    /// The interconnection matrix `A`; dominance is checked on `-A`.
    pub matrix: Tensor64,
    pub quasi_dominance: QuasiDominance,
    pub planning_violations: Vec<Violation>,
    /// `None` where a layer has no valid cap (`δ_l ≤ 0`).
    pub caps: Vec<Option<f64>>,
    /// `1/δ² + 2ν/δ` for the global budget, when it is valid.
    pub bound_coefficient: Option<f64>,
    pub strict: bool,
    pub status: CertStatus,
    pub notes: Vec<String>,
}

impl CascadeCertificate {
    pub fn passed(&self) -> bool {
        self.status == CertStatus::Pass
    }

    /// `-A`, the matrix whose dominance is checked.
    pub fn neg_matrix(&self) -> Tensor64 {
        self.matrix.map(|v| -v)
    }

    pub fn neg_matrix_rows(&self) -> Vec<Vec<f64>> {
        let neg = self.neg_matrix();
        let side = neg.shape()[0];
        (0..side)
            .map(|i| neg.row(i).iter().map(|v| v + 0.0).collect())
            .collect()
    }
}

/// Builds and checks the cascade certificate.
///
/// The status keys on the planning conditions; with `strict` the
/// quasi-dominance of `-A` is required as well.
pub fn certify(
    budgets: &[LayerBudget],
    g: GlobalBudget,
    strict: bool,
) -> Result<CascadeCertificate> {
    let matrix = build_cascade_matrix(budgets, g)?;
    let quasi_dominance = is_quasi_dominant(&matrix.map(|v| -v), INVERSE_TOL)?;
    let planning_violations = check_planning_conditions(budgets, g);
    let caps = budgets.iter().map(|b| spectral_cap(*b).ok()).collect();
    let bound_coefficient = bound_coefficient(g).ok();

    let mut notes = Vec::new();
    if planning_violations.is_empty() && !quasi_dominance.passed() {
        notes.push(
            "planning conditions hold but -A is not quasi-dominant; \
             the budgets do not certify the chain through the interconnection matrix"
                .to_string(),
        );
    }
    if let QuasiDominance::Fail { reason } = &quasi_dominance {
        notes.push(format!("quasi-dominance: {reason}"));
    }
    let ok = planning_violations.is_empty() && (!strict || quasi_dominance.passed());
    if strict && !quasi_dominance.passed() {
        notes.push("strict mode requires quasi-dominance of -A".to_string());
    }
    Ok(CascadeCertificate {
        budgets: budgets.to_vec(),
        global: g,
        matrix,
        quasi_dominance,
        planning_violations,
        caps,
        bound_coefficient,
        strict,
        status: if ok {
            CertStatus::Pass
        } else {
            CertStatus::Fail
        },
        notes,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Budget(format!(
            "radius must be finite and ≥ 0, got {eps}"
        )));
    }
    Ok(())
}

/// `1/δ² + 2ν/δ` for a valid global budget.
pub fn bound_coefficient(g: GlobalBudget) -> Result<f64> {
    g.validate()?;
    Ok(1.0 / (g.delta * g.delta) + 2.0 * g.nu / g.delta)
}

/// Output deviation bound `√c · ε`, linear in the attack radius.
pub fn corollary_bound(g: GlobalBudget, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(bound_coefficient(g)?.sqrt() * eps)
}

/// Output deviation bound `√(c · ε)`, the form the tabulated bounds follow.
pub fn table_bound(g: GlobalBudget, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok((bound_coefficient(g)? * eps).sqrt())
}

/// Budget left after wrapping a layer in an identity skip connection:
/// `δ' = ν' = (ν + δ − 1)/(1 − 2δ)`.
pub fn residual_effective_budget(b: LayerBudget) -> Result<LayerBudget> {
    if !(b.delta > 0.0) {
        return Err(Error::Budget(format!(
            "residual budget needs δ > 0, got {}",
            b.delta
        )));
    }
    if !(b.delta < 0.5) {
        return Err(Error::Budget(format!(
            "residual budget needs δ < 0.5, got {}",
            b.delta
        )));
    }
    if !(b.nu + b.delta >= 1.0) {
        return Err(Error::Budget(format!(
            "residual budget needs ν + δ ≥ 1, got {}",
            b.nu + b.delta
        )));
    }
    if !(b.delta * b.nu <= MAX_PRODUCT + PRODUCT_EPS) {
        return Err(Error::Budget(format!(
            "residual budget needs δ·ν ≤ 0.25, got {}",
            b.delta * b.nu
        )));
    }
    let v = (b.nu + b.delta - 1.0) / (1.0 - 2.0 * b.delta);
    Ok(LayerBudget::new(v, v))
}

/// Budget of an activation confined to the sector between slopes `a` and `b`.
pub fn conic_from_slopes(a: f64, b: f64) -> Result<LayerBudget> {
    let s = a + b;
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateCone);
    }
    Ok(LayerBudget::new(1.0 / s, a * b / s))
}

/// Sector slopes `(a, b)`, `a ≤ b`, with the given budget: the roots of
/// `t² − t/δ + ν/δ = 0`.
pub fn slopes_from_budget(delta: f64, nu: f64) -> Result<(f64, f64)> {
    if delta == 0.0 || !delta.is_finite() || !nu.is_finite() {
        return Err(Error::Budget(format!(
            "slopes need finite δ ≠ 0, got {delta}"
        )));
    }
    let product = delta * nu;
    if product > MAX_PRODUCT + PRODUCT_EPS {
        return Err(Error::ComplexSlopes { product });
    }
    // Roots of δt² − t + ν = 0, via the cancellation-free form.
    let disc = (1.0 - 4.0 * product).max(0.0).sqrt();
    let q = 0.5 * (1.0 + disc);
    let (r1, r2) = (q / delta, nu / q);
    Ok(if r1 <= r2 { (r1, r2) } else { (r2, r1) })
}

/// How [`plan_parameters`] picks per-layer budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PlanningPolicy {
    Default {
        #[serde(default = "default_margin_out")]
        margin_out: f64,
        #[serde(default = "default_margin_in")]
        margin_in: f64,
        #[serde(default = "default_slack")]
        slack: f64,
    },
    Explicit {
        budgets: Vec<LayerBudget>,
    },
}

fn default_margin_out() -> f64 {
    0.08
}
fn default_margin_in() -> f64 {
    0.03
}
fn default_slack() -> f64 {
    0.005
}

impl Default for PlanningPolicy {
    fn default() -> Self {
        PlanningPolicy::Default {
            margin_out: default_margin_out(),
            margin_in: default_margin_in(),
            slack: default_slack(),
        }
    }
}

/// Chooses per-layer budgets that compose to `g`.
///
/// The default policy fixes the last layer just above the global `δ`, the
/// first layer just above the global `ν`, and walks the interior backwards
/// so each coupling `δ_l + ν_{l+1}` clears 1 by `slack`.
pub fn plan_parameters(
    n: usize,
    g: GlobalBudget,
    policy: &PlanningPolicy,
) -> Result<Vec<LayerBudget>> {
    if n <= 2 {
        return Err(Error::Size(format!(
            "planning needs more than two layers, got {n}"
        )));
    }
    g.validate()?;
    if g.delta * g.nu > MAX_PRODUCT + PRODUCT_EPS {
        return Err(Error::Planning(format!(
            "global product δ·ν = {} exceeds 0.25",
            g.delta * g.nu
        )));
    }
    let budgets = match policy {
        PlanningPolicy::Explicit { budgets } => {
            if budgets.len() != n {
                return Err(Error::Planning(format!(
                    "explicit policy lists {} budgets for {n} layers",
                    budgets.len()
                )));
            }
            budgets.clone()
        }
        PlanningPolicy::Default {
            margin_out,
            margin_in,
            slack,
        } => {
            let mut b = vec![LayerBudget::new(0.0, 0.0); n];
            let dn = g.delta + margin_out;
            b[n - 1] = LayerBudget::new(dn, MAX_PRODUCT / dn - slack);
            for l in (1..n - 1).rev() {
                let d = 1.0 - b[l + 1].nu + slack;
                b[l] = LayerBudget::new(d, MAX_PRODUCT / d - slack);
            }
            let n1 = g.nu + margin_in;
            b[0] = LayerBudget::new(MAX_PRODUCT / n1 - slack, n1);
            b
        }
    };
    let violations = check_planning_conditions(&budgets, g);
    if let Some(first) = violations.first() {
        let rest: Vec<String> = violations.iter().skip(1).map(|v| v.to_string()).collect();
        let mut msg = format!("binding constraint {first}");
        if !rest.is_empty() {
            msg.push_str(&format!("; also {}", rest.join("; ")));
        }
        return Err(Error::Planning(msg));
    }
    Ok(budgets)
}
