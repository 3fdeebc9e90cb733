use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor64;

/// Entries of the comparison-matrix inverse below `-INVERSE_TOL` count as negative.
pub const INVERSE_TOL: f64 = 1e-9;

/// Outcome of a quasi-dominance check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum QuasiDominance {
    /// `witness` is the positive diagonal of `P`.
    Pass {
        witness: Vec<f64>,
    },
    Fail {
        reason: String,
    },
}

impl QuasiDominance {
    pub fn passed(&self) -> bool {
        matches!(self, QuasiDominance::Pass { .. })
    }
}

fn square_side(m: &Tensor64) -> Result<usize> {
    match m.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::shape(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Same diagonal, off-diagonal entries replaced by `-|m_ij|`.
pub fn comparison_matrix(m: &Tensor64) -> Result<Tensor64> {
    let n = square_side(m)?;
    Ok(Tensor64::from_fn(vec![n, n], |i| {
        let v = m.data()[i];
        if i / n == i % n {
            v
        } else {
            -v.abs()
        }
    }))
}

/// Strict row-sum quasi-dominance: is there a positive diagonal `P` with
/// `m_ii p_i > Σ_{j≠i} |m_ij| p_j` for every row?
///
/// Decided through the comparison matrix `C`: the answer is yes exactly when
/// every diagonal entry exceeds `tol` and `C` is a nonsingular M-matrix
/// (invertible with entrywise nonnegative inverse). The witness is `C⁻¹·𝟙`.
pub fn is_quasi_dominant(m: &Tensor64, tol: f64) -> Result<QuasiDominance> {
    let n = square_side(m)?;
    m.check_finite()?;
    if n == 0 {
        return Ok(QuasiDominance::Pass {
            witness: Vec::new(),
        });
    }
    for i in 0..n {
        let d = m.at2(i, i);
        if !(d > tol) {
            return Ok(QuasiDominance::Fail {
                reason: format!("diagonal entry {i} is {d}, not above {tol}"),
            });
        }
    }
    let c = comparison_matrix(m)?;
    let cm = DMatrix::from_row_slice(n, n, c.data());
    let Some(inv) = cm.clone().try_inverse() else {
        return Ok(QuasiDominance::Fail {
            reason: "comparison matrix is singular".into(),
        });
    };
    if let Some((idx, v)) = inv.iter().enumerate().find(|(_, v)| **v < -INVERSE_TOL) {
        // nalgebra stores column-major.
        return Ok(QuasiDominance::Fail {
            reason: format!(
                "comparison matrix inverse has negative entry {v:.6} at ({}, {})",
                idx % n,
                idx / n
            ),
        });
    }
    let witness: Vec<f64> = (0..n).map(|i| inv.row(i).sum()).collect();
    if let Some(i) = witness.iter().position(|&p| !(p > 0.0)) {
        return Ok(QuasiDominance::Fail {
            reason: format!("witness component {i} is not positive"),
        });
    }
    // Residual guard against an ill-conditioned inverse.
    let slack = &cm * DMatrix::from_column_slice(n, 1, &witness);
    if slack.iter().any(|s| !(*s > 0.0)) {
        return Ok(QuasiDominance::Fail {
            reason: "witness does not give strict dominance (ill-conditioned comparison matrix)"
                .into(),
        });
    }
    Ok(QuasiDominance::Pass { witness })
}
