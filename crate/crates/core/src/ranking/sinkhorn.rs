//! Entropic optimal transport and the global-assignment ranking baseline.
//!
//! The plan is computed in the log domain:
//!
//! ```text
//! P_ij = exp((f_i + g_j - C_ij) / eps)
//! f_i  = eps * ln a_i - eps * LSE_j((g_j - C_ij) / eps)
//! g_j  = eps * ln b_j - eps * LSE_i((f_i - C_ij) / eps)
//! ```
//!
//! After each `g` update the column sums are exact, so convergence is
//! measured on the row sums.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ranking_order, ContrastiveScorer, RankerConfig, ScoredRegion};
use crate::data::RegionId;
use crate::error::{Error, Result};
use crate::intent::IntentState;
use crate::vecmath::{check_dim, Embedding};

const MARGINAL_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Largest tolerated deviation of any row or column sum from its marginal.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Raised alongside a plan when the iteration cap was hit before `tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxIterationsWarning {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub iterations: usize,
    /// Max absolute marginal deviation of the returned plan.
    pub residual: f64,
    pub warning: Option<MaxIterationsWarning>,
}

impl TransportPlan {
    pub fn converged(&self) -> bool {
        self.warning.is_none()
    }

    pub fn column_mass(&self) -> Vec<f64> {
        self.plan.sum_axis(ndarray::Axis(0)).to_vec()
    }
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Config(format!("{name} marginal has negative or non-finite entries")));
    }
    let sum: f64 = m.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(Error::Config(format!("{name} marginal sums to {sum}, expected 1")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic-regularized transport plan between `rows` and `cols`.
pub fn sinkhorn_plan(
    cost: &Array2<f64>,
    rows: &[f64],
    cols: &[f64],
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Dimension {
            expected: 1,
            actual: 0,
        });
    }
    check_dim(n, rows.len())?;
    check_dim(m, cols.len())?;
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidCost(format!("non-finite entry {c}")));
    }
    check_marginal("row", rows)?;
    check_marginal("column", cols)?;

    let eps = cfg.epsilon;
    let log_a: Vec<f64> = rows.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            f[i] = if rows[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_a[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps))
            };
        }
        for j in 0..m {
            g[j] = if cols[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                eps * log_b[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps))
            };
        }
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| entry(f[i], g[j], cost[[i, j]], eps)).sum();
                (row - rows[i]).abs()
            })
            .fold(0.0, f64::max);
        if residual < cfg.tol {
            break;
        }
    }

    let plan = Array2::from_shape_fn((n, m), |(i, j)| entry(f[i], g[j], cost[[i, j]], eps));
    let col_residual = plan
        .sum_axis(ndarray::Axis(0))
        .iter()
        .zip(cols)
        .map(|(s, b)| (s - b).abs())
        .fold(0.0, f64::max);
    let residual = residual.max(col_residual);
    let warning = (residual >= cfg.tol).then_some(MaxIterationsWarning {
        iterations,
        residual,
    });
    if let Some(w) = &warning {
        tracing::warn!(iterations = w.iterations, residual = w.residual, "sinkhorn hit iteration cap");
    }
    Ok(TransportPlan {
        plan,
        iterations,
        residual,
        warning,
    })
}

#[inline]
fn entry(f: f64, g: f64, c: f64, eps: f64) -> f64 {
    if f == f64::NEG_INFINITY || g == f64::NEG_INFINITY {
        0.0
    } else {
        ((f + g - c) / eps).exp()
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornRanking {
    /// `score` is the negated transport cost per unit of mass delivered to the region.
    pub ranking: Vec<ScoredRegion>,
    /// Column mass of each ranked region, aligned with `ranking`.
    pub column_mass: Vec<f64>,
    pub plan: TransportPlan,
}

/// Ranks regions by a global transport of the positive exemplars onto them.
///
/// Cost from positive `i` to region `j` is `1 - cos(z_i, r_j)` plus `lambda`
/// times the region's largest cosine to a negative exemplar, clamped at zero.
/// Both marginals are uniform. Because the region marginal is enforced, every
/// region's column mass is `1/M`; the ranking key is instead the mean cost of
/// the mass the plan routes to each region, negated.
pub fn sinkhorn_rank<'e>(
    regions: impl IntoIterator<Item = (RegionId, &'e Embedding)>,
    state: &IntentState,
    ranker: &RankerConfig,
    cfg: &SinkhornConfig,
) -> Result<SinkhornRanking> {
    let regions: Vec<(RegionId, &Embedding)> = regions.into_iter().collect();
    if regions.is_empty() {
        return Err(Error::Config("no candidate regions to rank".into()));
    }
    let diagnostics = ContrastiveScorer::new(state, ranker)?;
    let terms = regions
        .iter()
        .map(|(id, r)| diagnostics.score(*id, r))
        .collect::<Result<Vec<_>>>()?;
    let negatives = state.negatives();
    let positives = state.positives();
    let penalty: Vec<f64> = regions
        .iter()
        .map(|(_, r)| {
            if negatives.is_empty() {
                0.0
            } else {
                negatives
                    .iter()
                    .map(|z| r.cosine_unchecked(z.embedding()))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();

    let (n, m) = (positives.len(), regions.len());
    let cost = Array2::from_shape_fn((n, m), |(i, j)| {
        let sim = regions[j].1.cosine_unchecked(positives[i].embedding());
        ((1.0 - sim) + ranker.lambda * penalty[j]).max(0.0)
    });
    let rows = vec![1.0 / n as f64; n];
    let cols = vec![1.0 / m as f64; m];
    let plan = sinkhorn_plan(&cost, &rows, &cols, cfg)?;

    let mass = plan.column_mass();
    let mut scored: Vec<(ScoredRegion, f64)> = terms
        .into_iter()
        .enumerate()
        .map(|(j, t)| {
            let delivered: f64 = (0..n).map(|i| plan.plan[[i, j]] * cost[[i, j]]).sum();
            let score = if mass[j] > 0.0 {
                -delivered / mass[j]
            } else {
                f64::NEG_INFINITY
            };
            (ScoredRegion { score, ..t }, mass[j])
        })
        .collect();
    scored.sort_by(|a, b| ranking_order(&a.0, &b.0));
    let (ranking, column_mass) = scored.into_iter().unzip();
    Ok(SinkhornRanking {
        ranking,
        column_mass,
        plan,
    })
}
