//! The single-distractor resolution bound.
//!
//! Take a prompt `q`, a true target `r*` and a distractor `r_d` that the
//! prompt alone prefers (`cos(r_d, q) >= cos(r*, q)`). After rejecting `r_d`
//! the state is `({q}, {r_d})` and
//!
//! ```text
//! S(r*) - S(r_d) = lambda * (1 - cos(r*, r_d)) - (cos(r_d, q) - cos(r*, q))
//! ```
//!
//! which is positive exactly when `lambda` exceeds
//! `(cos(r_d, q) - cos(r*, q)) / (1 - cos(r*, r_d))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::RegionId;
use crate::error::{Error, Result};
use crate::intent::{Exemplar, IntentState};
use crate::ranking::{Aggregation, ContrastiveScorer, RankerConfig};
use crate::vecmath::{check_dim, l2_normalize, Embedding};

/// `sim_td` at or above `1 - DEGENERATE_TOL` makes the bound blow up.
pub const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityInstance {
    /// cos(r_d, q)
    pub sim_dq: f64,
    /// cos(r*, q)
    pub sim_tq: f64,
    /// cos(r*, r_d)
    pub sim_td: f64,
}

impl AmbiguityInstance {
    pub fn from_vectors(q: &Embedding, r_star: &Embedding, r_d: &Embedding) -> Result<Self> {
        check_dim(q.dim(), r_star.dim())?;
        check_dim(q.dim(), r_d.dim())?;
        Ok(Self {
            sim_dq: r_d.cosine_unchecked(q),
            sim_tq: r_star.cosine_unchecked(q),
            sim_td: r_star.cosine_unchecked(r_d),
        })
    }

    /// The prompt alone ranks the distractor at least as high as the target.
    pub fn is_ambiguous(&self) -> bool {
        self.sim_dq >= self.sim_tq
    }

    pub fn is_degenerate(&self) -> bool {
        self.sim_td >= 1.0 - DEGENERATE_TOL
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("sim_dq", self.sim_dq), ("sim_tq", self.sim_tq), ("sim_td", self.sim_td)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [-1, 1], got {v}")));
            }
        }
        if self.is_degenerate() {
            return Err(Error::DegenerateInstance { sim_td: self.sim_td });
        }
        Ok(())
    }
}

/// Infimum of the penalty weights that resolve `inst` after one rejection.
///
/// The inequality is strict, so `lambda == min_resolving_lambda` leaves the
/// two regions tied. Negative for non-ambiguous instances.
pub fn min_resolving_lambda(inst: &AmbiguityInstance) -> Result<f64> {
    inst.validate()?;
    Ok((inst.sim_dq - inst.sim_tq) / (1.0 - inst.sim_td))
}

/// True when, after rejecting `r_d`, the max-aggregation score puts `r_star`
/// strictly above `r_d`.
pub fn verify_resolution(q: &Embedding, r_star: &Embedding, r_d: &Embedding, lambda: f64) -> Result<bool> {
    check_dim(q.dim(), r_star.dim())?;
    check_dim(q.dim(), r_d.dim())?;
    let state = IntentState::from_exemplars(
        1,
        vec![Exemplar::initial_prompt(q.clone())],
        vec![Exemplar::region(RegionId(0), r_d.clone())],
    )?;
    let cfg = RankerConfig {
        lambda,
        aggregation: Aggregation::Max,
    };
    let scorer = ContrastiveScorer::new(&state, &cfg)?;
    let target = scorer.score(RegionId(1), r_star)?;
    let distractor = scorer.score(RegionId(0), r_d)?;
    Ok(target.score > distractor.score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub passed: usize,
    pub failed: usize,
    /// Draws discarded because target and distractor were too close.
    pub resampled: usize,
    pub max_lambda_min: f64,
}

impl TrialSummary {
    pub fn all_passed(&self) -> bool {
        self.failed == 0 && self.passed == self.trials
    }
}

/// Margin added on top of the bound. Lifts the score gap to about `1e-6`.
pub fn trial_margin(inst: &AmbiguityInstance) -> f64 {
    1e-6 / (1.0 - inst.sim_td)
}

/// Closest two draws may be before a trial is redrawn.
const TRIAL_MIN_GAP: f64 = 1e-6;

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(e) = l2_normalize(&raw) {
            return e;
        }
    }
}

/// Draws one ambiguous triple `(q, r*, r_d)`, returning it with the number of
/// discarded near-identical draws.
pub fn sample_ambiguous(rng: &mut impl Rng, dim: usize) -> (Embedding, Embedding, Embedding, usize) {
    let mut resampled = 0;
    loop {
        let q = random_unit(rng, dim);
        let a = random_unit(rng, dim);
        let b = random_unit(rng, dim);
        let (r_star, r_d) = if a.cosine_unchecked(&q) >= b.cosine_unchecked(&q) {
            (b, a)
        } else {
            (a, b)
        };
        if r_star.cosine_unchecked(&r_d) <= 1.0 - TRIAL_MIN_GAP {
            return (q, r_star, r_d, resampled);
        }
        resampled += 1;
    }
}

/// Randomized check of the bound: every sampled instance must resolve at
/// `min_resolving_lambda + trial_margin`.
pub fn run_trials(trials: usize, dim: usize, seed: u64) -> Result<TrialSummary> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    if dim < 2 {
        return Err(Error::Config(format!("dim must be at least 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = TrialSummary {
        trials,
        dim,
        seed,
        passed: 0,
        failed: 0,
        resampled: 0,
        max_lambda_min: f64::NEG_INFINITY,
    };
    for _ in 0..trials {
        let (q, r_star, r_d, resampled) = sample_ambiguous(&mut rng, dim);
        summary.resampled += resampled;
        let inst = AmbiguityInstance::from_vectors(&q, &r_star, &r_d)?;
        let lambda_min = min_resolving_lambda(&inst)?;
        summary.max_lambda_min = summary.max_lambda_min.max(lambda_min);
        if verify_resolution(&q, &r_star, &r_d, lambda_min + trial_margin(&inst))? {
            summary.passed += 1;
        } else {
            summary.failed += 1;
        }
    }
    Ok(summary)
}
