//! Candidate scoring against an intent state.
//!
//! The default scorer takes the best cosine to any positive exemplar and
//! subtracts `lambda` times the best cosine to any negative exemplar. The
//! `Mean` aggregation replaces both maxima with the cosine to the normalized
//! exemplar mean. [`sinkhorn`] holds the transport-based global baseline.

pub mod sinkhorn;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{Region, RegionId};
use crate::error::{Error, Result};
use crate::intent::IntentState;
use crate::vecmath::{check_dim, normalized_mean, Embedding};

pub use sinkhorn::{sinkhorn_plan, sinkhorn_rank, SinkhornConfig, SinkhornRanking, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Ties are always broken by ascending region id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    /// Weight of the negative penalty.
    pub lambda: f64,
    pub aggregation: Aggregation,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            aggregation: Aggregation::Max,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRegion {
    pub region_id: RegionId,
    pub score: f64,
    /// Positive term.
    pub s_pos: f64,
    /// Negative term before lambda weighting; zero with no negatives.
    pub s_neg: f64,
}

/// A state prepared for repeated scoring.
pub struct ContrastiveScorer<'a> {
    lambda: f64,
    dim: usize,
    pos: Prepared<'a>,
    neg: Prepared<'a>,
}

enum Prepared<'a> {
    Empty,
    Each(Vec<&'a Embedding>),
    Mean(Embedding),
}

impl Prepared<'_> {
    fn term(&self, r: &Embedding) -> f64 {
        match self {
            Prepared::Empty => 0.0,
            Prepared::Each(items) => items
                .iter()
                .map(|z| r.cosine_unchecked(z))
                .fold(f64::NEG_INFINITY, f64::max),
            Prepared::Mean(m) => r.cosine_unchecked(m),
        }
    }
}

impl<'a> ContrastiveScorer<'a> {
    pub fn new(state: &'a IntentState, cfg: &RankerConfig) -> Result<Self> {
        cfg.validate()?;
        if state.positives().is_empty() {
            return Err(Error::InvalidState("no positive exemplars".into()));
        }
        let prepare = |set: &'a [crate::intent::Exemplar]| -> Result<Prepared<'a>> {
            if set.is_empty() {
                return Ok(Prepared::Empty);
            }
            Ok(match cfg.aggregation {
                Aggregation::Max => Prepared::Each(set.iter().map(|e| e.embedding()).collect()),
                Aggregation::Mean => Prepared::Mean(
                    normalized_mean(set.iter().map(|e| e.embedding()))?
                        .ok_or_else(|| Error::InvalidState("empty exemplar set".into()))?,
                ),
            })
        };
        Ok(Self {
            lambda: cfg.lambda,
            dim: state.dim(),
            pos: prepare(state.positives())?,
            neg: prepare(state.negatives())?,
        })
    }

    pub fn score(&self, id: RegionId, r: &Embedding) -> Result<ScoredRegion> {
        check_dim(self.dim, r.dim())?;
        let s_pos = self.pos.term(r);
        let s_neg = self.neg.term(r);
        Ok(ScoredRegion {
            region_id: id,
            score: s_pos - self.lambda * s_neg,
            s_pos,
            s_neg,
        })
    }
}

/// Scores one region against the state.
pub fn score_region(
    id: RegionId,
    r: &Embedding,
    state: &IntentState,
    cfg: &RankerConfig,
) -> Result<ScoredRegion> {
    ContrastiveScorer::new(state, cfg)?.score(id, r)
}

/// Descending score, then ascending region id.
pub(crate) fn ranking_order(a: &ScoredRegion, b: &ScoredRegion) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.region_id.cmp(&b.region_id))
}

/// Scores and sorts every candidate. No region is dropped.
pub fn rank_candidates<'e>(
    regions: impl IntoIterator<Item = (RegionId, &'e Embedding)>,
    state: &IntentState,
    cfg: &RankerConfig,
) -> Result<Vec<ScoredRegion>> {
    let scorer = ContrastiveScorer::new(state, cfg)?;
    let mut ranked = regions
        .into_iter()
        .map(|(id, r)| scorer.score(id, r))
        .collect::<Result<Vec<_>>>()?;
    if ranked.is_empty() {
        return Err(Error::Config("no candidate regions to rank".into()));
    }
    ranked.sort_by(ranking_order);
    Ok(ranked)
}

/// Adapter from bundle regions to the `(id, embedding)` pairs the rankers take.
pub fn region_pairs(regions: &[Region]) -> impl Iterator<Item = (RegionId, &Embedding)> + Clone {
    regions.iter().map(|r| (r.id, &r.embedding))
}
