//! AP after each feedback round.
//!
//! Every query runs one simulated session. At turn `t` the query contributes
//! the full ranking current at that turn, scored against its ground-truth
//! box. A session that confirmed earlier keeps contributing its final ranking.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{average_precision, COCO_THRESHOLDS};
use crate::data::{iou, Bbox, Bundle, Query};
use crate::error::{Error, Result};
use crate::session::{simulate_session, OracleConfig, Outcome, SessionConfig, SessionTranscript};

/// Split label for categories missing from the splits map.
pub const UNLABELED_SPLIT: &str = "unlabeled";

/// Means over queries at one turn; all values in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: u32,
    /// Mean over the ten COCO thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Fraction of rankings whose first entry overlaps the ground truth at IoU 0.5.
    pub top1: f64,
    /// Fraction of sessions confirmed at or before this turn.
    pub confirmed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub category: String,
    pub outcome: Outcome,
    /// Index of the turn whose presentation was confirmed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed_turn: Option<u32>,
    pub turns: Vec<TurnMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub queries: usize,
    pub turns: Vec<TurnMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub session: SessionConfig,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfigEcho,
    pub queries: usize,
    pub confirmed: usize,
    pub unresolved: usize,
    /// Turns `0..=k`.
    pub turns: Vec<TurnMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitReport>,
    pub per_query: Vec<QueryEval>,
}

impl EvalReport {
    pub fn turn(&self, t: u32) -> Option<&TurnMetrics> {
        self.turns.iter().find(|m| m.turn == t)
    }

    /// Plain-text table with values scaled by 100.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "queries {}  confirmed {}  unresolved {}",
            self.queries, self.confirmed, self.unresolved
        );
        write_rows(&mut out, "all", &self.turns);
        for s in &self.splits {
            write_rows(&mut out, &format!("{} ({})", s.split, s.queries), &s.turns);
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

fn write_rows(out: &mut String, label: &str, turns: &[TurnMetrics]) {
    let _ = writeln!(out, "\n[{label}]");
    let _ = writeln!(out, "{:>5} {:>7} {:>7} {:>7} {:>7} {:>9}", "turn", "AP", "AP50", "AP75", "top1", "confirmed");
    for m in turns {
        let _ = writeln!(
            out,
            "{:>5} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>9.1}",
            m.turn,
            100.0 * m.ap,
            100.0 * m.ap50,
            100.0 * m.ap75,
            100.0 * m.top1,
            100.0 * m.confirmed
        );
    }
}

/// Pairs each query with the bundle of its image.
pub fn pair_dataset<'a>(bundles: &'a [Bundle], queries: &'a [Query]) -> Result<Vec<(&'a Bundle, &'a Query)>> {
    let by_id: HashMap<&str, &Bundle> = bundles.iter().map(|b| (b.image_id(), b)).collect();
    queries
        .iter()
        .map(|q| {
            by_id
                .get(q.image_id.as_str())
                .map(|b| (*b, q))
                .ok_or_else(|| Error::Mismatch(format!("no bundle for image {} (query {})", q.image_id, q.query_id)))
        })
        .collect()
}

fn turn_metrics(
    bundle: &Bundle,
    gt: &Bbox,
    transcript: &SessionTranscript,
    turn: u32,
    confirmed_turn: Option<u32>,
) -> Result<TurnMetrics> {
    let ranking = transcript.ranking_at(turn as usize);
    let ranked = ranking
        .iter()
        .map(|r| {
            bundle
                .region(r.region_id)
                .map(|reg| (reg.bbox, r.score))
                .ok_or(Error::UnknownRegion(r.region_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let gts = std::slice::from_ref(gt);
    let mut per_threshold = Vec::with_capacity(COCO_THRESHOLDS.len());
    for &t in &COCO_THRESHOLDS {
        per_threshold.push(average_precision(&ranked, gts, t)?);
    }
    Ok(TurnMetrics {
        turn,
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        top1: f64::from(u8::from(ranked.first().is_some_and(|(b, _)| iou(b, gt) >= 0.5))),
        confirmed: f64::from(u8::from(confirmed_turn.is_some_and(|c| c <= turn))),
    })
}

fn evaluate_query(bundle: &Bundle, query: &Query, s_cfg: &SessionConfig, o_cfg: &OracleConfig) -> Result<QueryEval> {
    let transcript = simulate_session(bundle, query, s_cfg, o_cfg)?;
    let confirmed_turn = match transcript.outcome {
        Outcome::Confirmed { .. } => Some(transcript.turns.len() as u32 - 1),
        _ => None,
    };
    let turns = (0..=s_cfg.k)
        .map(|t| turn_metrics(bundle, &query.gt_bbox, &transcript, t, confirmed_turn))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryEval {
        query_id: query.query_id.clone(),
        category: query.category.clone(),
        outcome: transcript.outcome,
        confirmed_turn,
        turns,
    })
}

fn mean_turns<'a>(evals: impl Iterator<Item = &'a QueryEval> + Clone, k: u32) -> Vec<TurnMetrics> {
    let n = evals.clone().count().max(1) as f64;
    (0..=k)
        .map(|t| {
            let mut m = TurnMetrics {
                turn: t,
                ap: 0.0,
                ap50: 0.0,
                ap75: 0.0,
                top1: 0.0,
                confirmed: 0.0,
            };
            for e in evals.clone() {
                let x = &e.turns[t as usize];
                m.ap += x.ap;
                m.ap50 += x.ap50;
                m.ap75 += x.ap75;
                m.top1 += x.top1;
                m.confirmed += x.confirmed;
            }
            m.ap /= n;
            m.ap50 /= n;
            m.ap75 /= n;
            m.top1 /= n;
            m.confirmed /= n;
            m
        })
        .collect()
}

/// Runs the simulated-user protocol over `dataset` and reports AP per turn.
///
/// `splits` maps category names to labels such as rare/common/frequent.
pub fn evaluate_turn_protocol(
    dataset: &[(&Bundle, &Query)],
    s_cfg: &SessionConfig,
    o_cfg: &OracleConfig,
    splits: Option<&BTreeMap<String, String>>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    s_cfg.validate()?;
    o_cfg.validate()?;
    let per_query = dataset
        .par_iter()
        .map(|(b, q)| evaluate_query(b, q, s_cfg, o_cfg))
        .collect::<Result<Vec<_>>>()?;

    let confirmed = per_query
        .iter()
        .filter(|e| matches!(e.outcome, Outcome::Confirmed { .. }))
        .count();
    let turns = mean_turns(per_query.iter(), s_cfg.k);
    let splits = match splits {
        None => Vec::new(),
        Some(map) => {
            let label = |e: &QueryEval| map.get(&e.category).map_or(UNLABELED_SPLIT, String::as_str).to_owned();
            let mut labels: Vec<String> = per_query.iter().map(label).collect();
            labels.sort();
            labels.dedup();
            labels
                .into_iter()
                .map(|l| {
                    let members = per_query.iter().filter(|e| label(e) == l);
                    SplitReport {
                        queries: members.clone().count(),
                        turns: mean_turns(members, s_cfg.k),
                        split: l,
                    }
                })
                .collect()
        }
    };
    Ok(EvalReport {
        config: EvalConfigEcho {
            session: *s_cfg,
            oracle: *o_cfg,
        },
        queries: per_query.len(),
        confirmed,
        unresolved: per_query.len() - confirmed,
        turns,
        splits,
        per_query,
    })
}
