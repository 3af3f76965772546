//! The interaction loop.
//!
//! A [`Session`] ranks the bundle, presents the top candidates, takes one
//! feedback event, updates its intent state and ranks again, for at most `k`
//! feedback rounds. It never owns the bundle; every call that needs region
//! data borrows it, so one bundle can back many concurrent sessions.
//!
//! [`simulate_session`] drives a session with the simulated user: confirm the
//! presented top-1 if it overlaps the ground truth, otherwise reject it.

use serde::{Deserialize, Serialize};

use crate::data::{iou, Bbox, Bundle, Query, Region, RegionId};
use crate::error::{Error, Result};
use crate::intent::{Feedback, InitMode, IntentState};
use crate::ranking::{rank_candidates, region_pairs, sinkhorn_rank, RankerConfig, ScoredRegion, SinkhornConfig};
use crate::vecmath::Embedding;

/// What the state remembers between turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Memory {
    /// Every feedback event accumulates.
    #[default]
    Full,
    /// Each turn starts over from the initial prompt plus only the latest feedback.
    Stateless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankerVariant {
    #[default]
    Contrastive,
    Sinkhorn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Maximum number of feedback rounds.
    pub k: u32,
    pub alpha: f64,
    pub ranker: RankerConfig,
    pub present_k: usize,
    pub exclude_rejected_from_presentation: bool,
    pub init_mode: InitMode,
    pub memory: Memory,
    pub variant: RankerVariant,
    pub sinkhorn: SinkhornConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: 2,
            alpha: 0.6,
            ranker: RankerConfig::default(),
            present_k: 1,
            exclude_rejected_from_presentation: true,
            init_mode: InitMode::Fused,
            memory: Memory::Full,
            variant: RankerVariant::Contrastive,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.present_k == 0 {
            return Err(Error::Config("present_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        self.ranker.validate()?;
        self.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub iou_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    /// Every region, best first. Never filtered.
    pub ranking: Vec<ScoredRegion>,
    pub presented: Vec<RegionId>,
    /// Feedback received on this turn's presentation, if any yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    pub z_pos_size: usize,
    pub z_neg_size: usize,
    pub rejected: Vec<RegionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Active,
    Confirmed { region_id: RegionId },
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub query_id: String,
    pub image_id: String,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_star: Option<Bbox>,
}

impl SessionTranscript {
    /// Ranking that was current at `turn`; a session that ended earlier keeps its last one.
    pub fn ranking_at(&self, turn: usize) -> &[ScoredRegion] {
        let idx = turn.min(self.turns.len() - 1);
        &self.turns[idx].ranking
    }

    pub fn feedback(&self) -> impl Iterator<Item = &Feedback> {
        self.turns.iter().filter_map(|t| t.feedback.as_ref())
    }
}

/// Ranks every region of `bundle` and picks what to show.
pub fn run_turn(
    bundle: &Bundle,
    state: &IntentState,
    cfg: &SessionConfig,
) -> Result<(Vec<ScoredRegion>, Vec<RegionId>)> {
    let pairs = region_pairs(bundle.regions());
    let ranking = match cfg.variant {
        RankerVariant::Contrastive => rank_candidates(pairs, state, &cfg.ranker)?,
        RankerVariant::Sinkhorn => sinkhorn_rank(pairs, state, &cfg.ranker, &cfg.sinkhorn)?.ranking,
    };
    let rejected = state.rejected_region_ids();
    let presented = ranking
        .iter()
        .map(|r| r.region_id)
        .filter(|id| !(cfg.exclude_rejected_from_presentation && rejected.contains(id)))
        .take(cfg.present_k)
        .collect();
    Ok((ranking, presented))
}

/// The simulated user: confirm on sufficient overlap, otherwise reject.
pub fn oracle_feedback(presented_top: &Region, gt_bbox: &Bbox, cfg: &OracleConfig) -> Feedback {
    if iou(&presented_top.bbox, gt_bbox) >= cfg.iou_threshold {
        Feedback::confirm(presented_top.id)
    } else {
        Feedback::reject(presented_top.id)
    }
}

/// A single-writer retrieval session over a borrowed bundle.
#[derive(Debug, Clone)]
pub struct Session {
    cfg: SessionConfig,
    initial: IntentState,
    state: IntentState,
    transcript: SessionTranscript,
}

impl Session {
    /// Initializes the state from the prompt and records the Turn-0 ranking.
    pub fn start(
        bundle: &Bundle,
        query_id: impl Into<String>,
        text: Option<&Embedding>,
        image: Option<&Embedding>,
        cfg: SessionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let state = IntentState::new(text, image, cfg.alpha, cfg.init_mode)?;
        crate::vecmath::check_dim(bundle.dim(), state.dim())?;
        let mut session = Session {
            cfg,
            initial: state.clone(),
            state,
            transcript: SessionTranscript {
                query_id: query_id.into(),
                image_id: bundle.image_id().to_owned(),
                turns: Vec::new(),
                outcome: Outcome::Active,
                b_star: None,
            },
        };
        session.record(bundle)?;
        Ok(session)
    }

    pub fn for_query(bundle: &Bundle, query: &Query, cfg: SessionConfig) -> Result<Self> {
        if query.image_id != bundle.image_id() {
            return Err(Error::Mismatch(format!(
                "query {} targets image {} but the bundle is {}",
                query.query_id,
                query.image_id,
                bundle.image_id()
            )));
        }
        Self::start(
            bundle,
            query.query_id.clone(),
            query.text_embedding.as_ref(),
            query.ref_image_embedding.as_ref(),
            cfg,
        )
    }

    fn record(&mut self, bundle: &Bundle) -> Result<()> {
        let (ranking, presented) = run_turn(bundle, &self.state, &self.cfg)?;
        self.transcript.turns.push(TurnRecord {
            turn: self.transcript.turns.len() as u32,
            ranking,
            presented,
            feedback: None,
            z_pos_size: self.state.positives().len(),
            z_neg_size: self.state.negatives().len(),
            rejected: self.state.rejected_region_ids().iter().copied().collect(),
        });
        Ok(())
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn state(&self) -> &IntentState {
        &self.state
    }

    pub fn transcript(&self) -> &SessionTranscript {
        &self.transcript
    }

    pub fn into_transcript(self) -> SessionTranscript {
        self.transcript
    }

    pub fn outcome(&self) -> Outcome {
        self.transcript.outcome
    }

    pub fn is_active(&self) -> bool {
        self.transcript.outcome == Outcome::Active
    }

    /// Feedback rounds received so far.
    pub fn rounds(&self) -> u32 {
        self.transcript.turns.iter().filter(|t| t.feedback.is_some()).count() as u32
    }

    pub fn current(&self) -> &TurnRecord {
        self.transcript.turns.last().expect("a session always has a Turn-0 record")
    }

    pub fn presented(&self) -> &[RegionId] {
        &self.current().presented
    }

    /// Applies one feedback event. Fails with `Conflict` once the session has ended.
    pub fn apply(&mut self, bundle: &Bundle, feedback: Feedback) -> Result<Outcome> {
        if bundle.image_id() != self.transcript.image_id {
            return Err(Error::Mismatch(format!(
                "session is on image {} but bundle {} was given",
                self.transcript.image_id,
                bundle.image_id()
            )));
        }
        if !self.is_active() {
            return Err(Error::Conflict(format!("session is {:?}", self.transcript.outcome)));
        }
        let next = match self.cfg.memory {
            Memory::Full => self.state.apply(&feedback, bundle)?,
            Memory::Stateless => {
                let fresh = self.initial.apply(&feedback, bundle)?;
                IntentState::from_exemplars(
                    self.state.turn() + 1,
                    fresh.positives().to_vec(),
                    fresh.negatives().to_vec(),
                )?
            }
        };
        self.state = next;
        let current = self.transcript.turns.last_mut().expect("turn record");
        current.feedback = Some(feedback.clone());

        if let Feedback::Confirm { region_id } = feedback {
            let region = bundle.region(region_id).ok_or(Error::UnknownRegion(region_id))?;
            self.transcript.outcome = Outcome::Confirmed { region_id };
            self.transcript.b_star = Some(region.bbox);
            return Ok(self.transcript.outcome);
        }
        self.record(bundle)?;
        if self.rounds() >= self.cfg.k {
            self.transcript.outcome = Outcome::Unresolved;
        }
        Ok(self.transcript.outcome)
    }

    /// Ends an active session without a confirmation.
    pub fn abandon(&mut self) {
        if self.is_active() {
            self.transcript.outcome = Outcome::Unresolved;
        }
    }
}

/// Runs a session against the simulated user until confirmation or budget exhaustion.
pub fn simulate_session(
    bundle: &Bundle,
    query: &Query,
    s_cfg: &SessionConfig,
    o_cfg: &OracleConfig,
) -> Result<SessionTranscript> {
    o_cfg.validate()?;
    let mut session = Session::for_query(bundle, query, *s_cfg)?;
    while session.is_active() {
        let Some(&top) = session.presented().first() else {
            session.abandon();
            break;
        };
        let region = bundle.region(top).ok_or(Error::UnknownRegion(top))?;
        let fb = oracle_feedback(region, &query.gt_bbox, o_cfg);
        session.apply(bundle, fb)?;
    }
    Ok(session.into_transcript())
}

/// Applies `script` verbatim. A session the script does not confirm ends unresolved.
pub fn scripted_session(
    bundle: &Bundle,
    query: &Query,
    script: &[Feedback],
    s_cfg: &SessionConfig,
) -> Result<SessionTranscript> {
    if script.len() > s_cfg.k as usize {
        return Err(Error::Config(format!(
            "script has {} steps but k is {}",
            script.len(),
            s_cfg.k
        )));
    }
    let mut session = Session::for_query(bundle, query, *s_cfg)?;
    for fb in script {
        session.apply(bundle, fb.clone())?;
    }
    session.abandon();
    Ok(session.into_transcript())
}

/// Rejects the best-ranked incorrect region `steps` times, never confirming.
///
/// "Incorrect" means IoU with the ground truth below the oracle threshold,
/// so the true target is skipped over rather than rejected.
pub fn rejection_trace_session(
    bundle: &Bundle,
    query: &Query,
    steps: u32,
    s_cfg: &SessionConfig,
    o_cfg: &OracleConfig,
) -> Result<SessionTranscript> {
    o_cfg.validate()?;
    let cfg = SessionConfig {
        k: steps.max(1),
        ..*s_cfg
    };
    let mut session = Session::for_query(bundle, query, cfg)?;
    for _ in 0..steps {
        let rejected = session.state().rejected_region_ids().clone();
        let wrong = session
            .current()
            .ranking
            .iter()
            .map(|r| r.region_id)
            .filter(|id| !rejected.contains(id))
            .find(|id| {
                bundle
                    .region(*id)
                    .is_some_and(|r| iou(&r.bbox, &query.gt_bbox) < o_cfg.iou_threshold)
            });
        let Some(id) = wrong else { break };
        session.apply(bundle, Feedback::reject(id))?;
    }
    session.abandon();
    Ok(session.into_transcript())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::Aggregation;

    const DEG10: [f64; 2] = [0.984807753012208, 0.17364817766693033];
    const DEG20: [f64; 2] = [0.9396926207859084, -0.3420201433256687];

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn bbox(x: f64) -> Bbox {
        Bbox::new(x, 0.0, 10.0, 10.0).unwrap()
    }

    fn region(id: u32, v: &[f64], x: f64) -> Region {
        Region {
            id: RegionId(id),
            bbox: bbox(x),
            embedding: e(v),
        }
    }

    /// Distractor at 10 degrees (region 0), target at -20 degrees (region 1).
    fn ambiguous() -> (Bundle, Query) {
        let bundle = Bundle::new(
            "img",
            None,
            2,
            vec![region(0, &DEG10, 0.0), region(1, &DEG20, 50.0)],
        )
        .unwrap();
        let query = Query {
            query_id: "q".into(),
            image_id: "img".into(),
            text: None,
            text_embedding: Some(e(&[1.0, 0.0])),
            ref_image_embedding: None,
            gt_bbox: bbox(50.0),
            category: "cup".into(),
        };
        (bundle, query)
    }

    #[test]
    fn run_turn_presentation() {
        let (bundle, query) = ambiguous();
        let cfg = SessionConfig::default();
        let s0 = IntentState::new(query.text_embedding.as_ref(), None, 0.6, InitMode::Fused).unwrap();
        let (ranking, presented) = run_turn(&bundle, &s0, &cfg).unwrap();
        assert_eq!(ranking.len(), 2);
        assert_eq!(presented, vec![RegionId(0)]);

        let s_rej = s0.apply(&Feedback::reject(0), &bundle).unwrap();
        let lam0 = SessionConfig {
            ranker: RankerConfig {
                lambda: 0.0,
                ..RankerConfig::default()
            },
            ..cfg
        };
        let (ranking, presented) = run_turn(&bundle, &s_rej, &lam0).unwrap();
        assert_eq!(ranking[0].region_id, RegionId(0));
        assert_eq!(presented, vec![RegionId(1)]);

        let wide = SessionConfig { present_k: 5, ..cfg };
        assert_eq!(run_turn(&bundle, &s0, &wide).unwrap().1.len(), 2);
    }

    #[test]
    fn oracle_threshold_is_inclusive() {
        let gt = Bbox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let half = Region {
            id: RegionId(3),
            bbox: Bbox::new(0.0, 0.0, 10.0, 5.0).unwrap(),
            embedding: e(&[1.0, 0.0]),
        };
        assert_eq!(oracle_feedback(&half, &gt, &OracleConfig::default()), Feedback::confirm(3));
        let far = Region {
            bbox: Bbox::new(30.0, 0.0, 10.0, 10.0).unwrap(),
            ..half.clone()
        };
        assert_eq!(oracle_feedback(&far, &gt, &OracleConfig::default()), Feedback::reject(3));
    }

    #[test]
    fn worked_session_resolves_at_turn_one() {
        let (bundle, query) = ambiguous();
        let t = simulate_session(&bundle, &query, &SessionConfig::default(), &OracleConfig::default()).unwrap();
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.turns[0].presented, vec![RegionId(0)]);
        assert_eq!(t.turns[0].feedback, Some(Feedback::reject(0)));
        assert_eq!(t.turns[1].presented, vec![RegionId(1)]);
        assert_eq!(t.outcome, Outcome::Confirmed { region_id: RegionId(1) });
        assert_eq!(t.b_star, Some(bbox(50.0)));
        assert_eq!(t.turns.last().unwrap().feedback, Some(Feedback::confirm(1)));
    }

    #[test]
    fn correct_turn_zero_confirms_immediately() {
        let (bundle, mut query) = ambiguous();
        query.gt_bbox = bbox(0.0);
        let t = simulate_session(&bundle, &query, &SessionConfig::default(), &OracleConfig::default()).unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.turns[0].z_neg_size, 0);
        assert_eq!(t.outcome, Outcome::Confirmed { region_id: RegionId(0) });
    }

    #[test]
    fn budget_exhaustion() {
        let (bundle, query) = ambiguous();
        let cfg = SessionConfig { k: 1, ..SessionConfig::default() };
        let t = simulate_session(&bundle, &query, &cfg, &OracleConfig::default()).unwrap();
        assert_eq!(t.outcome, Outcome::Unresolved);
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.turns[1].z_neg_size, 1);
        assert!(t.turns.len() <= cfg.k as usize + 1);
    }

    #[test]
    fn ended_sessions_reject_feedback() {
        let (bundle, query) = ambiguous();
        let mut s = Session::for_query(&bundle, &query, SessionConfig::default()).unwrap();
        s.apply(&bundle, Feedback::confirm(1)).unwrap();
        assert!(matches!(s.apply(&bundle, Feedback::reject(0)), Err(Error::Conflict(_))));
    }

    #[test]
    fn mismatched_image_is_rejected() {
        let (bundle, mut query) = ambiguous();
        query.image_id = "other".into();
        assert!(matches!(
            simulate_session(&bundle, &query, &SessionConfig::default(), &OracleConfig::default()),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn scripts() {
        let (bundle, query) = ambiguous();
        let cfg = SessionConfig::default();
        let empty = scripted_session(&bundle, &query, &[], &cfg).unwrap();
        assert_eq!(empty.turns.len(), 1);
        assert_eq!(empty.outcome, Outcome::Unresolved);

        let one = scripted_session(&bundle, &query, &[Feedback::reject(0)], &cfg).unwrap();
        let oracle = simulate_session(&bundle, &query, &cfg, &OracleConfig::default()).unwrap();
        assert_eq!(one.turns[1].ranking, oracle.turns[1].ranking);

        assert!(matches!(
            scripted_session(&bundle, &query, &[Feedback::reject(9)], &cfg),
            Err(Error::UnknownRegion(RegionId(9)))
        ));
        let long = vec![Feedback::reject(0); 3];
        assert!(matches!(scripted_session(&bundle, &query, &long, &cfg), Err(Error::Config(_))));

        let prompt = scripted_session(&bundle, &query, &[Feedback::refine_prompt(e(&[0.0, -1.0]))], &cfg).unwrap();
        assert_eq!(prompt.turns[1].z_pos_size, 2);
        let region = scripted_session(&bundle, &query, &[Feedback::refine_region(1)], &cfg).unwrap();
        assert_eq!(region.turns[1].ranking[0].region_id, RegionId(1));
        assert_eq!(region.turns[1].ranking[0].score, 1.0);
    }

    #[test]
    fn stateless_memory_forgets_older_rejections() {
        let rows = [[1.0, 0.1], [1.0, 0.05], [1.0, -0.3]];
        let regions = rows
            .iter()
            .enumerate()
            .map(|(i, v)| region(i as u32, v, 20.0 * i as f64))
            .collect();
        let bundle = Bundle::new("img", None, 2, regions).unwrap();
        let query = Query {
            gt_bbox: bbox(40.0),
            ..ambiguous().1
        };
        let script = [Feedback::reject(0), Feedback::reject(1)];
        let full = scripted_session(&bundle, &query, &script, &SessionConfig::default()).unwrap();
        let stateless = scripted_session(
            &bundle,
            &query,
            &script,
            &SessionConfig {
                memory: Memory::Stateless,
                ..SessionConfig::default()
            },
        )
        .unwrap();
        assert_eq!(full.turns[2].z_neg_size, 2);
        assert_eq!(stateless.turns[2].z_neg_size, 1);
        assert_eq!(stateless.turns[2].rejected, vec![RegionId(1)]);
    }

    #[test]
    fn rejection_trace_skips_the_target() {
        let (bundle, query) = ambiguous();
        let t = rejection_trace_session(&bundle, &query, 5, &SessionConfig::default(), &OracleConfig::default())
            .unwrap();
        // only one wrong region exists
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.outcome, Outcome::Unresolved);
    }

    #[test]
    fn transcripts_are_deterministic() {
        let (bundle, query) = ambiguous();
        let cfg = SessionConfig {
            ranker: RankerConfig {
                lambda: 1.0,
                aggregation: Aggregation::Mean,
            },
            ..SessionConfig::default()
        };
        let a = serde_json::to_string(&simulate_session(&bundle, &query, &cfg, &OracleConfig::default()).unwrap());
        let b = serde_json::to_string(&simulate_session(&bundle, &query, &cfg, &OracleConfig::default()).unwrap());
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn transcript_round_trips() {
        let (bundle, query) = ambiguous();
        let t = simulate_session(&bundle, &query, &SessionConfig::default(), &OracleConfig::default()).unwrap();
        let back: SessionTranscript = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
