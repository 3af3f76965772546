//! The intent state: what the user wants (positive exemplars) and what they
//! have ruled out (negative exemplars), plus the feedback rules that grow it.
//!
//! States are immutable values. [`IntentState::apply`] returns a new state and
//! leaves the receiver untouched, so a session's history is just a list of
//! states.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::RegionId;
use crate::error::{Error, Result};
use crate::vecmath::{fuse_query, Embedding};

/// Resolves region ids to their embeddings.
pub trait RegionLookup {
    fn region_embedding(&self, id: RegionId) -> Option<&Embedding>;
}

impl RegionLookup for HashMap<RegionId, Embedding> {
    fn region_embedding(&self, id: RegionId) -> Option<&Embedding> {
        self.get(&id)
    }
}

impl RegionLookup for [(RegionId, Embedding)] {
    fn region_embedding(&self, id: RegionId) -> Option<&Embedding> {
        self.iter().find(|(rid, _)| *rid == id).map(|(_, e)| e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    InitialPrompt,
    Region,
    TextRefinement,
}

/// One entry of either exemplar set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExemplarRecord", into = "ExemplarRecord")]
pub struct Exemplar {
    embedding: Embedding,
    provenance: Provenance,
    source_region_id: Option<RegionId>,
}

#[derive(Serialize, Deserialize)]
struct ExemplarRecord {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_region_id: Option<RegionId>,
    embedding: Embedding,
}

impl TryFrom<ExemplarRecord> for Exemplar {
    type Error = Error;

    fn try_from(r: ExemplarRecord) -> Result<Self> {
        match (r.provenance, r.source_region_id) {
            (Provenance::Region, None) => Err(Error::InvalidState(
                "region exemplar without source_region_id".into(),
            )),
            (Provenance::InitialPrompt | Provenance::TextRefinement, Some(id)) => {
                Err(Error::InvalidState(format!(
                    "prompt exemplar must not reference region {id}"
                )))
            }
            _ => Ok(Exemplar {
                embedding: r.embedding,
                provenance: r.provenance,
                source_region_id: r.source_region_id,
            }),
        }
    }
}

impl From<Exemplar> for ExemplarRecord {
    fn from(e: Exemplar) -> Self {
        ExemplarRecord {
            provenance: e.provenance,
            source_region_id: e.source_region_id,
            embedding: e.embedding,
        }
    }
}

#[derive(PartialEq, Eq)]
enum ExemplarKey {
    Region(Provenance, RegionId),
    Prompt(Vec<u64>),
}

impl Exemplar {
    pub fn initial_prompt(embedding: Embedding) -> Self {
        Self {
            embedding,
            provenance: Provenance::InitialPrompt,
            source_region_id: None,
        }
    }

    pub fn text_refinement(embedding: Embedding) -> Self {
        Self {
            embedding,
            provenance: Provenance::TextRefinement,
            source_region_id: None,
        }
    }

    pub fn region(id: RegionId, embedding: Embedding) -> Self {
        Self {
            embedding,
            provenance: Provenance::Region,
            source_region_id: Some(id),
        }
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source_region_id(&self) -> Option<RegionId> {
        self.source_region_id
    }

    fn key(&self) -> ExemplarKey {
        match self.source_region_id {
            Some(id) => ExemplarKey::Region(self.provenance, id),
            None => ExemplarKey::Prompt(self.embedding.bit_key()),
        }
    }
}

/// A positive refinement names either a region or a new encoded prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Region(RegionId),
    Prompt(Embedding),
}

/// One round of user feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeedbackRecord", into = "FeedbackRecord")]
pub enum Feedback {
    /// The presented region is the target; the session ends.
    Confirm { region_id: RegionId },
    /// Add a positive cue and keep searching.
    Refine(Refinement),
    /// The region is wrong; penalize it and anything like it.
    Reject { region_id: RegionId },
}

impl Feedback {
    pub fn confirm(id: impl Into<RegionId>) -> Self {
        Feedback::Confirm { region_id: id.into() }
    }

    pub fn reject(id: impl Into<RegionId>) -> Self {
        Feedback::Reject { region_id: id.into() }
    }

    pub fn refine_region(id: impl Into<RegionId>) -> Self {
        Feedback::Refine(Refinement::Region(id.into()))
    }

    pub fn refine_prompt(embedding: Embedding) -> Self {
        Feedback::Refine(Refinement::Prompt(embedding))
    }

    pub fn kind(&self) -> FeedbackKind {
        match self {
            Feedback::Confirm { .. } => FeedbackKind::PositiveConfirmation,
            Feedback::Refine(_) => FeedbackKind::PositiveRefinement,
            Feedback::Reject { .. } => FeedbackKind::Negative,
        }
    }

    pub fn region_id(&self) -> Option<RegionId> {
        match self {
            Feedback::Confirm { region_id } | Feedback::Reject { region_id } => Some(*region_id),
            Feedback::Refine(Refinement::Region(id)) => Some(*id),
            Feedback::Refine(Refinement::Prompt(_)) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackKind {
    PositiveConfirmation,
    PositiveRefinement,
    Negative,
}

/// Wire form of [`Feedback`]: `{kind, region_id?, new_prompt_embedding?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRecord {
    pub kind: FeedbackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<RegionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_prompt_embedding: Option<Embedding>,
}

impl TryFrom<FeedbackRecord> for Feedback {
    type Error = Error;

    fn try_from(r: FeedbackRecord) -> Result<Self> {
        use FeedbackKind::*;
        match (r.kind, r.region_id, r.new_prompt_embedding) {
            (PositiveConfirmation, Some(id), None) => Ok(Feedback::Confirm { region_id: id }),
            (Negative, Some(id), None) => Ok(Feedback::Reject { region_id: id }),
            (PositiveRefinement, Some(id), None) => Ok(Feedback::Refine(Refinement::Region(id))),
            (PositiveRefinement, None, Some(e)) => Ok(Feedback::Refine(Refinement::Prompt(e))),
            (PositiveRefinement, _, _) => Err(Error::InvalidFeedback(
                "positive-refinement needs exactly one of region_id, new_prompt_embedding".into(),
            )),
            (kind, _, _) => Err(Error::InvalidFeedback(format!(
                "{kind:?} feedback needs a region_id and no new_prompt_embedding"
            ))),
        }
    }
}

impl From<Feedback> for FeedbackRecord {
    fn from(f: Feedback) -> Self {
        let kind = f.kind();
        let (region_id, new_prompt_embedding) = match f {
            Feedback::Confirm { region_id } | Feedback::Reject { region_id } => (Some(region_id), None),
            Feedback::Refine(Refinement::Region(id)) => (Some(id), None),
            Feedback::Refine(Refinement::Prompt(e)) => (None, Some(e)),
        };
        FeedbackRecord {
            kind,
            region_id,
            new_prompt_embedding,
        }
    }
}

/// How a two-modality prompt seeds the positive set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// One exemplar: the alpha-weighted fusion of text and image.
    #[default]
    Fused,
    /// Text and image embeddings as two separate positive exemplars.
    Separate,
}

/// Positive and negative exemplar sets at a given turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntentStateRecord", into = "IntentStateRecord")]
pub struct IntentState {
    turn: u32,
    z_pos: Vec<Exemplar>,
    z_neg: Vec<Exemplar>,
    rejected: BTreeSet<RegionId>,
}

#[derive(Serialize, Deserialize)]
struct IntentStateRecord {
    turn: u32,
    z_pos: Vec<Exemplar>,
    z_neg: Vec<Exemplar>,
}

impl TryFrom<IntentStateRecord> for IntentState {
    type Error = Error;

    fn try_from(r: IntentStateRecord) -> Result<Self> {
        if r.z_pos.is_empty() {
            return Err(Error::InvalidState("z_pos must not be empty".into()));
        }
        let rejected = r
            .z_neg
            .iter()
            .filter(|e| e.provenance == Provenance::Region)
            .filter_map(|e| e.source_region_id)
            .collect();
        Ok(IntentState {
            turn: r.turn,
            z_pos: r.z_pos,
            z_neg: r.z_neg,
            rejected,
        })
    }
}

impl From<IntentState> for IntentStateRecord {
    fn from(s: IntentState) -> Self {
        IntentStateRecord {
            turn: s.turn,
            z_pos: s.z_pos,
            z_neg: s.z_neg,
        }
    }
}

fn insert_unique(set: &mut Vec<Exemplar>, ex: Exemplar) {
    let key = ex.key();
    if !set.iter().any(|e| e.key() == key) {
        set.push(ex);
    }
}

impl IntentState {
    /// Turn-0 state from the initial prompt.
    pub fn new(
        text: Option<&Embedding>,
        image: Option<&Embedding>,
        alpha: f64,
        mode: InitMode,
    ) -> Result<Self> {
        let mut z_pos = Vec::with_capacity(2);
        match (mode, text, image) {
            (InitMode::Separate, Some(t), Some(i)) => {
                crate::vecmath::check_dim(t.dim(), i.dim())?;
                insert_unique(&mut z_pos, Exemplar::initial_prompt(t.clone()));
                insert_unique(&mut z_pos, Exemplar::initial_prompt(i.clone()));
            }
            _ => z_pos.push(Exemplar::initial_prompt(fuse_query(text, image, alpha)?)),
        }
        Ok(Self {
            turn: 0,
            z_pos,
            z_neg: Vec::new(),
            rejected: BTreeSet::new(),
        })
    }

    /// Builds a state directly from exemplar sets, e.g. for analysis.
    pub fn from_exemplars(turn: u32, z_pos: Vec<Exemplar>, z_neg: Vec<Exemplar>) -> Result<Self> {
        IntentStateRecord { turn, z_pos, z_neg }.try_into()
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn positives(&self) -> &[Exemplar] {
        &self.z_pos
    }

    pub fn negatives(&self) -> &[Exemplar] {
        &self.z_neg
    }

    pub fn rejected_region_ids(&self) -> &BTreeSet<RegionId> {
        &self.rejected
    }

    /// Embedding dimension shared by all exemplars.
    pub fn dim(&self) -> usize {
        self.z_pos[0].embedding.dim()
    }

    /// Applies one round of feedback and returns the next state.
    ///
    /// Rejection adds the region to the negative set, refinement adds the
    /// region or prompt to the positive set, confirmation leaves both sets
    /// alone. The turn counter advances in every case.
    pub fn apply<L>(&self, feedback: &Feedback, regions: &L) -> Result<Self>
    where
        L: RegionLookup + ?Sized,
    {
        let resolve = |id: RegionId| -> Result<Embedding> {
            let e = regions
                .region_embedding(id)
                .ok_or(Error::UnknownRegion(id))?;
            crate::vecmath::check_dim(self.dim(), e.dim())?;
            Ok(e.clone())
        };
        let mut next = self.clone();
        next.turn += 1;
        match feedback {
            Feedback::Confirm { region_id } => {
                resolve(*region_id)?;
            }
            Feedback::Reject { region_id } => {
                let e = resolve(*region_id)?;
                insert_unique(&mut next.z_neg, Exemplar::region(*region_id, e));
                next.rejected.insert(*region_id);
            }
            Feedback::Refine(Refinement::Region(id)) => {
                let e = resolve(*id)?;
                insert_unique(&mut next.z_pos, Exemplar::region(*id, e));
            }
            Feedback::Refine(Refinement::Prompt(e)) => {
                crate::vecmath::check_dim(self.dim(), e.dim())?;
                insert_unique(&mut next.z_pos, Exemplar::text_refinement(e.clone()));
            }
        }
        Ok(next)
    }
}

/// Turn-0 state with a fused prompt.
pub fn init_state(text: Option<&Embedding>, image: Option<&Embedding>, alpha: f64) -> Result<IntentState> {
    IntentState::new(text, image, alpha, InitMode::Fused)
}
