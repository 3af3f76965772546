use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use intentrank_core::data::{Bbox, BundleManifest, RegionId};
use intentrank_core::intent::{Feedback, FeedbackKind, FeedbackRecord, InitMode};
use intentrank_core::ranking::{Aggregation, ScoredRegion};
use intentrank_core::session::{Memory, Outcome, RankerVariant, Session, SessionConfig, SessionTranscript};
use intentrank_core::Embedding;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::store::{AppState, LiveSession, Registered};

type Body<T> = Result<Json<T>, JsonRejection>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub bundle_id: String,
    pub regions: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionView {
    pub id: RegionId,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleView {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub dim: usize,
    pub regions: Vec<RegionView>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInput {
    #[serde(default)]
    pub query_id: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub text_embedding: Option<Embedding>,
    #[serde(default)]
    pub ref_image_embedding: Option<Embedding>,
}

/// Per-session overrides of the service defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub k: Option<u32>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub aggregation: Option<Aggregation>,
    pub present_k: Option<usize>,
    pub exclude_rejected_from_presentation: Option<bool>,
    pub init_mode: Option<InitMode>,
    pub memory: Option<Memory>,
    pub variant: Option<RankerVariant>,
    pub epsilon: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut cfg: SessionConfig) -> SessionConfig {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            k => k,
            alpha => alpha,
            lambda => ranker.lambda,
            aggregation => ranker.aggregation,
            present_k => present_k,
            exclude_rejected_from_presentation => exclude_rejected_from_presentation,
            init_mode => init_mode,
            memory => memory,
            variant => variant,
            epsilon => sinkhorn.epsilon,
            max_iters => sinkhorn.max_iters,
            tol => sinkhorn.tol,
        );
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub bundle_id: String,
    pub query: QueryInput,
    #[serde(default)]
    pub config: Option<ConfigOverrides>,
}

/// Feedback body. `turn`, when given, must match the session's current turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub kind: FeedbackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_id: Option<RegionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_prompt_embedding: Option<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<u32>,
}

impl FeedbackRequest {
    pub fn from_feedback(feedback: Feedback, turn: Option<u32>) -> Self {
        let r = FeedbackRecord::from(feedback);
        Self {
            kind: r.kind,
            region_id: r.region_id,
            new_prompt_embedding: r.new_prompt_embedding,
            turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentedRegion {
    pub region_id: RegionId,
    pub bbox: Bbox,
    /// 1-based position in the full ranking.
    pub rank: usize,
    pub score: f64,
    pub s_pos: f64,
    pub s_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub bundle_id: String,
    pub query_id: String,
    pub outcome: Outcome,
    /// Index of the current turn record.
    pub turn: u32,
    pub rounds_left: u32,
    pub z_pos_size: usize,
    pub z_neg_size: usize,
    pub rejected: Vec<RegionId>,
    pub presented: Vec<PresentedRegion>,
    pub ranking: Vec<ScoredRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_star: Option<Bbox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDetail {
    #[serde(flatten)]
    pub view: SessionView,
    pub config: SessionConfig,
    pub transcript: SessionTranscript,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum LogEvent<'a> {
    Created {
        bundle_id: &'a str,
        config: &'a SessionConfig,
        query: &'a QueryInput,
        view: &'a SessionView,
    },
    Feedback {
        feedback: &'a Feedback,
        view: &'a SessionView,
    },
}

fn view(session_id: &str, live: &LiveSession) -> SessionView {
    let s = &live.session;
    let current = s.current();
    let presented = current
        .presented
        .iter()
        .filter_map(|id| {
            let rank = current.ranking.iter().position(|r| r.region_id == *id)?;
            let scored = &current.ranking[rank];
            Some(PresentedRegion {
                region_id: *id,
                bbox: live.bundle.region(*id)?.bbox,
                rank: rank + 1,
                score: scored.score,
                s_pos: scored.s_pos,
                s_neg: scored.s_neg,
            })
        })
        .collect();
    SessionView {
        session_id: session_id.to_owned(),
        bundle_id: live.bundle.image_id().to_owned(),
        query_id: s.transcript().query_id.clone(),
        outcome: s.outcome(),
        turn: current.turn,
        rounds_left: if s.is_active() { s.config().k - s.rounds() } else { 0 },
        z_pos_size: current.z_pos_size,
        z_neg_size: current.z_neg_size,
        rejected: current.rejected.clone(),
        presented,
        ranking: current.ranking.clone(),
        b_star: s.transcript().b_star,
    }
}

pub(crate) async fn register_bundle(
    State(state): State<Arc<AppState>>,
    body: Body<BundleManifest>,
) -> Result<(StatusCode, Json<BundleSummary>), ApiError> {
    let Json(manifest) = body?;
    if manifest.embedding_file.is_some() {
        return Err(ApiError::bad_request(
            "sidecar_not_supported",
            "register bundles with inline embeddings",
        ));
    }
    let bundle = manifest.into_bundle(None)?;
    let summary = BundleSummary {
        bundle_id: bundle.image_id().to_owned(),
        regions: bundle.len(),
        dim: bundle.dim(),
    };
    let status = match state.register_bundle(bundle)? {
        Registered::Created => StatusCode::CREATED,
        Registered::Unchanged => StatusCode::OK,
    };
    tracing::info!(bundle = %summary.bundle_id, regions = summary.regions, "bundle registered");
    Ok((status, Json(summary)))
}

pub(crate) async fn get_bundle(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<BundleView>, ApiError> {
    let b = state.bundle(&id)?;
    Ok(Json(BundleView {
        image_id: b.image_id().to_owned(),
        image_uri: b.image_uri().map(str::to_owned),
        dim: b.dim(),
        regions: b
            .regions()
            .iter()
            .map(|r| RegionView { id: r.id, bbox: r.bbox })
            .collect(),
    }))
}

pub(crate) async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Body<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let bundle = state.bundle(&req.bundle_id)?;
    let cfg = req.config.unwrap_or_default().apply(state.defaults);
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let query_id = req.query.query_id.clone().unwrap_or_else(|| session_id.clone());
    let session = Session::start(
        &bundle,
        query_id,
        req.query.text_embedding.as_ref(),
        req.query.ref_image_embedding.as_ref(),
        cfg,
    )?;
    let live = LiveSession { bundle, session };
    let v = view(&session_id, &live);
    state.log_event(
        &session_id,
        &LogEvent::Created {
            bundle_id: &req.bundle_id,
            config: &cfg,
            query: &req.query,
            view: &v,
        },
    );
    state.insert_session(session_id.clone(), live);
    tracing::info!(session = %session_id, bundle = %req.bundle_id, "session started");
    Ok((StatusCode::CREATED, Json(v)))
}

pub(crate) async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Body<FeedbackRequest>,
) -> Result<Json<SessionView>, ApiError> {
    let Json(req) = body?;
    let feedback = Feedback::try_from(FeedbackRecord {
        kind: req.kind,
        region_id: req.region_id,
        new_prompt_embedding: req.new_prompt_embedding,
    })?;
    let entry = state.session(&id)?;
    let mut live = entry.lock().expect("session lock poisoned");
    if !live.session.is_active() {
        return Err(ApiError::conflict(format!("session {id} has ended")));
    }
    let current = live.session.current().turn;
    if let Some(turn) = req.turn {
        if turn != current {
            return Err(ApiError::conflict(format!(
                "feedback targets turn {turn} but the session is at turn {current}"
            )));
        }
    }
    let bundle = Arc::clone(&live.bundle);
    live.session.apply(&bundle, feedback.clone())?;
    let v = view(&id, &live);
    state.log_event(&id, &LogEvent::Feedback { feedback: &feedback, view: &v });
    Ok(Json(v))
}

pub(crate) async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionDetail>, ApiError> {
    let entry = state.session(&id)?;
    let live = entry.lock().expect("session lock poisoned");
    Ok(Json(SessionDetail {
        view: view(&id, &live),
        config: *live.session.config(),
        transcript: live.session.transcript().clone(),
    }))
}
