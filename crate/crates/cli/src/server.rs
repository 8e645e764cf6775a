//! HTTP front end for the annotation service.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emosim_core::alignment::read_pool;
use emosim_core::annotation::{AnnotationError, AnnotationService, ServiceConfig, Side};
use emosim_core::{load_manifest, Error, HarnessConfig, PreferenceTriplet, Result};
use serde::Deserialize;
use tower::ServiceExt;
use tower_http::services::ServeFile;

use crate::ServeArgs;

pub struct AppState {
    pub service: AnnotationService,
    /// Utterance id to audio file, for pool utterances only.
    pub audio: HashMap<String, PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub rater: String,
}

#[derive(Debug, Deserialize)]
pub struct VoteBody {
    pub rater_id: String,
    pub triplet_id: String,
    pub side_choice: Side,
}

pub struct ApiError(AnnotationError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            AnnotationError::UnknownRater(_) | AnnotationError::UnknownTriplet(_) => StatusCode::NOT_FOUND,
            AnnotationError::NoPresentation { .. } | AnnotationError::DuplicateVote { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        ApiError(e)
    }
}

type Shared = Arc<AppState>;

async fn next(State(app): State<Shared>, Query(q): Query<NextQuery>) -> std::result::Result<Response, ApiError> {
    Ok(Json(app.service.next_triplet(&q.rater)?).into_response())
}

async fn vote(State(app): State<Shared>, Json(body): Json<VoteBody>) -> std::result::Result<Response, ApiError> {
    Ok(Json(
        app.service
            .record_vote(&body.rater_id, &body.triplet_id, body.side_choice)?,
    )
    .into_response())
}

async fn stats(State(app): State<Shared>) -> std::result::Result<Response, ApiError> {
    Ok(Json(app.service.stats()?).into_response())
}

async fn export(State(app): State<Shared>) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], app.service.export()).into_response()
}

async fn audio(State(app): State<Shared>, Path(id): Path<String>, req: Request) -> Response {
    let Some(path) = app.audio.get(&id).filter(|_| app.service.serves_audio(&id)) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match ServeFile::new(path).oneshot(req).await {
        Ok(res) => res.map(Body::new),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/next", get(next))
        .route("/api/vote", post(vote))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .route("/audio/{*id}", get(audio))
        .with_state(Arc::new(state))
}

/// Maps every utterance referenced by the pool to its audio file. Manifest
/// `audio_path` wins; otherwise `<media_root>/<id>.wav`.
pub fn audio_paths(
    pool: &[PreferenceTriplet],
    media_root: &std::path::Path,
    manifest_paths: &HashMap<String, String>,
) -> HashMap<String, PathBuf> {
    pool.iter()
        .flat_map(|t| [&t.ref_id, &t.candidate_a_id, &t.candidate_b_id])
        .map(|id| {
            let path = match manifest_paths.get(id) {
                Some(rel) => media_root.join(rel),
                None => media_root.join(format!("{id}.wav")),
            };
            (id.clone(), path)
        })
        .collect()
}

pub fn state(args: &ServeArgs) -> Result<AppState> {
    let pool = read_pool(&args.pool)?;
    let harness = match &args.harness_config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    let mut manifest_paths = HashMap::new();
    for p in &args.manifest {
        for r in load_manifest(p, &harness.labels)?.records {
            if let Some(audio) = r.audio_path {
                manifest_paths.insert(r.id, audio);
            }
        }
    }
    let audio = audio_paths(&pool, &args.media_root, &manifest_paths);
    let config = ServiceConfig {
        raters: args.raters.clone(),
        seed: args.seed,
        threshold: args.threshold,
    };
    let service = AnnotationService::open(pool, config, Some(&args.log))?;
    Ok(AppState { service, audio })
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let app = router(state(args)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("starting runtime", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .map_err(|e| Error::io(format!("binding {}", args.addr), e))?;
        eprintln!("listening on http://{}", args.addr);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io("serving", e))
    })
}
