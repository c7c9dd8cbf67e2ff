//! Read-only JSON API over a trained model and its target dataset.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};
use xsight::attribution::AttributionMap2D;
use xsight::detection::{detect_from_map, DetectParams};
use xsight::{Error, Result};

use crate::config::RunConfig;
use crate::pipeline::{detect_params, load_trained, Trained};

pub struct AppState {
    trained: Trained,
    defaults: DetectParams,
    predictions: Vec<f64>,
    cache: RwLock<HashMap<String, Arc<AttributionMap2D>>>,
    computed: AtomicUsize,
}

impl AppState {
    pub fn new(trained: Trained, cfg: &RunConfig) -> Result<Self> {
        let predictions = (0..trained.samples.len())
            .map(|i| trained.probability(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            trained,
            defaults: detect_params(cfg),
            predictions,
            cache: RwLock::new(HashMap::new()),
            computed: AtomicUsize::new(0),
        })
    }

    /// Number of attribution maps computed (cache misses) so far.
    pub fn attributions_computed(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    fn attribution(&self, case_id: &str) -> Result<Arc<AttributionMap2D>> {
        if let Some(map) = self.cache.read().expect("cache lock").get(case_id) {
            return Ok(map.clone());
        }
        let map = Arc::new(self.trained.attribution(case_id, self.defaults.steps)?);
        self.computed.fetch_add(1, Ordering::SeqCst);
        // concurrent misses compute identical maps; keep whichever lands first
        let mut cache = self.cache.write().expect("cache lock");
        Ok(cache.entry(case_id.to_string()).or_insert(map).clone())
    }

    fn index(&self, case_id: &str) -> std::result::Result<usize, ApiError> {
        self.trained
            .target
            .index_of(case_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown case {case_id}")))
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message,
        }
    }

    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Lookup(_) => StatusCode::NOT_FOUND,
            Error::Usage(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Runs blocking model work off the async executor.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
        .map_err(ApiError::from)
}

#[derive(Serialize)]
struct CaseSummary<'a> {
    id: &'a str,
    label: u8,
    prediction: u8,
    probability: f64,
}

async fn cases(State(state): State<Arc<AppState>>) -> Response {
    let rows: Vec<CaseSummary<'_>> = state
        .trained
        .target
        .manifest
        .cases
        .iter()
        .zip(&state.predictions)
        .map(|(c, &p)| CaseSummary {
            id: &c.case_id,
            label: c.label,
            prediction: u8::from(p >= 0.5),
            probability: p,
        })
        .collect();
    json_body(serde_json::to_string(&rows).expect("serializable"))
}

#[derive(Serialize)]
struct ImagePayload<'a> {
    case_id: &'a str,
    height: usize,
    width: usize,
    /// Row-major 8-bit gray levels, base64 encoded.
    pixels_base64: String,
}

async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let index = state.index(&id)?;
    let img = state.trained.target.load_image(index)?;
    let bytes: Vec<u8> = img.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    let payload = ImagePayload {
        case_id: &id,
        height: img.height,
        width: img.width,
        pixels_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
    };
    Ok(json_body(serde_json::to_string(&payload).expect("serializable")))
}

async fn image_pgm(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let index = state.index(&id)?;
    let img = state.trained.target.load_image(index)?;
    Ok((
        [(header::CONTENT_TYPE, "image/x-portable-graymap")],
        xsight::synth::encode_pgm(&img),
    )
        .into_response())
}

async fn report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let index = state.index(&id)?;
    let text = state.trained.target.load_report(index)?;
    let body = serde_json::json!({
        "case_id": id,
        "label": state.trained.target.record(index).label,
        "text": text,
    });
    Ok(json_body(body.to_string()))
}

async fn attribution(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    state.index(&id)?;
    let json = blocking(&state, move |s| s.attribution(&id)?.to_json(&id)).await?;
    Ok(json_body(json))
}

fn parse_param<T: std::str::FromStr>(query: &HashMap<String, String>, key: &str, default: T) -> ApiResult<T> {
    match query.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| ApiError::bad_request(format!("malformed {key}: {raw:?}"))),
    }
}

async fn detections(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    state.index(&id)?;
    let mut params = state.defaults.clone();
    params.q = parse_param(&query, "q", params.q)?;
    params.k_max = parse_param(&query, "k_max", params.k_max)?;
    params.epsilon = parse_param(&query, "epsilon", params.epsilon)?;
    if !(0.0..1.0).contains(&params.q) {
        return Err(ApiError::bad_request(format!("q must lie in [0, 1), got {}", params.q)));
    }
    if params.k_max == 0 || !(params.epsilon > 0.0) {
        return Err(ApiError::bad_request("k_max must be ≥ 1 and epsilon positive".into()));
    }
    let json = blocking(&state, move |s| {
        let map = s.attribution(&id)?;
        detect_from_map(&id, &map, &params)?.to_json()
    })
    .await?;
    Ok(json_body(json))
}

async fn text_scores(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    state.index(&id)?;
    let json = blocking(&state, move |s| {
        let (tokens, scores) = s.trained.text_scores(&id)?;
        scores.to_json(&id, &tokens)
    })
    .await?;
    Ok(json_body(json))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]);
    Router::new()
        .route("/api/cases", get(cases))
        .route("/api/cases/{id}/image", get(image))
        .route("/api/cases/{id}/image.pgm", get(image_pgm))
        .route("/api/cases/{id}/report", get(report))
        .route("/api/cases/{id}/attribution", get(attribution))
        .route("/api/cases/{id}/detections", get(detections))
        .route("/api/cases/{id}/text-scores", get(text_scores))
        .fallback(|| async { ApiError::not_found("no such endpoint".into()) })
        .layer(cors)
        .with_state(state)
}

/// Serves on `127.0.0.1:<port>` until interrupted.
pub fn serve(cfg: &RunConfig) -> Result<()> {
    let state = Arc::new(AppState::new(load_trained(cfg)?, cfg)?);
    let addr = SocketAddr::from(([127, 0, 0, 1], cfg.port));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: "tokio runtime".into(),
        source: e,
    })?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::Io {
            path: addr.to_string().into(),
            source: e,
        })?;
        eprintln!("serving on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Io {
                path: addr.to_string().into(),
                source: e,
            })
    })
}
