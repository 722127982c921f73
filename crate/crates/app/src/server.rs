//! HTTP front end: `POST /ask` and `GET /health` over one shared,
//! read-only [`Engine`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parley_core::inference::{Engine, InferenceError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct AskRequest {
    pub question: String,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct AskResponse {
    pub answer: String,
    pub tokens: Vec<String>,
    pub terminated: bool,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq, Eq)]
pub struct Health {
    pub status: String,
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

async fn ask(State(engine): State<Arc<Engine>>, body: Result<Bytes, BytesRejection>) -> Result<Json<AskResponse>, ApiError> {
    let started = Instant::now();
    let body = body.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
    let request: AskRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    if request.question.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "question is empty"));
    }
    let result = tokio::task::spawn_blocking(move || engine.answer(&request.question))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(r) => Ok(Json(AskResponse {
            answer: r.answer_text,
            tokens: r.answer_tokens,
            terminated: r.terminated,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })),
        Err(InferenceError::EmptyQuestion) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "question has no tokens",
        )),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn health(State(engine): State<Arc<Engine>>) -> Json<Health> {
    let hyper = engine.hyper();
    Json(Health {
        status: "ok".into(),
        vocab_size: hyper.vocab_size,
        hidden: hyper.hidden,
        layers: hyper.num_layers,
    })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not found")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
}

fn cors(allow_origin: &str) -> Result<CorsLayer, String> {
    let origin = if allow_origin == "*" {
        AllowOrigin::any()
    } else {
        let value = HeaderValue::from_str(allow_origin).map_err(|_| format!("invalid origin {allow_origin:?}"))?;
        AllowOrigin::exact(value)
    };
    Ok(CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]))
}

/// Builds the router. `allow_origin` of `*` permits any origin.
pub fn router(engine: Arc<Engine>, allow_origin: Option<&str>) -> Result<Router, String> {
    let app = Router::new()
        .route("/ask", post(ask))
        .route("/health", get(health))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(engine);
    Ok(match allow_origin {
        Some(origin) => app.layer(cors(origin)?),
        None => app,
    })
}

/// Serves until the future is dropped or ctrl-c arrives.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr` and serves on a fresh multi-threaded runtime.
pub fn run(engine: Engine, addr: SocketAddr, allow_origin: Option<&str>) -> Result<(), String> {
    let app = router(Arc::new(engine), allow_origin)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(addr).await.map_err(|e| format!("cannot bind {addr}: {e}"))?;
        log::info!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
        serve(listener, app).await.map_err(|e| e.to_string())
    })
}
