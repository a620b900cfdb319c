//! HTTP and WebSocket API over [`Service`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use deltapad_core::experiment::Session;
use deltapad_core::patterns::Mode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use crate::service::{CreateSession, ResponseRequest, Service, ServiceError};

/// Request id headers, first match wins.
pub const IDEMPOTENCY_HEADERS: [&str; 2] = ["idempotency-key", "x-request-id"];

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    idem: Arc<Idempotency>,
}

impl AppState {
    pub fn new(service: Arc<Service>) -> Self {
        Self { service, idem: Arc::new(Idempotency::default()) }
    }
}

/// Outcomes of mutating requests by request id. A retry waits for the first
/// attempt and gets the same answer; 5xx outcomes are not kept.
#[derive(Default)]
struct Idempotency {
    slots: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Option<(StatusCode, Value)>>>>>,
}

impl Idempotency {
    async fn run<F>(&self, key: Option<String>, f: F) -> (StatusCode, Value)
    where
        F: std::future::Future<Output = (StatusCode, Value)>,
    {
        let Some(key) = key else {
            return f.await;
        };
        let slot = self.slots.lock().unwrap().entry(key).or_default().clone();
        let mut guard = slot.lock().await;
        if let Some(done) = guard.as_ref() {
            return done.clone();
        }
        let out = f.await;
        if !out.0.is_server_error() {
            *guard = Some(out.clone());
        }
        out
    }
}

fn request_key(method: &Method, path: &str, headers: &HeaderMap) -> Option<String> {
    IDEMPOTENCY_HEADERS
        .iter()
        .find_map(|h| headers.get(*h))
        .and_then(|v| v.to_str().ok())
        .map(|v| format!("{method} {path} {v}"))
}

fn error_body(code: &str, message: impl std::fmt::Display) -> Value {
    json!({ "error": { "code": code, "message": message.to_string() } })
}

fn failure(e: ServiceError) -> (StatusCode, Value) {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, error_body(e.code(), &e))
}

fn ok<T: Serialize>(status: StatusCode, body: &T) -> (StatusCode, Value) {
    (status, serde_json::to_value(body).expect("serializable response"))
}

fn reply((status, body): (StatusCode, Value)) -> Response {
    (status, Json(body)).into_response()
}

fn body_rejection(r: JsonRejection) -> Response {
    let status = match r.status() {
        StatusCode::UNSUPPORTED_MEDIA_TYPE => StatusCode::UNSUPPORTED_MEDIA_TYPE,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    };
    (status, Json(error_body("InvalidBody", r.body_text()))).into_response()
}

fn query_rejection(r: QueryRejection) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(error_body("InvalidQuery", r.body_text()))).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/present", post(present))
        .route("/sessions/{id}/response", post(respond))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/trials.csv", get(trials_csv))
        .route("/patterns", get(patterns))
        .route("/analysis", get(analysis))
        .route("/device", get(device))
        .route("/stream", get(stream))
        .with_state(state)
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "backend": st.service.device().backend_id() }))
}

async fn create_session(
    State(st): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return body_rejection(r),
    };
    let key = request_key(&Method::POST, "/sessions", &headers);
    let svc = st.service.clone();
    reply(
        st.idem
            .run(key, async move {
                match svc.create_session(req) {
                    Ok(s) => ok(
                        StatusCode::CREATED,
                        &json!({ "session_id": s.id, "mode": s.mode(), "trials": s.trials.len() }),
                    ),
                    Err(e) => failure(e),
                }
            })
            .await,
    )
}

async fn list_sessions(State(st): State<AppState>) -> Response {
    reply(ok(StatusCode::OK, &st.service.list()))
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    session: Session,
    answered: usize,
    complete: bool,
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    reply(match st.service.session(&id) {
        Ok(s) => ok(StatusCode::OK, &SessionView { answered: s.answered(), complete: s.is_complete(), session: s }),
        Err(e) => failure(e),
    })
}

async fn present(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let key = request_key(&Method::POST, &format!("/sessions/{id}/present"), &headers);
    let svc = st.service.clone();
    reply(
        st.idem
            .run(key, async move {
                match svc.present(&id).await {
                    Ok(p) => ok(StatusCode::OK, &p),
                    Err(e) => failure(e),
                }
            })
            .await,
    )
}

async fn respond(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ResponseRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return body_rejection(r),
    };
    let key = request_key(&Method::POST, &format!("/sessions/{id}/response"), &headers);
    let svc = st.service.clone();
    reply(
        st.idem
            .run(key, async move {
                match svc.respond(&id, req) {
                    Ok(r) => ok(StatusCode::OK, &r),
                    Err(e) => failure(e),
                }
            })
            .await,
    )
}

async fn report(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    reply(match st.service.report(&id) {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => failure(e),
    })
}

async fn trials_csv(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.service.session(&id) {
        Ok(s) => {
            let mut out = Vec::new();
            s.write_trials_csv(&mut out).expect("write to memory");
            ([(header::CONTENT_TYPE, "text/csv")], out).into_response()
        }
        Err(e) => reply(failure(e)),
    }
}

#[derive(Deserialize)]
struct ModeQuery {
    mode: Mode,
    #[serde(default)]
    alpha: Option<f64>,
}

async fn patterns(State(st): State<AppState>, q: Result<Query<ModeQuery>, QueryRejection>) -> Response {
    match q {
        Ok(Query(q)) => reply(ok(StatusCode::OK, &st.service.catalog(q.mode))),
        Err(r) => query_rejection(r),
    }
}

async fn analysis(State(st): State<AppState>, q: Result<Query<ModeQuery>, QueryRejection>) -> Response {
    let Query(q) = match q {
        Ok(q) => q,
        Err(r) => return query_rejection(r),
    };
    let alpha = q.alpha.unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return reply((StatusCode::UNPROCESSABLE_ENTITY, error_body("InvalidQuery", format!("alpha {alpha} outside (0, 1)"))));
    }
    reply(match st.service.analysis(q.mode, alpha) {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => failure(e),
    })
}

async fn device(State(st): State<AppState>) -> Response {
    reply(ok(StatusCode::OK, &st.service.device().snapshot()))
}

async fn stream(State(st): State<AppState>, ws: WebSocketUpgrade) -> Response {
    let rx = st.service.subscribe();
    ws.on_upgrade(move |socket| pump(socket, rx))
}

async fn pump(mut socket: WebSocket, mut rx: tokio::sync::broadcast::Receiver<crate::device::StreamEvent>) {
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    let text = serde_json::to_string(&ev).expect("serializable event");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                // a slow client skips ahead rather than stalling the device loop
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
