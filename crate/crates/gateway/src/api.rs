//! HTTP routes.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use drip_core::controller::Rejection;
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::control::Shared;
use crate::pins::{decode, PinError};

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/telemetry", get(get_telemetry))
        .route("/pin/{pin}", post(post_pin))
        .route("/events", get(get_events))
        .route("/sim/link", post(post_link))
        .layer(middleware::from_fn_with_state(shared.clone(), require_token))
        .with_state(shared)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

/// Browsers' event-stream clients cannot set headers, so the token is also
/// accepted as an `access_token` query parameter.
fn query_token(req: &Request) -> Option<String> {
    req.uri().query()?.split('&').find_map(|kv| {
        kv.strip_prefix("access_token=").map(str::to_string)
    })
}

async fn require_token(State(shared): State<Arc<Shared>>, req: Request, next: Next) -> Response {
    let ok = bearer(req.headers()) == Some(shared.token.as_str())
        || query_token(&req).as_deref() == Some(shared.token.as_str());
    if !ok {
        return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
    }
    next.run(req).await
}

async fn get_state(State(shared): State<Arc<Shared>>) -> Response {
    Json(&*shared.state()).into_response()
}

#[derive(Debug, Deserialize)]
struct Range {
    from: Option<u64>,
    to: Option<u64>,
}

async fn get_telemetry(State(shared): State<Arc<Shared>>, Query(range): Query<Range>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        shared.telemetry_range(range.from, range.to),
    )
        .into_response()
}

fn rejection_status(r: &Rejection) -> StatusCode {
    match r {
        Rejection::NotManual | Rejection::SensorFault => StatusCode::CONFLICT,
        Rejection::InvalidThreshold(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Rejection::Offline => StatusCode::SERVICE_UNAVAILABLE,
    }
}

async fn post_pin(State(shared): State<Arc<Shared>>, Path(pin): Path<String>, body: String) -> Response {
    let write = match decode(&pin, &body) {
        Ok(w) => w,
        Err(e @ PinError::UnknownPin(_)) => return error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    match shared.pin_write(write).await {
        Ok(Ok(cycle)) => Json(json!({ "pin": pin, "value": body.trim(), "applied_cycle": cycle })).into_response(),
        Ok(Err(rejection)) => error(rejection_status(&rejection), rejection.to_string()),
        Err(gone) => error(StatusCode::SERVICE_UNAVAILABLE, gone.to_string()),
    }
}

async fn post_link(State(shared): State<Arc<Shared>>, body: String) -> Response {
    let connected = match body.trim() {
        "1" => true,
        "0" => false,
        other => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("link value must be 0 or 1, got {other:?}")),
    };
    match shared.set_link(connected).await {
        Ok(cycle) => Json(json!({ "connected": connected, "applied_cycle": cycle })).into_response(),
        Err(gone) => error(StatusCode::SERVICE_UNAVAILABLE, gone.to_string()),
    }
}

async fn get_events(State(shared): State<Arc<Shared>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = shared.subscribe();
    let events = stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(ev) => Event::default()
                .id(ev.seq.to_string())
                .event(ev.name())
                .data(ev.data()),
            Err(RecvError::Lagged(missed)) => Event::default()
                .event("gap")
                .data(json!({ "missed": missed }).to_string()),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Sse::new(events.take_until(shared.closed())).keep_alive(KeepAlive::default())
}
