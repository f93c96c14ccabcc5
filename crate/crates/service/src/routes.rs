//! HTTP routes. Every body is parsed by hand so that any unreadable body
//! maps to 422 rather than axum's per-rejection codes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::extract::rejection::QueryRejection;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use coanno_core::state::Action;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Result, ServiceError};
use crate::image::{find_image, render_bmp};
use crate::session::SessionOptions;
use crate::snapshot::DEFAULT_CANDIDATES;
use crate::Service;

type AppState = State<Arc<Service>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub image_id: String,
    #[serde(default)]
    pub options: SessionOptions,
}

#[derive(Debug, Deserialize)]
pub struct CandidateQuery {
    pub x: u32,
    pub y: u32,
    pub limit: Option<usize>,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Malformed(e.to_string()))
}

async fn create(State(svc): AppState, body: Bytes) -> Result<impl IntoResponse> {
    let req: CreateRequest = parse(&body)?;
    let view = svc.create_session(&req.image_id, req.options).await?;
    Ok((axum::http::StatusCode::CREATED, Json(view)))
}

async fn list(State(svc): AppState) -> impl IntoResponse {
    Json(serde_json::json!({ "sessions": svc.session_ids() }))
}

async fn get_state(State(svc): AppState, Path(id): Path<String>) -> Result<impl IntoResponse> {
    Ok(Json(svc.get_state(&id).await?))
}

async fn post_action(State(svc): AppState, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse> {
    let action: Action = parse(&body)?;
    Ok(Json(svc.post_action(&id, action).await?))
}

async fn undo(State(svc): AppState, Path(id): Path<String>) -> Result<impl IntoResponse> {
    Ok(Json(svc.undo(&id).await?))
}

async fn candidates(
    State(svc): AppState,
    Path(id): Path<String>,
    query: std::result::Result<Query<CandidateQuery>, QueryRejection>,
) -> Result<impl IntoResponse> {
    let Query(q) = query.map_err(|e| ServiceError::Malformed(e.body_text()))?;
    let list = svc.candidates(&id, q.x, q.y, q.limit.unwrap_or(DEFAULT_CANDIDATES)).await?;
    Ok(Json(serde_json::json!({ "candidates": list })))
}

async fn image(State(svc): AppState, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let data = svc.scene_data(&id)?;
    if let Some(dir) = svc.images_dir() {
        if let Some((bytes, mime)) = find_image(dir, &id).map_err(|e| ServiceError::io(dir, e))? {
            return Ok(([(header::CONTENT_TYPE, mime)], bytes));
        }
    }
    Ok(([(header::CONTENT_TYPE, "image/bmp")], render_bmp(&data.gt)))
}

async fn images(State(svc): AppState) -> impl IntoResponse {
    Json(serde_json::json!({ "images": svc.image_ids().collect::<Vec<_>>() }))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/actions", post(post_action))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/images", get(images))
        .route("/images/{id}", get(image))
        .with_state(service)
}
