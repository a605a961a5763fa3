//! Loopback HTTP/JSON control API.
//!
//! Handlers never touch protocol state; each one queues a closure on the
//! protocol thread and answers from what it returns.

use std::path::PathBuf;
use std::time::Duration;

use adhoc::identity::Fingerprint;
use adhoc::node::NodeError;
use adhoc::presence::{Availability, Visibility};
use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::daemon::{Handle, Stopped};

/// Longest a `GET /api/events` request is held open.
pub const MAX_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        Self {
            status: StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            message: e.to_string(),
        }
    }
}

impl From<Stopped> for ApiError {
    fn from(e: Stopped) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(value: impl Serialize) -> ApiResult {
    Ok(Json(value).into_response())
}

fn created(value: impl Serialize) -> ApiResult {
    Ok((StatusCode::CREATED, Json(value)).into_response())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn fingerprint(s: &str) -> Result<Fingerprint, ApiError> {
    s.parse()
        .map_err(|_| ApiError::bad_request(format!("`{s}` is not a fingerprint")))
}

pub fn router(handle: Handle) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/presence", post(set_presence))
        .route("/api/roster", get(roster))
        .route("/api/venues", get(venues).post(create_or_join_venue))
        .route("/api/venues/{id}", get(venue))
        .route("/api/venues/{id}/invite", post(invite))
        .route("/api/venues/{id}/public", post(make_public))
        .route(
            "/api/venues/{id}/messages",
            get(messages).post(post_message),
        )
        .route("/api/notes", get(notes).post(leave_note))
        .route("/api/shares", get(shares).post(add_share))
        .route("/api/search", post(search))
        .route("/api/search/{id}/hits", get(hits))
        .route("/api/transfers", get(transfers).post(fetch))
        .route("/api/transfers/{id}", get(transfer))
        .route("/api/events", get(events))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                message: "no such endpoint".into(),
            }
        })
        .with_state(handle)
}

async fn status(State(h): State<Handle>) -> ApiResult {
    let v = h
        .call(|n, io| {
            json!({
                "fingerprint": n.fingerprint(),
                "subject": n.identity().subject(),
                "addr": io.local_addr(),
                "lobby_members": n.lobby().view().map_or(0, |v| v.len()),
                "last_event_seq": n.last_event_seq(),
                "stats": n.stats(),
            })
        })
        .await?;
    ok(v)
}

#[derive(Deserialize)]
struct PresenceReq {
    availability: Availability,
    location: Option<String>,
}

async fn set_presence(State(h): State<Handle>, body: Bytes) -> ApiResult {
    let req: PresenceReq = parse(&body)?;
    h.call(move |n, io| n.set_presence(io, req.availability, req.location))
        .await??;
    ok(json!({ "availability": req.availability }))
}

async fn roster(State(h): State<Handle>) -> ApiResult {
    ok(h.call(|n, _| n.roster()).await?)
}

async fn venues(State(h): State<Handle>) -> ApiResult {
    ok(h.call(|n, _| n.venues()).await?)
}

async fn venue(State(h): State<Handle>, Path(id): Path<String>) -> ApiResult {
    ok(h.call(move |n, _| n.venue(&id)).await??)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VenueReq {
    Join {
        venue_id: String,
    },
    Create {
        name: String,
        visibility: Option<Visibility>,
    },
}

/// `{"name", "visibility"}` creates a venue; `{"venue_id"}` joins one.
async fn create_or_join_venue(State(h): State<Handle>, body: Bytes) -> ApiResult {
    match parse::<VenueReq>(&body)? {
        VenueReq::Create { name, visibility } => {
            let vis = visibility.unwrap_or(Visibility::Private);
            created(
                h.call(move |n, io| n.create_venue(io, &name, vis))
                    .await??,
            )
        }
        VenueReq::Join { venue_id } => {
            ok(h.call(move |n, io| n.join_venue(io, &venue_id)).await??)
        }
    }
}

#[derive(Deserialize)]
struct InviteReq {
    fingerprint: String,
}

async fn invite(State(h): State<Handle>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: InviteReq = parse(&body)?;
    let fp = fingerprint(&req.fingerprint)?;
    ok(h.call(move |n, io| n.invite(io, &id, fp)).await??)
}

async fn make_public(State(h): State<Handle>, Path(id): Path<String>) -> ApiResult {
    ok(h.call(move |n, io| n.make_public(io, &id)).await??)
}

async fn messages(State(h): State<Handle>, Path(id): Path<String>) -> ApiResult {
    ok(h.call(move |n, _| n.messages(&id)).await??)
}

#[derive(Deserialize)]
struct PostReq {
    body: String,
}

async fn post_message(State(h): State<Handle>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: PostReq = parse(&body)?;
    created(
        h.call(move |n, io| n.post_message(io, &id, &req.body))
            .await??,
    )
}

async fn notes(State(h): State<Handle>) -> ApiResult {
    ok(h.call(|n, _| n.notes()).await?)
}

#[derive(Deserialize)]
struct NoteReq {
    recipient: String,
    body: String,
}

async fn leave_note(State(h): State<Handle>, body: Bytes) -> ApiResult {
    let req: NoteReq = parse(&body)?;
    let to = fingerprint(&req.recipient)?;
    created(
        h.call(move |n, io| n.leave_note(io, to, &req.body))
            .await??,
    )
}

async fn shares(State(h): State<Handle>) -> ApiResult {
    ok(h.call(|n, _| n.shares()).await?)
}

#[derive(Deserialize)]
struct ShareReq {
    path: PathBuf,
    #[serde(default)]
    tags: Vec<String>,
}

async fn add_share(State(h): State<Handle>, body: Bytes) -> ApiResult {
    let req: ShareReq = parse(&body)?;
    if !req.path.is_absolute() {
        return Err(ApiError::bad_request("path must be absolute"));
    }
    if !req.path.is_file() {
        return Err(ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("{} is not a regular file", req.path.display()),
        });
    }
    created(
        h.call(move |n, io| n.add_share(io, &req.path, &req.tags))
            .await??,
    )
}

#[derive(Deserialize)]
struct SearchReq {
    q: String,
}

async fn search(State(h): State<Handle>, body: Bytes) -> ApiResult {
    let req: SearchReq = parse(&body)?;
    let id = h.call(move |n, io| n.search(io, &req.q)).await??;
    created(json!({ "query_id": id }))
}

async fn hits(State(h): State<Handle>, Path(id): Path<String>) -> ApiResult {
    ok(h.call(move |n, _| n.hits(&id)).await??)
}

async fn transfers(State(h): State<Handle>) -> ApiResult {
    ok(h.call(|n, _| n.transfers()).await?)
}

async fn transfer(State(h): State<Handle>, Path(id): Path<u64>) -> ApiResult {
    let job = h.call(move |n, _| n.transfer(id).cloned()).await?;
    match job {
        Some(j) => ok(j),
        None => Err(NodeError::NotFound(format!("no transfer {id}")).into()),
    }
}

#[derive(Deserialize)]
struct FetchReq {
    responder: String,
    entry_id: String,
    dest: Option<PathBuf>,
}

async fn fetch(State(h): State<Handle>, body: Bytes) -> ApiResult {
    let req: FetchReq = parse(&body)?;
    let responder = fingerprint(&req.responder)?;
    if req.dest.as_ref().is_some_and(|d| !d.is_absolute()) {
        return Err(ApiError::bad_request("dest must be absolute"));
    }
    created(
        h.call(move |n, io| n.fetch(io, responder, &req.entry_id, req.dest))
            .await??,
    )
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    wait_ms: Option<u64>,
}

/// Long poll: answers at once when events after `since` exist, otherwise
/// when the next one arrives or the wait expires (empty list).
async fn events(
    State(h): State<Handle>,
    q: Result<Query<EventsQuery>, QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let since = q.since;
    let evs = h.call(move |n, _| n.events_since(since)).await?;
    if !evs.is_empty() {
        return ok(evs);
    }
    let wait = q
        .wait_ms
        .map(Duration::from_millis)
        .unwrap_or(MAX_WAIT)
        .min(MAX_WAIT);
    h.wait_events(since, wait).await;
    let evs: Vec<Value> = h
        .call(move |n, _| {
            n.events_since(since)
                .into_iter()
                .map(|e| serde_json::to_value(e).expect("events serialize"))
                .collect()
        })
        .await?;
    ok(evs)
}
