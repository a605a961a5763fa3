//! Local share index, query matching, and the ranged item transfer
//! protocol spoken over point-to-point sessions.
//!
//! Requests and responses are minimal HTTP/1.1 messages:
//! `GET /item/<64-hex> HTTP/1.1` with `Range: bytes=<from>-<to>`, answered
//! by `206` with `Content-Range` or by `403`/`404`/`410`. A range starting
//! at or past the end of the file gets an empty `206` with `X-Eof: 1`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use netsim::{EndpointAddr, SimTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::identity::Fingerprint;

pub const CHUNK_SIZE: u64 = 64 * 1024;
pub const PIPELINE_DEPTH: usize = 4;
pub const MAX_RETRIES: u32 = 3;
pub const MAX_ACTIVE_JOBS: usize = 4;
/// Retry delays after the first, second and third failed attempt.
pub const BACKOFF_MS: [SimTime; 3] = [1_000, 2_000, 4_000];

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Query terms: tokenized, deduplicated, in first-seen order.
pub fn normalize_query(q: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(q)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Every term is a substring of at least one token.
pub fn tokens_match(tokens: &BTreeSet<String>, terms: &[String]) -> bool {
    terms
        .iter()
        .all(|term| tokens.iter().any(|tok| tok.contains(term.as_str())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareEntry {
    pub entry_id: String,
    pub path: PathBuf,
    pub name: String,
    pub size: u64,
    pub tags: BTreeSet<String>,
    pub added: u64,
    #[serde(default)]
    pub mtime_ms: u64,
}

impl ShareEntry {
    pub fn tokens(&self) -> BTreeSet<String> {
        let mut t: BTreeSet<String> = tokenize(&self.name).into_iter().collect();
        t.extend(self.tags.iter().map(|s| s.to_lowercase()));
        t
    }

    pub fn hit(&self) -> HitEntry {
        HitEntry {
            entry_id: self.entry_id.clone(),
            name: self.name.clone(),
            size: self.size,
            tags: self.tags.clone(),
        }
    }
}

fn mtime_ms(meta: &fs::Metadata) -> u64 {
    meta.modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_millis() as u64)
}

/// Hex SHA-256 of a file's bytes and its length.
pub fn hash_file(path: &Path) -> io::Result<(String, u64)> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(h.finalize()), total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    Stale,
    Missing,
}

/// Shared entries keyed by content hash, persisted as a JSON-lines
/// manifest (last line per entry wins).
#[derive(Debug, Default)]
pub struct ShareIndex {
    manifest: Option<PathBuf>,
    entries: BTreeMap<String, ShareEntry>,
    stale: BTreeSet<String>,
}

impl ShareIndex {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(manifest: &Path) -> io::Result<Self> {
        let mut index = Self::default();
        if manifest.exists() {
            for (n, line) in BufReader::new(File::open(manifest)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ShareEntry>(&line) {
                    Ok(e) => {
                        index.entries.insert(e.entry_id.clone(), e);
                    }
                    Err(e) => {
                        tracing::warn!(line = n + 1, error = %e, "skipping corrupt manifest line")
                    }
                }
            }
        }
        index.manifest = Some(manifest.to_path_buf());
        Ok(index)
    }

    fn persist(&self, entry: &ShareEntry) -> io::Result<()> {
        if let Some(path) = &self.manifest {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(entry).expect("entry serializes");
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// Hashes and indexes a file. Sharing the same content again merges tags.
    pub fn add_share(&mut self, path: &Path, tags: &[String], now: u64) -> io::Result<ShareEntry> {
        let meta = fs::metadata(path)?;
        if !meta.is_file() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "not a regular file",
            ));
        }
        let (entry_id, size) = hash_file(path)?;
        let tags: BTreeSet<String> = tags
            .iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        let entry = match self.entries.get(&entry_id) {
            Some(old) => {
                let mut e = old.clone();
                e.tags.extend(tags);
                e.path = path.to_path_buf();
                e.mtime_ms = mtime_ms(&meta);
                e
            }
            None => ShareEntry {
                entry_id: entry_id.clone(),
                path: path.to_path_buf(),
                name: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                size,
                tags,
                added: now,
                mtime_ms: mtime_ms(&meta),
            },
        };
        self.persist(&entry)?;
        self.stale.remove(&entry_id);
        self.entries.insert(entry_id, entry.clone());
        Ok(entry)
    }

    /// Indexes an entry without touching the file system.
    pub fn insert(&mut self, entry: ShareEntry) {
        self.entries.insert(entry.entry_id.clone(), entry);
    }

    pub fn get(&self, entry_id: &str) -> Option<&ShareEntry> {
        self.entries.get(entry_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ShareEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose tokens contain every term, sorted by name.
    pub fn match_query(&self, terms: &[String]) -> Vec<&ShareEntry> {
        let mut out: Vec<&ShareEntry> = self
            .entries
            .values()
            .filter(|e| tokens_match(&e.tokens(), terms))
            .collect();
        out.sort_by(|a, b| {
            a.name
                .cmp(&b.name)
                .then_with(|| a.entry_id.cmp(&b.entry_id))
        });
        out
    }

    /// Re-hashes the file if its size or mtime moved since indexing.
    pub fn check_fresh(&mut self, entry_id: &str) -> Freshness {
        if self.stale.contains(entry_id) {
            return Freshness::Stale;
        }
        let Some(entry) = self.entries.get(entry_id) else {
            return Freshness::Missing;
        };
        let Ok(meta) = fs::metadata(&entry.path) else {
            return Freshness::Stale;
        };
        if meta.len() == entry.size && mtime_ms(&meta) == entry.mtime_ms {
            return Freshness::Fresh;
        }
        match hash_file(&entry.path) {
            Ok((h, _)) if h == entry_id => {
                let mut e = entry.clone();
                e.mtime_ms = mtime_ms(&meta);
                let _ = self.persist(&e);
                self.entries.insert(e.entry_id.clone(), e);
                Freshness::Fresh
            }
            _ => {
                tracing::warn!(entry = %entry_id, "shared file changed since indexing");
                self.stale.insert(entry_id.to_string());
                Freshness::Stale
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub originator: Fingerprint,
    pub terms: Vec<String>,
    pub issued: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HitEntry {
    pub entry_id: String,
    pub name: String,
    pub size: u64,
    pub tags: BTreeSet<String>,
}

/// Where and from whom an item can be fetched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Locator {
    pub addr: EndpointAddr,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryHit {
    pub query_id: String,
    pub responder: Fingerprint,
    pub locator: Locator,
    pub entries: Vec<HitEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("malformed HTTP message")]
    Malformed,
    #[error("unsupported request")]
    Unsupported,
}

pub fn format_request(entry_id: &str, from: u64, to: u64) -> Vec<u8> {
    format!("GET /item/{entry_id} HTTP/1.1\r\nHost: peer\r\nRange: bytes={from}-{to}\r\n\r\n")
        .into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRequest {
    pub entry_id: String,
    pub from: u64,
    pub to: u64,
}

fn is_entry_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

pub fn parse_request(bytes: &[u8]) -> Result<ItemRequest, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; 16];
    let mut req = httparse::Request::new(&mut headers);
    match req.parse(bytes) {
        Ok(httparse::Status::Complete(_)) => {}
        _ => return Err(HttpError::Malformed),
    }
    if req.method != Some("GET") {
        return Err(HttpError::Unsupported);
    }
    let entry_id = req
        .path
        .and_then(|p| p.strip_prefix("/item/"))
        .filter(|id| is_entry_id(id))
        .ok_or(HttpError::Unsupported)?
        .to_string();
    let range = req
        .headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case("range"))
        .and_then(|h| std::str::from_utf8(h.value).ok())
        .and_then(|v| v.trim().strip_prefix("bytes="))
        .ok_or(HttpError::Malformed)?;
    let (a, b) = range.split_once('-').ok_or(HttpError::Malformed)?;
    let from: u64 = a.trim().parse().map_err(|_| HttpError::Malformed)?;
    let to: u64 = b.trim().parse().map_err(|_| HttpError::Malformed)?;
    if to < from {
        return Err(HttpError::Malformed);
    }
    Ok(ItemRequest { entry_id, from, to })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemResponse {
    pub status: u16,
    pub from: u64,
    pub total: u64,
    pub eof: bool,
    pub body: Vec<u8>,
}

fn status_response(code: u16, reason: &str) -> Vec<u8> {
    format!("HTTP/1.1 {code} {reason}\r\nContent-Length: 0\r\n\r\n").into_bytes()
}

pub fn parse_response(bytes: &[u8]) -> Result<ItemResponse, HttpError> {
    let mut headers = [httparse::EMPTY_HEADER; 16];
    let mut resp = httparse::Response::new(&mut headers);
    let head_len = match resp.parse(bytes) {
        Ok(httparse::Status::Complete(n)) => n,
        _ => return Err(HttpError::Malformed),
    };
    let status = resp.code.ok_or(HttpError::Malformed)?;
    let header = |name: &str| {
        resp.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .and_then(|h| std::str::from_utf8(h.value).ok())
            .map(str::trim)
    };
    let body = bytes[head_len..].to_vec();
    let len: usize = header("content-length")
        .and_then(|v| v.parse().ok())
        .ok_or(HttpError::Malformed)?;
    if len != body.len() {
        return Err(HttpError::Malformed);
    }
    let eof = header("x-eof") == Some("1");
    let (from, total) = if status == 206 {
        let cr = header("content-range")
            .and_then(|v| v.strip_prefix("bytes "))
            .ok_or(HttpError::Malformed)?;
        let (range, total) = cr.split_once('/').ok_or(HttpError::Malformed)?;
        let total: u64 = total.parse().map_err(|_| HttpError::Malformed)?;
        let from = if range == "*" {
            total
        } else {
            let (a, b) = range.split_once('-').ok_or(HttpError::Malformed)?;
            let a: u64 = a.parse().map_err(|_| HttpError::Malformed)?;
            let b: u64 = b.parse().map_err(|_| HttpError::Malformed)?;
            if b < a || b - a + 1 != body.len() as u64 {
                return Err(HttpError::Malformed);
            }
            a
        };
        (from, total)
    } else {
        (0, 0)
    };
    Ok(ItemResponse {
        status,
        from,
        total,
        eof,
        body,
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ServeStats {
    pub requests: u64,
    pub bytes_served: u64,
    pub denied: u64,
    pub not_found: u64,
    pub stale: u64,
    pub bad_requests: u64,
    /// Body bytes written per (requester, entry).
    #[serde(skip)]
    pub per_pair: BTreeMap<(Fingerprint, String), u64>,
    /// Every (requester, entry) that was refused by authorization.
    #[serde(skip)]
    pub denied_pairs: BTreeSet<(Fingerprint, String)>,
}

fn read_range(path: &Path, from: u64, len: u64) -> io::Result<Vec<u8>> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(from))?;
    let mut buf = vec![0u8; len as usize];
    f.read_exact(&mut buf)?;
    Ok(buf)
}

/// Answers one item request. `allowed` is the authorization decision for
/// the requester on an entry; denied requests never read the file.
pub fn serve(
    index: &mut ShareIndex,
    request: &[u8],
    requester: &Fingerprint,
    allowed: impl Fn(&ShareEntry) -> bool,
    stats: &mut ServeStats,
) -> Vec<u8> {
    stats.requests += 1;
    let Ok(req) = parse_request(request) else {
        stats.bad_requests += 1;
        return status_response(400, "Bad Request");
    };
    let Some(entry) = index.get(&req.entry_id).cloned() else {
        stats.not_found += 1;
        return status_response(404, "Not Found");
    };
    if !allowed(&entry) {
        stats.denied += 1;
        stats.denied_pairs.insert((*requester, entry.entry_id));
        return status_response(403, "Forbidden");
    }
    if index.check_fresh(&req.entry_id) != Freshness::Fresh {
        stats.stale += 1;
        return status_response(410, "Gone");
    }
    if req.from >= entry.size {
        return format!(
            "HTTP/1.1 206 Partial Content\r\nContent-Range: bytes */{}\r\nContent-Length: 0\r\nX-Eof: 1\r\n\r\n",
            entry.size
        )
        .into_bytes();
    }
    let to = req.to.min(entry.size - 1);
    let body = match read_range(&entry.path, req.from, to - req.from + 1) {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(entry = %entry.entry_id, error = %e, "read failed while serving");
            stats.stale += 1;
            return status_response(410, "Gone");
        }
    };
    stats.bytes_served += body.len() as u64;
    *stats
        .per_pair
        .entry((*requester, entry.entry_id.clone()))
        .or_default() += body.len() as u64;
    let mut out = format!(
        "HTTP/1.1 206 Partial Content\r\nContent-Range: bytes {}-{}/{}\r\nContent-Length: {}\r\n{}\r\n",
        req.from,
        to,
        entry.size,
        body.len(),
        if to + 1 == entry.size { "X-Eof: 1\r\n" } else { "" }
    )
    .into_bytes();
    out.extend_from_slice(&body);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferState {
    Queued,
    Connecting,
    Transferring,
    Verifying,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailReason {
    Connect,
    Denied,
    NotFound,
    StaleEntry,
    HashMismatch,
    Io,
}

impl FailReason {
    pub fn retryable(self) -> bool {
        matches!(self, FailReason::Connect)
    }
}

/// A download of one entry from one source.
///
/// Received chunks are written in place into `<dest>.part`; a retry asks
/// only for chunks not yet held, so an interrupted transfer resumes where
/// it stopped.
#[derive(Debug, Clone, Serialize)]
pub struct TransferJob {
    pub job_id: u64,
    pub entry_id: String,
    pub name: String,
    pub size: u64,
    pub source: Locator,
    pub dest: PathBuf,
    pub state: TransferState,
    pub reason: Option<FailReason>,
    pub bytes_done: u64,
    /// Body bytes received over all attempts, duplicates included.
    pub bytes_received: u64,
    pub attempts: u32,
    pub started: Option<u64>,
    pub finished: Option<u64>,
    #[serde(skip)]
    have: BTreeSet<u64>,
    #[serde(skip)]
    outstanding: VecDeque<u64>,
    #[serde(skip)]
    pub retry_at: Option<SimTime>,
}

/// What a response did to a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Chunk,
    Complete,
    Failed(FailReason),
}

impl TransferJob {
    pub fn new(job_id: u64, hit: &HitEntry, source: Locator, dest: PathBuf) -> Self {
        Self {
            job_id,
            entry_id: hit.entry_id.clone(),
            name: hit.name.clone(),
            size: hit.size,
            source,
            dest,
            state: TransferState::Queued,
            reason: None,
            bytes_done: 0,
            bytes_received: 0,
            attempts: 0,
            started: None,
            finished: None,
            have: BTreeSet::new(),
            outstanding: VecDeque::new(),
            retry_at: None,
        }
    }

    pub fn chunk_count(&self) -> u64 {
        self.size.div_ceil(CHUNK_SIZE).max(1)
    }

    fn chunk_range(&self, i: u64) -> (u64, u64) {
        let from = i * CHUNK_SIZE;
        let to = if self.size == 0 {
            CHUNK_SIZE - 1
        } else {
            ((i + 1) * CHUNK_SIZE).min(self.size) - 1
        };
        (from, to)
    }

    fn chunk_len(&self, i: u64) -> u64 {
        if self.size == 0 {
            0
        } else {
            ((i + 1) * CHUNK_SIZE).min(self.size) - i * CHUNK_SIZE
        }
    }

    pub fn part_path(&self) -> PathBuf {
        let mut p = self.dest.clone().into_os_string();
        p.push(".part");
        PathBuf::from(p)
    }

    pub fn is_active(&self) -> bool {
        matches!(
            self.state,
            TransferState::Connecting | TransferState::Transferring | TransferState::Verifying
        )
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, TransferState::Done)
            || (self.state == TransferState::Failed && self.retry_at.is_none())
    }

    /// Starts an attempt; the caller opens the session.
    pub fn begin_attempt(&mut self, now: u64) {
        self.attempts += 1;
        self.state = TransferState::Connecting;
        self.reason = None;
        self.retry_at = None;
        self.outstanding.clear();
        self.started.get_or_insert(now);
    }

    /// Requests to send now to keep the pipeline full.
    pub fn next_requests(&mut self) -> Vec<Vec<u8>> {
        if self.state == TransferState::Connecting {
            self.state = TransferState::Transferring;
        }
        let mut out = Vec::new();
        let mut i = 0;
        while self.outstanding.len() < PIPELINE_DEPTH && i < self.chunk_count() {
            if !self.have.contains(&i) && !self.outstanding.contains(&i) {
                let (from, to) = self.chunk_range(i);
                out.push(format_request(&self.entry_id, from, to));
                self.outstanding.push_back(i);
            }
            i += 1;
        }
        out
    }

    /// Applies one response, writing its body into the part file.
    pub fn on_response(&mut self, bytes: &[u8]) -> Progress {
        let Some(i) = self.outstanding.pop_front() else {
            return Progress::Failed(FailReason::Io);
        };
        let resp = match parse_response(bytes) {
            Ok(r) => r,
            Err(_) => return Progress::Failed(FailReason::Io),
        };
        match resp.status {
            206 => {}
            403 => return Progress::Failed(FailReason::Denied),
            404 => return Progress::Failed(FailReason::NotFound),
            410 => return Progress::Failed(FailReason::StaleEntry),
            _ => return Progress::Failed(FailReason::Io),
        }
        let (from, _) = self.chunk_range(i);
        self.bytes_received += resp.body.len() as u64;
        if resp.total != self.size
            || resp.body.len() as u64 != self.chunk_len(i)
            || (resp.from != from && self.size > 0)
        {
            return Progress::Failed(FailReason::HashMismatch);
        }
        if let Err(e) = self.write_chunk(from, &resp.body) {
            tracing::warn!(job = self.job_id, error = %e, "cannot write partial download");
            return Progress::Failed(FailReason::Io);
        }
        if self.have.insert(i) {
            self.bytes_done += resp.body.len() as u64;
        }
        if self.have.len() as u64 == self.chunk_count() {
            Progress::Complete
        } else {
            Progress::Chunk
        }
    }

    fn write_chunk(&self, from: u64, body: &[u8]) -> io::Result<()> {
        if let Some(parent) = self.dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(self.part_path())?;
        f.seek(SeekFrom::Start(from))?;
        f.write_all(body)
    }

    /// Hashes the assembled file; moves it into place only on a match.
    pub fn verify(&mut self, now: u64) {
        self.state = TransferState::Verifying;
        let part = self.part_path();
        if self.size == 0 && !part.exists() {
            if let Err(e) = File::create(&part) {
                tracing::warn!(job = self.job_id, error = %e, "cannot create empty download");
                self.fail(FailReason::Io, now);
                return;
            }
        }
        match hash_file(&part) {
            Ok((h, len)) if h == self.entry_id && len == self.size => {
                match fs::rename(&part, &self.dest) {
                    Ok(()) => {
                        self.state = TransferState::Done;
                        self.finished = Some(now);
                    }
                    Err(_) => self.fail(FailReason::Io, now),
                }
            }
            Ok(_) => {
                // Throw the bytes away so a retry cannot reuse them.
                let _ = fs::remove_file(&part);
                self.have.clear();
                self.bytes_done = 0;
                self.fail(FailReason::HashMismatch, now);
            }
            Err(_) => self.fail(FailReason::Io, now),
        }
    }

    /// Records a failed attempt. Connection failures are retried with
    /// backoff while attempts remain; everything else is final.
    pub fn fail(&mut self, reason: FailReason, now: u64) {
        self.state = TransferState::Failed;
        self.reason = Some(reason);
        self.outstanding.clear();
        if reason.retryable() && self.attempts <= MAX_RETRIES {
            self.retry_at =
                Some(now + BACKOFF_MS[(self.attempts as usize - 1).min(BACKOFF_MS.len() - 1)]);
        } else {
            self.retry_at = None;
            self.finished = Some(now);
        }
    }

    /// Moves a failed job whose backoff elapsed back to QUEUED.
    pub fn requeue_if_due(&mut self, now: u64) -> bool {
        if self.state == TransferState::Failed && self.retry_at.is_some_and(|t| now >= t) {
            self.state = TransferState::Queued;
            self.retry_at = None;
            true
        } else {
            false
        }
    }
}
