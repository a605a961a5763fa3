use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

/// Command-line client for a running peerd.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Control API base URL.
    #[arg(long, env = "PEERCTL_API", default_value = "http://127.0.0.1:7777")]
    api: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// This peer's fingerprint, address and counters.
    Status,
    /// Users seen in the lobby.
    Roster,
    /// Lists venues, or creates, joins, invites to or opens one.
    Venues {
        #[command(subcommand)]
        op: Option<VenueOp>,
    },
    /// Posts a chat message to a venue.
    Say { venue: String, body: String },
    /// Leaves a note for a user, or lists notes with no arguments.
    Note {
        recipient: Option<String>,
        body: Option<String>,
    },
    /// Shares a file, or lists shares with no path.
    Share {
        path: Option<PathBuf>,
        #[arg(long = "tag")]
        tags: Vec<String>,
    },
    /// Searches the lobby and prints the hits that arrive.
    Search {
        query: String,
        #[arg(long, default_value_t = 2000)]
        wait_ms: u64,
    },
    /// Fetches an entry from a responder.
    Get {
        responder: String,
        entry_id: String,
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Block until the transfer finishes.
        #[arg(long)]
        wait: bool,
    },
    /// Transfer jobs.
    Transfers,
    /// Control events after a sequence number.
    Events {
        #[arg(long, default_value_t = 0)]
        since: u64,
        #[arg(long, default_value_t = 0)]
        wait_ms: u64,
    },
}

#[derive(Subcommand)]
enum VenueOp {
    Create {
        name: String,
        #[arg(long)]
        public: bool,
    },
    Join {
        venue_id: String,
    },
    Invite {
        venue_id: String,
        fingerprint: String,
    },
    Public {
        venue_id: String,
    },
    Messages {
        venue_id: String,
    },
}

struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    fn request(
        &self,
        method: reqwest::Method,
        path: &str,
        body: Option<Value>,
    ) -> anyhow::Result<Value> {
        let url = format!("{}{}", self.base.trim_end_matches('/'), path);
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().with_context(|| format!("cannot reach {url}"))?;
        let status = resp.status();
        let value: Value = resp.json().unwrap_or(Value::Null);
        if !status.is_success() {
            let msg = value
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("request failed");
            bail!("{} {msg}", status.as_u16());
        }
        Ok(value)
    }

    fn get(&self, path: &str) -> anyhow::Result<Value> {
        self.request(reqwest::Method::GET, path, None)
    }

    fn post(&self, path: &str, body: Value) -> anyhow::Result<Value> {
        self.request(reqwest::Method::POST, path, Some(body))
    }
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json prints"));
}

fn main() -> std::process::ExitCode {
    match run(Args::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("peerctl: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> anyhow::Result<()> {
    let c = Client {
        base: args.api,
        http: reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(40))
            .build()?,
    };
    let out = match args.cmd {
        Cmd::Status => c.get("/api/status")?,
        Cmd::Roster => c.get("/api/roster")?,
        Cmd::Venues { op: None } => c.get("/api/venues")?,
        Cmd::Venues { op: Some(op) } => match op {
            VenueOp::Create { name, public } => {
                let vis = if public { "PUBLIC" } else { "PRIVATE" };
                c.post("/api/venues", json!({ "name": name, "visibility": vis }))?
            }
            VenueOp::Join { venue_id } => c.post("/api/venues", json!({ "venue_id": venue_id }))?,
            VenueOp::Invite {
                venue_id,
                fingerprint,
            } => c.post(
                &format!("/api/venues/{venue_id}/invite"),
                json!({ "fingerprint": fingerprint }),
            )?,
            VenueOp::Public { venue_id } => {
                c.post(&format!("/api/venues/{venue_id}/public"), json!({}))?
            }
            VenueOp::Messages { venue_id } => c.get(&format!("/api/venues/{venue_id}/messages"))?,
        },
        Cmd::Say { venue, body } => c.post(
            &format!("/api/venues/{venue}/messages"),
            json!({ "body": body }),
        )?,
        Cmd::Note {
            recipient: None, ..
        } => c.get("/api/notes")?,
        Cmd::Note {
            recipient: Some(to),
            body: Some(body),
        } => c.post("/api/notes", json!({ "recipient": to, "body": body }))?,
        Cmd::Note { body: None, .. } => bail!("a note needs a body"),
        Cmd::Share { path: None, .. } => c.get("/api/shares")?,
        Cmd::Share {
            path: Some(p),
            tags,
        } => {
            let p = std::fs::canonicalize(&p).with_context(|| p.display().to_string())?;
            c.post("/api/shares", json!({ "path": p, "tags": tags }))?
        }
        Cmd::Search { query, wait_ms } => {
            let r = c.post("/api/search", json!({ "q": query }))?;
            let id = r["query_id"]
                .as_str()
                .context("no query id in reply")?
                .to_string();
            std::thread::sleep(Duration::from_millis(wait_ms));
            let hits = c.get(&format!("/api/search/{id}/hits"))?;
            json!({ "query_id": id, "hits": hits })
        }
        Cmd::Get {
            responder,
            entry_id,
            dest,
            wait,
        } => {
            let dest = match dest {
                Some(d) if d.is_relative() => Some(std::env::current_dir()?.join(d)),
                d => d,
            };
            let job = c.post(
                "/api/transfers",
                json!({ "responder": responder, "entry_id": entry_id, "dest": dest }),
            )?;
            if wait {
                wait_for_transfer(&c, job["job_id"].as_u64().context("no job id in reply")?)?
            } else {
                job
            }
        }
        Cmd::Transfers => c.get("/api/transfers")?,
        Cmd::Events { since, wait_ms } => {
            c.get(&format!("/api/events?since={since}&wait_ms={wait_ms}"))?
        }
    };
    print(&out);
    Ok(())
}

fn wait_for_transfer(c: &Client, job_id: u64) -> anyhow::Result<Value> {
    let start = Instant::now();
    loop {
        let job = c.get(&format!("/api/transfers/{job_id}"))?;
        match job["state"].as_str() {
            Some("DONE") => return Ok(job),
            Some("FAILED") => bail!("transfer failed: {}", job["reason"]),
            _ => {}
        }
        if start.elapsed() > Duration::from_secs(600) {
            bail!("transfer did not finish in 10 minutes");
        }
        std::thread::sleep(Duration::from_millis(250));
    }
}
