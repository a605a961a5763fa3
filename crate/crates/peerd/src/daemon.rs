//! The protocol thread. It alone owns the [`Node`] and the transport;
//! everything else talks to it by queueing closures on a channel.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use adhoc::identity::{new_identity, Identity, IdentityCert, TrustStore};
use adhoc::node::{Authz, Node, NodeConfig};
use netsim::{SimTime, Transport};
use thiserror::Error;
use tokio::sync::{oneshot, watch};

use crate::config::PeerConfig;
use crate::transport::{unix_ms, RealTransport};

const TICK_MS: SimTime = 10;
const TRUST_SAVE_MS: SimTime = 30_000;
const DATAGRAM_BURST: usize = 256;

#[derive(Debug, Error)]
pub enum StartError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("identity: {0}")]
    Identity(String),
    #[error("setup: {0}")]
    Setup(String),
}

#[derive(Debug, Error)]
#[error("daemon has stopped")]
pub struct Stopped;

type Job = Box<dyn FnOnce(&mut Node, &mut dyn Transport) + Send>;

/// Cheap to clone; every clone talks to the same protocol thread.
#[derive(Clone)]
pub struct Handle {
    jobs: Sender<Job>,
    seq: watch::Receiver<u64>,
}

impl Handle {
    /// Runs `f` on the protocol thread and returns its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, Stopped>
    where
        R: Send + 'static,
        F: FnOnce(&mut Node, &mut dyn Transport) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |n, io| {
                let _ = tx.send(f(n, io));
            }))
            .map_err(|_| Stopped)?;
        rx.await.map_err(|_| Stopped)
    }

    /// Waits until the event log moves past `seq` or `timeout` passes.
    pub async fn wait_events(&self, seq: u64, timeout: Duration) {
        let mut rx = self.seq.clone();
        let _ = tokio::time::timeout(timeout, rx.wait_for(|s| *s > seq)).await;
    }
}

pub struct Daemon {
    handle: Handle,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    pub udp_addr: std::net::SocketAddr,
}

impl Daemon {
    /// Loads identity and trust, binds sockets, indexes shares and joins
    /// the lobby. Returns once the protocol thread is running.
    pub fn start(cfg: &PeerConfig) -> Result<Self, StartError> {
        let identity = load_or_create_identity(&cfg.identity_path, &cfg.subject)?;
        std::fs::create_dir_all(&cfg.data_dir)
            .map_err(|e| StartError::Setup(format!("{}: {e}", cfg.data_dir.display())))?;
        let trust = load_trust(cfg)?;
        let transport =
            RealTransport::bind(cfg.listen, cfg.advertise).map_err(|source| StartError::Bind {
                addr: cfg.listen.to_string(),
                source,
            })?;
        let udp_addr = transport
            .local_socket()
            .map_err(|e| StartError::Setup(e.to_string()))?;
        let advertise = netsim::Transport::local_addr(&transport);
        let node_cfg = NodeConfig {
            display_name: identity.subject().to_string(),
            lobby_group: cfg.lobby_group.clone(),
            bootstrap: cfg.bootstrap.clone(),
            relay_notes: cfg.relay_notes,
            hits_via_group: cfg.hits_via_group,
            data_dir: Some(cfg.data_dir.clone()),
            ..NodeConfig::default()
        };
        let share_dirs = cfg.share_dirs.clone();
        let trust_path = cfg.data_dir.join("trust.json");
        let (jobs_tx, jobs_rx) = mpsc::channel::<Job>();
        let (seq_tx, seq_rx) = watch::channel(0u64);
        let stop = Arc::new(AtomicBool::new(false));
        let (ready_tx, ready_rx) = mpsc::sync_channel(1);
        let stop2 = stop.clone();
        let thread = thread::Builder::new()
            .name("peerd-protocol".into())
            .spawn(move || {
                let authz = Authz::permissive(&identity);
                let seed = rand::random();
                let node = match Node::new(identity, trust, authz, node_cfg, advertise, seed) {
                    Ok(n) => n,
                    Err(e) => {
                        let _ = ready_tx.send(Err(StartError::Setup(e.to_string())));
                        return;
                    }
                };
                run(
                    node, transport, share_dirs, trust_path, jobs_rx, seq_tx, stop2, ready_tx,
                );
            })
            .map_err(|e| StartError::Setup(e.to_string()))?;
        match ready_rx.recv() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e),
            Err(_) => {
                return Err(StartError::Setup(
                    "protocol thread exited during startup".into(),
                ))
            }
        }
        Ok(Self {
            handle: Handle {
                jobs: jobs_tx,
                seq: seq_rx,
            },
            stop,
            thread: Some(thread),
            udp_addr,
        })
    }

    pub fn handle(&self) -> Handle {
        self.handle.clone()
    }

    /// Leaves groups, saves trust pins and joins the protocol thread.
    pub fn shutdown(self) {
        drop(self);
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut node: Node,
    mut t: RealTransport,
    share_dirs: Vec<std::path::PathBuf>,
    trust_path: std::path::PathBuf,
    jobs: Receiver<Job>,
    seq: watch::Sender<u64>,
    stop: Arc<AtomicBool>,
    ready: SyncSender<Result<(), StartError>>,
) {
    index_shares(&mut node, &mut t, &share_dirs);
    node.start(&mut t);
    let _ = ready.send(Ok(()));
    let mut last_tick = 0;
    let mut last_save = unix_ms();
    while !stop.load(Ordering::SeqCst) {
        if let Some((src, bytes)) = t.recv_datagram(Duration::from_millis(5)) {
            node.handle_datagram(&mut t, src, &bytes);
            for _ in 0..DATAGRAM_BURST {
                let Some((src, bytes)) = t.try_recv_datagram() else {
                    break;
                };
                node.handle_datagram(&mut t, src, &bytes);
            }
        }
        for ev in t.poll_streams() {
            node.handle_stream(&mut t, ev);
        }
        while let Ok(job) = jobs.try_recv() {
            job(&mut node, &mut t);
        }
        let now = unix_ms();
        if now.saturating_sub(last_tick) >= TICK_MS {
            last_tick = now;
            node.tick(&mut t);
        }
        if now.saturating_sub(last_save) >= TRUST_SAVE_MS {
            last_save = now;
            save_trust(&node, &trust_path);
        }
        seq.send_if_modified(|s| {
            let cur = node.last_event_seq();
            let changed = *s != cur;
            *s = cur;
            changed
        });
    }
    node.shutdown(&mut t);
    save_trust(&node, &trust_path);
}

fn save_trust(node: &Node, path: &Path) {
    if let Err(e) = node.trust().save(path) {
        tracing::warn!("cannot save trust store: {e}");
    }
}

/// Adds every regular file under the share directories, skipping files
/// already indexed with the same modification time.
fn index_shares(node: &mut Node, t: &mut RealTransport, dirs: &[std::path::PathBuf]) {
    let known: std::collections::BTreeMap<_, _> = node
        .shares()
        .into_iter()
        .map(|e| (e.path.clone(), e.mtime_ms))
        .collect();
    for dir in dirs {
        for entry in walkdir::WalkDir::new(dir)
            .follow_links(true)
            .into_iter()
            .filter_map(Result::ok)
        {
            if !entry.file_type().is_file() {
                continue;
            }
            let path = entry.path();
            let mtime = entry
                .metadata()
                .ok()
                .and_then(|m| m.modified().ok())
                .and_then(|m| m.duration_since(std::time::UNIX_EPOCH).ok())
                .map(|d| d.as_millis() as u64);
            if mtime.is_some() && known.get(path) == mtime.as_ref() {
                continue;
            }
            if let Err(e) = node.add_share(t, path, &[]) {
                tracing::warn!("cannot share {}: {e}", path.display());
            }
        }
    }
}

fn load_or_create_identity(path: &Path, subject: &str) -> Result<Identity, StartError> {
    if path.exists() {
        return Identity::load(path)
            .map_err(|e| StartError::Identity(format!("{}: {e}", path.display())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| StartError::Identity(format!("{}: {e}", dir.display())))?;
    }
    let identity = new_identity(subject, unix_ms(), &mut rand::rngs::OsRng)
        .map_err(|e| StartError::Identity(e.to_string()))?;
    identity
        .save(path)
        .map_err(|e| StartError::Identity(format!("{}: {e}", path.display())))?;
    tracing::info!(fingerprint = %identity.fingerprint(), "created identity {}", path.display());
    Ok(identity)
}

fn load_trust(cfg: &PeerConfig) -> Result<TrustStore, StartError> {
    let path = cfg.data_dir.join("trust.json");
    let mut store = if path.exists() {
        let mut s = TrustStore::load(&path)
            .map_err(|e| StartError::Setup(format!("{}: {e}", path.display())))?;
        s.mode = cfg.trust_mode;
        s
    } else {
        TrustStore::new(cfg.trust_mode)
    };
    for root in &cfg.trust_roots {
        let cert: IdentityCert = std::fs::read(root)
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
            .map_err(|e| StartError::Setup(format!("trust root {}: {e}", root.display())))?;
        store.add_root(cert);
    }
    Ok(store)
}
