use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use peerd::{api, exit, load_config, Daemon, StartError};

/// Serverless collaboration peer.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// JSON configuration file.
    #[arg(short, long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let loaded = match load_config(&args.config) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("peerd: config error: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    for w in &loaded.warnings {
        tracing::warn!("{w}");
    }
    let cfg = loaded.config;
    let daemon = match Daemon::start(&cfg) {
        Ok(d) => d,
        Err(e @ StartError::Bind { .. }) => {
            eprintln!("peerd: {e}");
            return ExitCode::from(exit::BIND as u8);
        }
        Err(e) => {
            eprintln!("peerd: {e}");
            return ExitCode::from(exit::FAILURE as u8);
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("peerd: {e}");
            return ExitCode::from(exit::FAILURE as u8);
        }
    };
    let control = SocketAddr::from((Ipv4Addr::LOCALHOST, cfg.control_port));
    let listener = match rt.block_on(tokio::net::TcpListener::bind(control)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("peerd: cannot bind control API on {control}: {e}");
            return ExitCode::from(exit::BIND as u8);
        }
    };
    tracing::info!(peer = %daemon.udp_addr, %control, "peerd running");
    let served = rt.block_on(serve(listener, daemon.handle()));
    daemon.shutdown();
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("peerd: {e:#}");
            ExitCode::from(exit::FAILURE as u8)
        }
    }
}

async fn serve(listener: tokio::net::TcpListener, handle: peerd::Handle) -> anyhow::Result<()> {
    axum::serve(listener, api::router(handle))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .context("control API failed")
}

async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("signal handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = ctrl_c.await;
    tracing::info!("shutting down");
}
