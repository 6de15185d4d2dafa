use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;

use rctcast_service::{router, AppState, HistoryStore, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "rctcast-serve", version, about = "HTTP service for interactive effect forecasting")]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "RCTCAST_BIND", default_value = "127.0.0.1:8787")]
    bind: String,
    /// Browser origin of the console allowed to call the API.
    #[arg(long, env = "RCTCAST_CONSOLE_ORIGIN")]
    origin: Option<String>,
    /// Predictor registry config (TOML). Without it a single prompted
    /// forecaster is served.
    #[arg(long, env = "RCTCAST_SERVICE_CONFIG")]
    config: Option<PathBuf>,
    /// LLM response cache directory; overrides the config.
    #[arg(long, env = "RCTCAST_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Directory of per-session history logs.
    #[arg(long, env = "RCTCAST_HISTORY_DIR", default_value = "rctcast-history")]
    history_dir: PathBuf,
}

async fn serve(args: Args) -> Result<(), String> {
    let mut cfg = match &args.config {
        Some(p) => ServiceConfig::load(p).map_err(|e| e.to_string())?,
        None => ServiceConfig::default(),
    };
    if let Some(dir) = args.cache_dir {
        cfg.llm.cache_dir = Some(dir);
    }
    if cfg.llm.cache_dir.is_none() {
        cfg.llm.cache_dir = Some(PathBuf::from(".rctcast-cache"));
    }
    let history = HistoryStore::open(&args.history_dir).map_err(|e| e.to_string())?;
    let state = AppState::new(&cfg, history).map_err(|e| e.to_string())?;
    let app = router(Arc::new(state), args.origin.as_deref()).map_err(|e| e.to_string())?;
    let listener = tokio::net::TcpListener::bind(&args.bind)
        .await
        .map_err(|e| format!("cannot bind {}: {e}", args.bind))?;
    tracing::info!(addr = %args.bind, "listening");
    axum::serve(listener, app).await.map_err(|e| e.to_string())
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    if let Err(e) = serve(Args::parse()).await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
