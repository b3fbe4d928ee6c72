use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use stand_core::model::MarkovModelSpec;

/// Serve a Markov model spec over HTTP for `stand decode --remote`.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Model spec JSON file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    let args = Args::parse();
    let spec = MarkovModelSpec::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    stand_logit_server::serve(args.addr, Arc::new(spec)).await?;
    Ok(())
}
