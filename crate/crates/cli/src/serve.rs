use std::path::PathBuf;

use invexnet::checkpoint::{Checkpoint, Model};
use invexnet::classifier::MultiTrainConfig;
use invexnet::morph::MorphismSession;
use invexnet_service::{cors, router, serve, AppState};

use crate::{data, CliError, CliResult};

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[arg(long, env = "INVEXNET_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Allowed browser origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Preload a multi_invex checkpoint as a session.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2e-3)]
    pub finetune_lr: f64,
}

/// Builds the session for `--checkpoint`, if any.
pub fn preload(args: &ServeArgs, state: &AppState) -> CliResult<Option<String>> {
    let Some(path) = &args.checkpoint else {
        return Ok(None);
    };
    let ckpt = Checkpoint::load(path)?;
    let Model::MultiInvex(model) = ckpt.model else {
        return Err(CliError::config(format!("serve needs a multi_invex checkpoint, got {}", ckpt.model.kind())));
    };
    let (data, dref) = data::resolve(args.dataset.as_deref(), &args.label_column, args.seed, ckpt.dataset.as_ref())?;
    if data.dim() != 2 {
        return Err(CliError::config("sessions need a 2D dataset"));
    }
    let finetune = MultiTrainConfig { lr: args.finetune_lr, log_every: 0, ..Default::default() };
    let session = MorphismSession::new(model, data, finetune)?;
    Ok(Some(state.insert(session, dref)))
}

pub fn run(args: &ServeArgs) -> CliResult<()> {
    let state = AppState::new();
    if let Some(id) = preload(args, &state)? {
        println!("session {id}");
    }
    let layer = cors(args.cors_origin.as_deref()).map_err(CliError::config)?;
    let app = router(state, layer);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| CliError::io(format!("{}:{}: {e}", args.host, args.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::io(e.to_string()))?;
        println!("listening on http://{addr}");
        serve(listener, app).await.map_err(|e| CliError::io(e.to_string()))
    })
}
