use std::path::PathBuf;

use invexnet::checkpoint::{Checkpoint, Model};
use invexnet::classifier::{MultiTrainConfig, WeightType};
use invexnet::morph::{parse_script, run_script, MorphStep};

use crate::{data, CliError, CliResult};

#[derive(Debug, Clone, clap::Args)]
pub struct MorphArgs {
    /// A multi_invex checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One op per line: `add X Y CLASS`, `remove REGION`, `finetune [STEPS]`; `#` starts a comment.
    #[arg(long)]
    pub script: PathBuf,
    /// Output checkpoint. Nothing is written if any op fails.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2e-3)]
    pub finetune_lr: f64,
    /// Per-step metrics as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn morph(args: &MorphArgs, ckpt: &Checkpoint, script: &str) -> CliResult<(Checkpoint, Vec<MorphStep>)> {
    let Model::MultiInvex(model) = &ckpt.model else {
        return Err(CliError::config(format!("morph needs a multi_invex checkpoint, got {}", ckpt.model.kind())));
    };
    if model.state.weight_type != WeightType::Euclidean {
        return Err(CliError::config("morph needs euclidean region scoring"));
    }
    if !(args.finetune_lr.is_finite() && args.finetune_lr > 0.0) {
        return Err(CliError::config("--finetune-lr must be positive"));
    }
    let ops = parse_script(script).map_err(|e| CliError::config(format!("{}: {e}", args.script.display())))?;
    let (data, dref) = data::resolve(args.dataset.as_deref(), &args.label_column, args.seed, ckpt.dataset.as_ref())?;
    let finetune = MultiTrainConfig { lr: args.finetune_lr, log_every: 0, ..Default::default() };
    let mut model = model.clone();
    let steps = run_script(&mut model, &data, &ops, &finetune)?;
    let dataset = ckpt.dataset.clone().or(Some(dref));
    Ok((Checkpoint::new(Model::MultiInvex(model), dataset), steps))
}

pub fn run(args: &MorphArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let script = std::fs::read_to_string(&args.script).map_err(|e| CliError::io(format!("{}: {e}", args.script.display())))?;
    let (out, steps) = morph(args, &ckpt, &script)?;
    for s in &steps {
        println!(
            "{:<16} R={} accuracy {:.4} -> {:.4}, {} reassigned",
            s.op.to_string(),
            s.regions,
            s.accuracy_before,
            s.accuracy,
            s.reassigned.len()
        );
    }
    if let Some(p) = &args.report {
        data::write(p, &data::json(&steps)?)?;
    }
    data::write(&args.out, out.to_json()?.as_bytes())
}
