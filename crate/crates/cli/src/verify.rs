use std::path::PathBuf;

use invexnet::checkpoint::{Checkpoint, Model};
use invexnet::gcgp::lipschitz_eval_points;
use invexnet::verify::{
    check_invexity_default, estimate_lipschitz, random_box_points, raster_bounds, rasterize_regions, rasterize_sublevel, ComponentCount,
    InvexityReport, PointSource, ScalarField, VerificationReport, RANDOM_POINTS,
};

use crate::train::invexity_direction;
use crate::{data, CliError, CliResult};

#[derive(Debug, Clone, clap::Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset name or CSV path; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Dataset seed; defaults to the recorded one. Also seeds the random points.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Uniform points in the data box inflated by 20%; 0 disables the random check.
    #[arg(long, default_value_t = RANDOM_POINTS)]
    pub random_points: usize,
    /// Raster cells per axis for connectedness checks (2D models); 0 disables them.
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    /// Sublevel thresholds, comma separated. Defaults depend on the model.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub threshold: Option<Vec<f64>>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// The decision level plus score quantiles on the training set; cone models use
/// multiples of their learned threshold.
fn default_thresholds(model: &Model, field: &dyn ScalarField, x: &invexnet::autodiff::Tensor) -> CliResult<Vec<f64>> {
    if let Model::InvexInvertible(m) = model {
        return Ok([0.5, 0.75, 1.0, 1.25, 1.5].iter().map(|s| s * m.threshold).collect());
    }
    let mut v = field.values(x)?;
    v.retain(|s| s.is_finite());
    v.sort_by(f64::total_cmp);
    let mut t = vec![0.0];
    if !v.is_empty() {
        t.extend([0.1, 0.25, 0.5, 0.75, 0.9].iter().map(|&q| quantile(&v, q)));
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    Ok(t)
}

pub fn verify(args: &VerifyArgs, ckpt: &Checkpoint) -> CliResult<VerificationReport> {
    let (train, dref) = data::resolve(args.dataset.as_deref(), &args.label_column, args.seed, ckpt.dataset.as_ref())?;
    let model = &ckpt.model;
    if train.dim() != model.input_dim() {
        return Err(CliError::config(format!("model takes {} inputs but the dataset has {}", model.input_dim(), train.dim())));
    }
    let test = data::test_split(&dref)?;
    let mut report = VerificationReport::default();
    let field = model.scalar_field();
    if let (Some(f), Some(dir)) = (field, invexity_direction(model)?) {
        let mut sets = vec![(PointSource::Train, train.x.clone())];
        if let Some(t) = &test {
            sets.push((PointSource::Test, t.x.clone()));
        }
        if args.random_points > 0 {
            sets.push((PointSource::Random, random_box_points(&train.bounds(), args.random_points, dref.seed)));
        }
        for (source, pts) in sets {
            let r: InvexityReport = check_invexity_default(f, &pts, dir.borrow(), source)?;
            report.invexity.push(r);
        }
    }
    if let Some(f) = field {
        report.lipschitz = Some(estimate_lipschitz(f, &lipschitz_eval_points(&train))?);
    }
    if args.grid > 0 && train.dim() == 2 {
        let bounds = raster_bounds(&train.bounds(), 0.2)?;
        let res = [args.grid, args.grid];
        match (model, field) {
            (Model::MultiInvex(m), _) => {
                let r = rasterize_regions(m, bounds, res)?;
                report.region_components = r
                    .component_counts()
                    .into_iter()
                    .map(|(k, c)| ComponentCount { key: k as f64, components: c })
                    .collect();
            }
            (_, Some(f)) => {
                let thresholds = match &args.threshold {
                    Some(t) => t.clone(),
                    None => default_thresholds(model, f, &train.x)?,
                };
                for theta in thresholds {
                    let r = rasterize_sublevel(f, bounds, res, theta)?;
                    report.sublevel_components.push(ComponentCount { key: theta, components: r.connected_components(1) });
                }
            }
            _ => {}
        }
    }
    Ok(report)
}

pub fn run(args: &VerifyArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let report = verify(args, &ckpt)?;
    let bytes = data::json(&report)?;
    match &args.out {
        Some(p) => {
            data::write(p, &bytes)?;
            for r in &report.invexity {
                eprintln!("invexity {:?}: {}/{} ({:.4})", r.source, r.n_satisfied, r.n_checked, r.fraction);
            }
            if let Some(l) = &report.lipschitz {
                eprintln!("gradient norm max {:.4}, min {:.4}", l.max, l.min);
            }
            for c in &report.sublevel_components {
                eprintln!("sublevel {:.4}: {} component(s)", c.key, c.components);
            }
            for c in &report.region_components {
                eprintln!("region {}: {} component(s)", c.key, c.components);
            }
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}
