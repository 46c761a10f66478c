use std::path::PathBuf;

use invexnet::checkpoint::{Checkpoint, Model};
use invexnet::verify::{raster_bounds, rasterize_classes, rasterize_regions, rasterize_sublevel, GridRaster};
use serde::Serialize;

use crate::{data, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GridMode {
    /// Raw model output per cell.
    Values,
    /// 1 where the output is below `--threshold`.
    Sublevel,
    /// Hard region id (multi_invex).
    Regions,
    /// Hard class (multi_invex).
    Classes,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `.csv` (one line per raster row, lowest y first) or `.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    /// `x0,x1,y0,y1`; defaults to the dataset box inflated by 20%.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<f64>>,
    /// Defaults to `regions` for multi_invex and `values` otherwise.
    #[arg(long, value_enum)]
    pub mode: Option<GridMode>,
    /// Sublevel threshold; defaults to the model's decision level.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueGrid {
    pub bounds: [[f64; 2]; 2],
    pub resolution: [usize; 2],
    pub values: Vec<Vec<f64>>,
}

pub enum Grid {
    Labels(GridRaster),
    Values(ValueGrid),
}

impl Grid {
    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            Grid::Labels(r) => r.write_csv(&mut out)?,
            Grid::Values(v) => {
                for row in &v.values {
                    let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                    out.extend_from_slice(line.join(",").as_bytes());
                    out.push(b'\n');
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> CliResult<Vec<u8>> {
        match self {
            Grid::Labels(r) => data::json(r),
            Grid::Values(v) => data::json(v),
        }
    }
}

fn decision_level(model: &Model) -> f64 {
    match model {
        Model::InvexInvertible(m) => m.threshold,
        _ => 0.0,
    }
}

pub fn export(args: &ExportArgs, ckpt: &Checkpoint) -> CliResult<Grid> {
    if args.grid < 2 {
        return Err(CliError::config("--grid must be at least 2"));
    }
    let model = &ckpt.model;
    if model.input_dim() != 2 {
        return Err(CliError::config(format!("grids need a 2D model, got {} inputs", model.input_dim())));
    }
    let bounds = match &args.bounds {
        Some(b) if b.len() == 4 => [[b[0], b[1]], [b[2], b[3]]],
        Some(b) => return Err(CliError::config(format!("--bounds takes x0,x1,y0,y1, got {} values", b.len()))),
        None => {
            let (d, _) = data::resolve(args.dataset.as_deref(), &args.label_column, args.seed, ckpt.dataset.as_ref())
                .map_err(|e| CliError { message: format!("{}; or pass --bounds", e.message), ..e })?;
            raster_bounds(&d.bounds(), 0.2)?
        }
    };
    let res = [args.grid, args.grid];
    let mode = args.mode.unwrap_or(match model {
        Model::MultiInvex(_) => GridMode::Regions,
        _ => GridMode::Values,
    });
    match (mode, model, model.scalar_field()) {
        (GridMode::Regions, Model::MultiInvex(m), _) => Ok(Grid::Labels(rasterize_regions(m, bounds, res)?)),
        (GridMode::Classes, Model::MultiInvex(m), _) => Ok(Grid::Labels(rasterize_classes(m, bounds, res)?)),
        (GridMode::Sublevel, _, Some(f)) => {
            let theta = args.threshold.unwrap_or_else(|| decision_level(model));
            Ok(Grid::Labels(rasterize_sublevel(f, bounds, res, theta)?))
        }
        (GridMode::Values, _, Some(f)) => {
            let pts = GridRaster::cell_centers(bounds, res);
            let v = f.values(&pts)?;
            Ok(Grid::Values(ValueGrid {
                bounds,
                resolution: res,
                values: v.chunks(args.grid).map(<[f64]>::to_vec).collect(),
            }))
        }
        (m, _, _) => Err(CliError::config(format!("mode {m:?} does not apply to a {} checkpoint", model.kind()))),
    }
}

pub fn run(args: &ExportArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let grid = export(args, &ckpt)?;
    let bytes = match args.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => grid.to_csv()?,
        Some("json") => grid.to_json()?,
        _ => return Err(CliError::config("--out must end in .csv or .json")),
    };
    data::write(&args.out, &bytes)
}
