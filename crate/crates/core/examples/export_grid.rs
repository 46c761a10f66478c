//! Trains a small cone-over-invertible model, saves it as a checkpoint,
//! reloads it and writes its sublevel raster as CSV next to the component count.
//!
//! ```text
//! cargo run --release -p invexnet --example export_grid -- [out_dir] [grid]
//! ```

use std::path::PathBuf;

use invexnet::checkpoint::{Checkpoint, DatasetRef, Model};
use invexnet::datasets::spiral;
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
use invexnet::nn::{Activation, InvertibleNet};
use invexnet::verify::{raster_bounds, rasterize_sublevel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> invexnet::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "grid_out".into()).into();
    let grid: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed = 147;
    let data = spiral(400, seed)?;
    let backbone = InvertibleNet::new(2, 6, 16, 3, Activation::LeakyRelu, 0.97, true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut model = InvexComposite::new(backbone, vec![0.0, 0.0])?;
    model.center_at_medoid(&data, 1)?;
    train_invex_composite(&mut model, &data, 1, &CompositeTrainConfig { steps: 1500, log_every: 0, ..Default::default() })?;

    std::fs::create_dir_all(&out)?;
    let path = out.join("checkpoint.json");
    Checkpoint::new(Model::InvexInvertible(model), Some(DatasetRef { name: "spiral".into(), seed })).save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let Model::InvexInvertible(model) = &loaded.model else { unreachable!() };

    let raster = rasterize_sublevel(model, raster_bounds(&data.bounds(), 0.2)?, [grid, grid], model.threshold)?;
    let mut csv = Vec::new();
    raster.write_csv(&mut csv)?;
    std::fs::write(out.join("sublevel.csv"), csv)?;
    println!(
        "accuracy {:.4}; {grid}x{grid} sublevel raster at {:.3} has {} component(s); wrote {}",
        model.accuracy(&data, 1)?,
        model.threshold,
        raster.connected_components(1),
        out.display()
    );
    Ok(())
}
