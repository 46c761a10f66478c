//! Multi-region connected classifier on the five-cluster set, with a
//! per-region report.
//!
//! ```text
//! cargo run --release -p invexnet --example multi_invex -- [seed] [regions] [steps]
//! ```

use invexnet::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig};
use invexnet::datasets::clusters5;
use invexnet::nn::{Activation, InvertibleNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> invexnet::Result<()> {
    let seed: u64 = arg(1, 147);
    let regions: usize = arg(2, 7);
    let steps: usize = arg(3, 2000);
    let blocks: usize = arg(4, 6);
    let batch_norm: bool = arg(5, false);
    let lr: f64 = arg(6, 5e-3);
    let data = clusters5(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = InvertibleNet::new(2, blocks, 16, 3, Activation::LeakyRelu, 0.97, batch_norm, &mut rng)?;
    let mut model = MultiInvex::init_kmeans(backbone, &data, regions, 2.0, seed)?;
    println!("initial hard accuracy {:.4}", model.accuracy(&data, true)?);
    let cfg = MultiTrainConfig { steps, lr, log_every: 500, ..Default::default() };
    let start = std::time::Instant::now();
    let report = train_multi_invex(&mut model, &data, &cfg)?;
    for row in &report.history {
        println!("step {:5} loss {:.4} hard acc {:.4}", row.step, row.loss, row.accuracy.unwrap_or(f64::NAN));
    }
    println!(
        "hard {:.4} soft {:.4} inverse temperature {:.3} ({:.1}s)",
        model.accuracy(&data, true)?,
        model.accuracy(&data, false)?,
        model.state.inverse_temp.exp(),
        start.elapsed().as_secs_f64()
    );
    let centers = model.input_space_centers()?;
    for r in model.region_report(&data)? {
        println!(
            "region {} class {} center ({:.2}, {:.2}) points {:3} correct {:3} medoid {:?} nearest {:?}{}",
            r.region_id,
            r.class,
            centers.get(r.region_id, 0),
            centers.get(r.region_id, 1),
            r.num_points,
            r.correct,
            r.medoid_index,
            r.nearest_index,
            if r.removable { " (removable)" } else { "" }
        );
    }
    Ok(())
}
