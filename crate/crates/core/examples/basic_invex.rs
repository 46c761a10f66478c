//! Trains a basic input-invex classifier on the spiral and reports accuracy
//! and the share of points obeying the projected-gradient rule.
//!
//! ```text
//! cargo run --release -p invexnet --example basic_invex -- [seed]
//! ```

use invexnet::datasets::spiral;
use invexnet::gcgp::{train_basic, BasicInvex, GcgpConfig};
use invexnet::nn::{Activation, Mlp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> invexnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(147);
    let data = spiral(400, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng);
    let inner = 1;
    let t = data.binary_targets(inner);
    let n_in = t.iter().sum::<f64>();
    let center = (0..2)
        .map(|j| (0..data.len()).map(|i| data.x.get(i, j) * t[i]).sum::<f64>() / n_in)
        .collect();
    let mut model = BasicInvex { net, center, inner_class: inner };
    let cfg = GcgpConfig { lambda: 2.0, steps: 8000, lr: 3e-3, seed, log_every: 1000, ..Default::default() };
    let start = std::time::Instant::now();
    let report = train_basic(&mut model, &data, &cfg)?;
    for row in &report.history {
        println!("step {:5} loss {:.4} acc {:.4} pg>0 {:.4}", row.step, row.loss, row.accuracy.unwrap_or(f64::NAN), row.invexity_fraction.unwrap_or(f64::NAN));
    }
    println!("final accuracy {:.4}, center {:?}, {:.1}s", model.accuracy(&data)?, model.center, start.elapsed().as_secs_f64());
    Ok(())
}
