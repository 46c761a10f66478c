//! Trains a cone over an invertible residual backbone on the spiral and
//! reports accuracy and the pulled-back cone center.
//!
//! ```text
//! cargo run --release -p invexnet --example invertible_cone -- [seed] [blocks] [steps] [batch_norm]
//! ```

use invexnet::datasets::spiral;
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
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
    let blocks: usize = arg(2, 10);
    let steps: usize = arg(3, 4000);
    let batch_norm: bool = arg(4, true);
    let inner: usize = arg(5, 1);
    let lr: f64 = arg(6, 5e-3);
    let data = spiral(400, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = InvertibleNet::new(2, blocks, 16, 3, Activation::LeakyRelu, 0.97, batch_norm, &mut rng)?;
    let mut model = InvexComposite::new(backbone, vec![0.0, 0.0])?;
    model.center_at_medoid(&data, inner)?;
    let cfg = CompositeTrainConfig { steps, lr, log_every: 1000, ..Default::default() };
    let start = std::time::Instant::now();
    let report = train_invex_composite(&mut model, &data, inner, &cfg)?;
    for row in &report.history {
        println!("step {:5} loss {:.4} acc {:.4}", row.step, row.loss, row.accuracy.unwrap_or(f64::NAN));
    }
    let c = model.center_pullback()?;
    let p = model.predict(&invexnet::autodiff::Tensor::row(&c))?[0].1;
    println!(
        "final accuracy {:.4}, threshold {:.3}, center pulled back to {c:?} (P(inner) {p:.4}), {:.1}s",
        model.accuracy(&data, inner)?,
        model.threshold,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
