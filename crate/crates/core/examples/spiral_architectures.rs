//! Spiral accuracy for every architecture: ordinary, convex, basic invex,
//! composed invex and invertible+cone.
//!
//! ```text
//! cargo run --release -p invexnet --example spiral_architectures -- [seed]
//! ```

use std::time::Instant;

use invexnet::datasets::spiral;
use invexnet::gcgp::{logit_accuracy, train_basic, train_modified, train_ordinary, BasicInvex, ComposedInvex, GcgpConfig};
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
use invexnet::nn::{Activation, ConvexNet, InvertibleNet, Mlp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> invexnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(147);
    let data = spiral(400, seed)?;
    let rng = || ChaCha8Rng::seed_from_u64(seed);
    let inner = 1;

    let t = Instant::now();
    let mut mlp = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng());
    train_ordinary(&mut mlp, &data, inner, 4000, 3e-3)?;
    println!("ordinary     {:.4}  {:.1}s", logit_accuracy(&mlp, &data, inner)?, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut icnn = ConvexNet::new(&[2, 32, 32, 1], Activation::Relu, &mut rng())?;
    let a = train_ordinary(&mut icnn, &data, inner, 4000, 3e-3).and_then(|_| logit_accuracy(&icnn, &data, inner))?;
    let mut icnn = ConvexNet::new(&[2, 32, 32, 1], Activation::Relu, &mut rng())?;
    let b = train_ordinary(&mut icnn, &data, 1 - inner, 4000, 3e-3).and_then(|_| logit_accuracy(&icnn, &data, 1 - inner))?;
    println!("convex       {:.4}  {:.1}s", a.max(b), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut stream = rng();
    let net = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut stream);
    let targets = data.binary_targets(inner);
    let n_in: f64 = targets.iter().sum();
    let center = (0..2)
        .map(|j| (0..data.len()).map(|i| data.x.get(i, j) * targets[i]).sum::<f64>() / n_in)
        .collect();
    let mut basic = BasicInvex { net, center, inner_class: inner };
    let cfg = GcgpConfig { lambda: 2.0, steps: 8000, lr: 3e-3, seed, ..Default::default() };
    train_basic(&mut basic, &data, &cfg)?;
    println!("basic invex  {:.4}  {:.1}s", basic.accuracy(&data)?, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut g = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut stream);
    train_modified(&mut g, &basic, &data, &cfg)?;
    let composed = ComposedInvex { base: basic, g };
    println!("composed     {:.4}  {:.1}s", composed.accuracy(&data)?, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let backbone = InvertibleNet::new(2, 10, 16, 3, Activation::LeakyRelu, 0.97, true, &mut rng())?;
    let mut cone = InvexComposite::new(backbone, vec![0.0, 0.0])?;
    cone.center_at_medoid(&data, inner)?;
    train_invex_composite(&mut cone, &data, inner, &CompositeTrainConfig::default())?;
    println!("invertible   {:.4}  {:.1}s", cone.accuracy(&data, inner)?, t.elapsed().as_secs_f64());
    Ok(())
}
