//! Compares gradient penalty, Lipschitz penalty, spectral normalization and
//! GC-GP on the two regression surfaces, target K = 1.
//!
//! ```text
//! cargo run --release -p invexnet --example lipschitz_methods -- [seed] [steps]
//! ```

use invexnet::datasets::{regression1, regression2};
use invexnet::gcgp::{train_lipschitz, GcgpConfig, LipschitzMethod};
use invexnet::nn::{Activation, Mlp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> invexnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(147);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(7500);
    println!("data  method  lambda      K  min|g|      mse  ms/step");
    for (name, data) in [("reg1", regression1(seed)?), ("reg2", regression2(seed)?)] {
        for (method, lambda) in [
            (LipschitzMethod::Gp, 1.0),
            (LipschitzMethod::Lp, 1.0),
            (LipschitzMethod::Sn, 0.0),
            (LipschitzMethod::Gcgp, 3.0),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Mlp::new(&[2, 10, 10, 1], Activation::Elu, Activation::None, &mut rng);
            let cfg = GcgpConfig { lambda, steps, lr: 1e-3, seed, ..Default::default() };
            let (m, _) = train_lipschitz(&mut net, &data, &cfg, method)?;
            println!(
                "{name}  {:6}  {lambda:6.1}  {:5.3}  {:6.3}  {:7.5}  {:7.2}",
                format!("{method:?}").to_lowercase(),
                m.empirical_k,
                m.min_grad_norm,
                m.loss,
                m.ms_per_step
            );
        }
    }
    Ok(())
}
