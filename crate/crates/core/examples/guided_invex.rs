//! Guided invex training: a second network is trained under the projected
//! gradient rule with the gradient field of a trained basic invex network as
//! the reference, then again with a unit cone at the inner-class mean.
//!
//! The cone guide fixes a star-shaped sublevel set around the class mean,
//! which cannot follow a spiral arm; the learned guide can.
//!
//! ```text
//! cargo run --release -p invexnet --example guided_invex -- [seed] [steps]
//! ```

use invexnet::datasets::spiral;
use invexnet::gcgp::{train_basic, train_guided, BasicInvex, GcgpConfig, Guide, GuidedInvex, Mode};
use invexnet::nn::{Activation, Mlp};
use invexnet::verify::{check_invexity_default, random_box_points, Direction, PointSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> invexnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(147);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let data = spiral(400, seed)?;
    let inner = 1;
    let t = data.binary_targets(inner);
    let n_in: f64 = t.iter().sum();
    let mean: Vec<f64> = (0..2)
        .map(|j| (0..data.len()).map(|i| data.x.get(i, j) * t[i]).sum::<f64>() / n_in)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GcgpConfig { lambda: 2.0, steps, lr: 3e-3, seed, log_every: 0, ..Default::default() };

    let net = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng);
    let mut basic = BasicInvex { net, center: mean.clone(), inner_class: inner };
    train_basic(&mut basic, &data, &cfg)?;
    println!("basic guide: accuracy {:.4}, center moved to {:.3?}", basic.accuracy(&data)?, basic.center);

    let random = random_box_points(&data.bounds(), 100_000, seed);
    let init = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng);
    for (name, guide) in [("basic", Guide::Basic(basic)), ("cone ", Guide::Cone { center: mean, scale: 1.0 })] {
        let mut g = init.clone();
        train_guided(&mut g, &guide, inner, &data, &GcgpConfig { mode: Mode::InvexGuided, ..cfg.clone() })?;
        let model = GuidedInvex { g, guide, inner_class: inner };
        let dir = Direction::GuideGradient(&model.guide);
        let on_train = check_invexity_default(&model, &data.x, dir, PointSource::Train)?;
        let on_random = check_invexity_default(&model, &random, dir, PointSource::Random)?;
        println!(
            "guided by {name}: accuracy {:.4}, rule holds on {:.4} of training and {:.4} of random points",
            model.accuracy(&data)?,
            on_train.fraction,
            on_random.fraction
        );
    }
    Ok(())
}
