//! Trains basic, composed and invertible+cone models on the spiral, then
//! checks the projected-gradient rule on train, test and random points and
//! counts connected components of sublevel sets.
//!
//! ```text
//! cargo run --release -p invexnet --example verify_spiral -- [seed] [random points]
//! ```

use invexnet::datasets::{spiral, TEST_SEED_OFFSET};
use invexnet::gcgp::{train_basic, train_modified, BasicInvex, ComposedInvex, GcgpConfig, Guide};
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
use invexnet::nn::{Activation, InvertibleNet, Mlp};
use invexnet::verify::{
    check_invexity_default, random_box_points, raster_bounds, rasterize_sublevel, Direction, PointSource, ScalarField,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn report(name: &str, model: &dyn ScalarField, dir: Direction<'_>, sets: &[(PointSource, &invexnet::autodiff::Tensor)]) -> invexnet::Result<()> {
    for (source, pts) in sets {
        let r = check_invexity_default(model, pts, dir, *source)?;
        println!("{name:9} {source:?}: {}/{} satisfied ({:.4}), {} skipped", r.n_satisfied, r.n_checked, r.fraction, r.n_skipped);
    }
    Ok(())
}

fn main() -> invexnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(147);
    let n_random: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1_000_000);
    let train = spiral(400, seed)?;
    let test = spiral(400, seed + TEST_SEED_OFFSET)?;
    let random = random_box_points(&train.bounds(), n_random, seed);
    let sets = [(PointSource::Train, &train.x), (PointSource::Test, &test.x), (PointSource::Random, &random)];
    let inner = 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng);
    let targets = train.binary_targets(inner);
    let n_in: f64 = targets.iter().sum();
    let center = (0..2)
        .map(|j| (0..train.len()).map(|i| train.x.get(i, j) * targets[i]).sum::<f64>() / n_in)
        .collect();
    let mut basic = BasicInvex { net, center, inner_class: inner };
    let cfg = GcgpConfig { lambda: 2.0, steps: 8000, lr: 3e-3, seed, ..Default::default() };
    train_basic(&mut basic, &train, &cfg)?;
    println!("basic accuracy {:.4} test {:.4}", basic.accuracy(&train)?, basic.accuracy(&test)?);
    let center = basic.center.clone();
    report("basic", &basic, Direction::TowardCenter(&center), &sets)?;

    let mut g = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut rng);
    train_modified(&mut g, &basic, &train, &cfg)?;
    let composed = ComposedInvex { base: basic.clone(), g };
    println!("composed accuracy {:.4} test {:.4}", composed.accuracy(&train)?, composed.accuracy(&test)?);
    let guide = Guide::Basic(basic);
    report("composed", &composed, Direction::GuideGradient(&guide), &sets)?;

    let backbone = InvertibleNet::new(2, 10, 16, 3, Activation::LeakyRelu, 0.97, true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut cone = InvexComposite::new(backbone, vec![0.0, 0.0])?;
    cone.center_at_medoid(&train, inner)?;
    train_invex_composite(&mut cone, &train, inner, &CompositeTrainConfig::default())?;
    println!("invertible accuracy {:.4} test {:.4}", cone.accuracy(&train, inner)?, cone.accuracy(&test, inner)?);
    let bounds = raster_bounds(&train.bounds(), 0.2)?;
    for scale in [0.5, 0.75, 1.0, 1.25, 1.5] {
        let theta = cone.threshold * scale;
        let r = rasterize_sublevel(&cone, bounds, [400, 400], theta)?;
        println!("sublevel theta={theta:.3}: {} component(s)", r.connected_components(1));
    }
    Ok(())
}
