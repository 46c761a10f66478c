//! Manual network morphism on the five-cluster set: start with too few
//! regions, add two centers, fine-tune, drop the worst region and fine-tune
//! again. Reports how many points each edit reassigns.
//!
//! ```text
//! cargo run --release -p invexnet --example morphism -- [seed]
//! ```

use invexnet::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig};
use invexnet::datasets::clusters5;
use invexnet::morph::{worst_region, MorphOp, MorphismSession};
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
    let regions: usize = arg(2, 5);
    let finetune_lr: f64 = arg(3, 2e-3);
    let data = clusters5(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = InvertibleNet::new(2, 6, 16, 3, Activation::LeakyRelu, 0.97, false, &mut rng)?;
    let mut model = MultiInvex::init_kmeans(backbone, &data, regions, 2.0, seed)?;
    train_multi_invex(&mut model, &data, &MultiTrainConfig { steps: 2000, ..Default::default() })?;
    println!("R={regions} after training: hard accuracy {:.4}", model.accuracy(&data, true)?);
    let finetune = MultiTrainConfig { lr: finetune_lr, ..Default::default() };
    let mut session = MorphismSession::new(model, data, finetune)?;
    let ops = [
        MorphOp::Add { x: -1.0, y: -1.0, class: 2 },
        MorphOp::Add { x: 0.0, y: -1.0, class: 1 },
        MorphOp::Finetune { steps: 1000 },
    ];
    for op in ops {
        let s = session.apply(op)?;
        println!("{:<18} R={} accuracy {:.4} -> {:.4}, {} reassigned", s.op.to_string(), s.regions, s.accuracy_before, s.accuracy, s.reassigned.len());
    }
    let worst = worst_region(&session.model.region_report(&session.data)?).expect("at least one region");
    for op in [MorphOp::Remove { region_id: worst }, MorphOp::Finetune { steps: 1000 }] {
        let s = session.apply(op)?;
        println!("{:<18} R={} accuracy {:.4} -> {:.4}, {} reassigned", s.op.to_string(), s.regions, s.accuracy_before, s.accuracy, s.reassigned.len());
    }
    let replayed = session.replay()?;
    println!("replay reproduces the model exactly: {}", replayed == session.model);
    Ok(())
}
