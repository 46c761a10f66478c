//! End-to-end acceptance runs. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! ```text
//! cargo test --release -p invexnet --test acceptance            # all criteria
//! cargo test --release -p invexnet --test acceptance -- 3 4     # a subset
//! ```

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use invexnet::autodiff::Tensor;
use invexnet::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig};
use invexnet::datasets::{clusters5, regression1, regression2, spiral, Dataset, TEST_SEED_OFFSET};
use invexnet::gcgp::{
    logit_accuracy, train_basic, train_lipschitz, train_modified, train_ordinary, BasicInvex, ComposedInvex, GcgpConfig, Guide,
    LipschitzMethod,
};
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
use invexnet::morph::{worst_region, MorphOp, MorphismSession};
use invexnet::nn::{Activation, ConvexNet, InvertibleNet, Mlp};
use invexnet::verify::{
    check_invexity_default, random_box_points, raster_bounds, rasterize_regions, rasterize_sublevel, two_cone_control, Direction,
    GridRaster, PointSource,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: [u64; 3] = [147, 258, 369];
const INNER: usize = 1;
const TIME_LIMIT: Duration = Duration::from_secs(120);

type Outcome = Result<String, String>;

fn err(e: invexnet::Error) -> String {
    e.to_string()
}

fn fresh(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct SpiralModels {
    basic: BasicInvex,
    composed: ComposedInvex,
    cone: InvexComposite,
}

fn class_mean(data: &Dataset, class: usize) -> Vec<f64> {
    let t = data.binary_targets(class);
    let n: f64 = t.iter().sum();
    (0..data.dim())
        .map(|j| (0..data.len()).map(|i| data.x.get(i, j) * t[i]).sum::<f64>() / n)
        .collect()
}

/// Trains every spiral model for `seed` and returns them with accuracies and timings.
fn train_spiral(seed: u64) -> invexnet::Result<(SpiralModels, Vec<(&'static str, f64, Duration)>)> {
    let data = spiral(400, seed)?;
    let mut rows = Vec::new();

    let t = Instant::now();
    let mut mlp = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut fresh(seed));
    train_ordinary(&mut mlp, &data, INNER, 4000, 3e-3)?;
    rows.push(("ordinary", logit_accuracy(&mlp, &data, INNER)?, t.elapsed()));

    // Either class may be the convex one; report the better orientation.
    let t = Instant::now();
    let mut best: f64 = 0.0;
    for positive in [INNER, 1 - INNER] {
        let mut icnn = ConvexNet::new(&[2, 32, 32, 1], Activation::Relu, &mut fresh(seed))?;
        train_ordinary(&mut icnn, &data, positive, 4000, 3e-3)?;
        best = best.max(logit_accuracy(&icnn, &data, positive)?);
    }
    rows.push(("convex", best, t.elapsed()));

    let t = Instant::now();
    let mut stream = fresh(seed);
    let net = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut stream);
    let mut basic = BasicInvex {
        net,
        center: class_mean(&data, INNER),
        inner_class: INNER,
    };
    let cfg = GcgpConfig {
        lambda: 2.0,
        steps: 8000,
        lr: 3e-3,
        seed,
        ..Default::default()
    };
    train_basic(&mut basic, &data, &cfg)?;
    rows.push(("basic invex", basic.accuracy(&data)?, t.elapsed()));

    let t = Instant::now();
    let mut g = Mlp::new(&[2, 32, 32, 1], Activation::LeakyRelu, Activation::None, &mut stream);
    train_modified(&mut g, &basic, &data, &cfg)?;
    let composed = ComposedInvex { base: basic.clone(), g };
    rows.push(("composed invex", composed.accuracy(&data)?, t.elapsed()));

    let t = Instant::now();
    let backbone = InvertibleNet::new(2, 10, 16, 3, Activation::LeakyRelu, 0.97, true, &mut fresh(seed))?;
    let mut cone = InvexComposite::new(backbone, vec![0.0, 0.0])?;
    cone.center_at_medoid(&data, INNER)?;
    train_invex_composite(&mut cone, &data, INNER, &CompositeTrainConfig::default())?;
    rows.push(("invertible+cone", cone.accuracy(&data, INNER)?, t.elapsed()));

    Ok((SpiralModels { basic, composed, cone }, rows))
}

static SPIRAL_147: OnceLock<SpiralModels> = OnceLock::new();

fn spiral_147() -> Result<&'static SpiralModels, String> {
    if let Some(m) = SPIRAL_147.get() {
        return Ok(m);
    }
    let (m, _) = train_spiral(SEEDS[0]).map_err(err)?;
    Ok(SPIRAL_147.get_or_init(|| m))
}

fn criterion_1() -> Outcome {
    let mut failures = Vec::new();
    for seed in SEEDS {
        let (models, rows) = train_spiral(seed).map_err(err)?;
        for (name, acc, took) in rows {
            println!("  seed {seed} {name:16} accuracy {:6.2}%  {:5.1}s", 100.0 * acc, took.as_secs_f64());
            let ok = match name {
                "basic invex" => acc >= 0.93,
                "convex" => acc <= 0.92,
                _ => acc == 1.0,
            };
            if !ok {
                failures.push(format!("seed {seed} {name} {:.2}%", 100.0 * acc));
            }
            if took > TIME_LIMIT {
                failures.push(format!("seed {seed} {name} took {:.0}s", took.as_secs_f64()));
            }
        }
        if seed == SEEDS[0] {
            let _ = SPIRAL_147.set(models);
        }
    }
    if failures.is_empty() {
        Ok("all architectures within bounds on 3 seeds".into())
    } else {
        Err(failures.join("; "))
    }
}

fn criterion_2() -> Outcome {
    let seed = SEEDS[0];
    let run = |data: &Dataset, method: LipschitzMethod, lambda: f64| -> Result<(f64, f64), String> {
        let mut net = Mlp::new(&[2, 10, 10, 1], Activation::Elu, Activation::None, &mut fresh(seed));
        let cfg = GcgpConfig {
            lambda,
            steps: 7500,
            lr: 1e-3,
            seed,
            ..Default::default()
        };
        let (m, _) = train_lipschitz(&mut net, data, &cfg, method).map_err(err)?;
        println!("  {} {method:?} lambda {lambda}: K {:.3}, MSE {:.5}", data.name, m.empirical_k, m.loss);
        Ok((m.empirical_k, m.loss))
    };
    let (r1, r2) = (regression1(seed).map_err(err)?, regression2(seed).map_err(err)?);
    let (k_gcgp, mse_gcgp) = run(&r1, LipschitzMethod::Gcgp, 3.0)?;
    let (k_gp, _) = run(&r1, LipschitzMethod::Gp, 1.0)?;
    let (k_sn, mse_sn) = run(&r2, LipschitzMethod::Sn, 0.0)?;
    let (_, mse_gcgp2) = run(&r2, LipschitzMethod::Gcgp, 3.0)?;
    let mut failures = Vec::new();
    if !(0.80..=1.05).contains(&k_gcgp) || mse_gcgp > 0.12 {
        failures.push(format!("GC-GP on regression 1: K {k_gcgp:.3}, MSE {mse_gcgp:.4}"));
    }
    if k_gp < 1.15 {
        failures.push(format!("GP on regression 1: K {k_gp:.3} < 1.15"));
    }
    if k_sn > 0.6 || mse_sn < mse_gcgp2 {
        failures.push(format!("SN on regression 2: K {k_sn:.3}, MSE {mse_sn:.4} vs GC-GP {mse_gcgp2:.4}"));
    }
    if failures.is_empty() {
        Ok(format!("GC-GP K {k_gcgp:.3}, GP K {k_gp:.3}, SN K {k_sn:.3}"))
    } else {
        Err(failures.join("; "))
    }
}

fn criterion_3() -> Outcome {
    let seed = SEEDS[0];
    let models = spiral_147()?;
    let train = spiral(400, seed).map_err(err)?;
    let test = spiral(400, seed + TEST_SEED_OFFSET).map_err(err)?;
    let random = random_box_points(&train.bounds(), 1_000_000, seed);
    let guide = Guide::Basic(models.basic.clone());
    let cases: [(&str, &dyn invexnet::verify::ScalarField, Direction<'_>); 2] = [
        ("basic", &models.basic, Direction::TowardCenter(&models.basic.center)),
        ("composed", &models.composed, Direction::GuideGradient(&guide)),
    ];
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (name, model, dir) in cases {
        let on = |pts: &Tensor, source| check_invexity_default(model, pts, dir, source).map_err(err);
        let seen = on(&train.x, PointSource::Train)?.merge(&on(&test.x, PointSource::Test)?);
        let rand = on(&random, PointSource::Random)?;
        println!(
            "  {name:8} train+test {}/{} ({:.4}), random {}/{} ({:.4})",
            seen.n_satisfied, seen.n_checked, seen.fraction, rand.n_satisfied, rand.n_checked, rand.fraction
        );
        summary.push(format!("{name} {:.4} (random {:.4})", seen.fraction, rand.fraction));
        if seen.fraction < 0.99 {
            failures.push(format!("{name} train+test fraction {:.4}", seen.fraction));
        }
    }
    if failures.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn region_components(raster: &GridRaster) -> Vec<(i64, usize)> {
    raster.component_counts().into_iter().collect()
}

fn criterion_4() -> Outcome {
    let seed = SEEDS[0];
    let mut failures = Vec::new();

    let cone = &spiral_147()?.cone;
    let data = spiral(400, seed).map_err(err)?;
    let bounds = raster_bounds(&data.bounds(), 0.2).map_err(err)?;
    for scale in [0.5, 0.75, 1.0, 1.25, 1.5] {
        let theta = cone.threshold * scale;
        let n = rasterize_sublevel(cone, bounds, [400, 400], theta).map_err(err)?.connected_components(1);
        println!("  invertible+cone sublevel at {theta:.3}: {n} component(s)");
        if n != 1 {
            failures.push(format!("sublevel at {theta:.3} has {n} components"));
        }
    }

    let clusters = clusters5(seed).map_err(err)?;
    let backbone = InvertibleNet::new(2, 6, 16, 3, Activation::LeakyRelu, 0.97, false, &mut fresh(seed)).map_err(err)?;
    let mut multi = MultiInvex::init_kmeans(backbone, &clusters, 7, 2.0, seed).map_err(err)?;
    let cfg = MultiTrainConfig {
        steps: 2000,
        ..Default::default()
    };
    train_multi_invex(&mut multi, &clusters, &cfg).map_err(err)?;
    println!("  multi-invex R=7 hard accuracy {:.4}", multi.accuracy(&clusters, true).map_err(err)?);
    let bounds = raster_bounds(&clusters.bounds(), 0.2).map_err(err)?;
    let regions = rasterize_regions(&multi, bounds, [400, 400]).map_err(err)?;
    for (region, n) in region_components(&regions) {
        println!("  region {region}: {n} component(s)");
        if n != 1 {
            failures.push(format!("region {region} has {n} components"));
        }
    }

    let control = two_cone_control(400).map_err(err)?;
    let (c0, c1) = (control.connected_components(0), control.connected_components(1));
    println!("  negative control (anisotropic cones): region 0 {c0} component(s), region 1 {c1}");
    if c0 < 2 {
        failures.push(format!("negative control region 0 has {c0} components"));
    }

    if failures.is_empty() {
        Ok(format!("5 sublevel sets and {} regions connected, control split into {c0}", regions.component_counts().len()))
    } else {
        Err(failures.join("; "))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Points that must change region when `center` (latent) is appended.
fn expected_add_moves(z: &Tensor, centers: &Tensor, assigned: &[usize], center: &[f64]) -> Vec<usize> {
    (0..z.rows())
        .filter(|&i| sq_dist(z.row_slice(i), center) < sq_dist(z.row_slice(i), centers.row_slice(assigned[i])))
        .collect()
}

fn criterion_5() -> Outcome {
    let seed = SEEDS[0];
    let data = clusters5(seed).map_err(err)?;
    let backbone = InvertibleNet::new(2, 6, 16, 3, Activation::LeakyRelu, 0.97, false, &mut fresh(seed)).map_err(err)?;
    let mut model = MultiInvex::init_kmeans(backbone, &data, 5, 2.0, seed).map_err(err)?;
    let cfg = MultiTrainConfig {
        steps: 2000,
        ..Default::default()
    };
    train_multi_invex(&mut model, &data, &cfg).map_err(err)?;
    println!("  R=5 hard accuracy {:.4}", model.accuracy(&data, true).map_err(err)?);
    let finetune = MultiTrainConfig {
        lr: 2e-3,
        ..Default::default()
    };
    let mut session = MorphismSession::new(model, data.clone(), finetune).map_err(err)?;
    let mut failures = Vec::new();

    let mut apply = |session: &mut MorphismSession, op: MorphOp| -> Result<(), String> {
        let before = session.model.clone();
        let z = before.latent(&data.x).map_err(err)?;
        let assigned = before.hard_regions(&data.x).map_err(err)?;
        let centers = before.state.centers();
        let step = session.apply(op.clone()).map_err(err)?;
        println!(
            "  {:<14} R={} accuracy {:.4} -> {:.4}, {} reassigned",
            op.to_string(),
            step.regions,
            step.accuracy_before,
            step.accuracy,
            step.reassigned.len()
        );
        let after = session.model.hard_regions(&data.x).map_err(err)?;
        match op {
            MorphOp::Add { x, y, .. } => {
                let c = before.latent(&Tensor::row(&[x, y])).map_err(err)?;
                let expected = expected_add_moves(&z, &centers, &assigned, c.row_slice(0));
                let new_id = step.regions - 1;
                if step.reassigned != expected || expected.iter().any(|&i| after[i] != new_id) {
                    failures.push(format!("{op}: {} moved, {} strictly closer to the new center", step.reassigned.len(), expected.len()));
                }
            }
            MorphOp::Remove { region_id } => {
                let members: Vec<usize> = (0..z.rows()).filter(|&i| assigned[i] == region_id).collect();
                let runner_up_ok = members.iter().all(|&i| {
                    let zi = z.row_slice(i);
                    let best = (0..centers.rows())
                        .filter(|&r| r != region_id)
                        .min_by(|&a, &b| sq_dist(zi, centers.row_slice(a)).total_cmp(&sq_dist(zi, centers.row_slice(b))))
                        .expect("another region");
                    after[i] == if best > region_id { best - 1 } else { best }
                });
                if step.reassigned != members || !runner_up_ok {
                    failures.push(format!("{op}: {} moved, {} former members", step.reassigned.len(), members.len()));
                }
            }
            MorphOp::Finetune { .. } => {}
        }
        Ok(())
    };

    apply(&mut session, MorphOp::Add { x: -1.0, y: -1.0, class: 2 })?;
    apply(&mut session, MorphOp::Add { x: 0.0, y: -1.0, class: 1 })?;
    apply(&mut session, MorphOp::Finetune { steps: 1000 })?;
    let worst = worst_region(&session.model.region_report(&session.data).map_err(err)?).ok_or("no regions")?;
    apply(&mut session, MorphOp::Remove { region_id: worst })?;
    apply(&mut session, MorphOp::Finetune { steps: 1000 })?;

    let final_acc = session.model.accuracy(&data, true).map_err(err)?;
    if final_acc < 0.95 {
        failures.push(format!("final hard accuracy {final_acc:.4}"));
    }
    if session.replay().map_err(err)? != session.model {
        failures.push("replay differs from the live model".into());
    }
    if failures.is_empty() {
        Ok(format!("final hard accuracy {final_acc:.4}, locality exact, replay identical"))
    } else {
        Err(failures.join("; "))
    }
}

fn criterion_6() -> Outcome {
    let suites: [(&str, fn() -> Result<(), String>); 7] = [
        ("autodiff finite differences", common::autodiff_finite_differences),
        ("invertibility round trip", common::invertibility_roundtrip),
        ("spectral norm vs SVD", common::spectral_norm_vs_svd),
        ("convexity inequality", common::convexity_inequality),
        ("softmax, partition, argmax", common::softmax_partition_argmax),
        ("clip and penalty values", common::gcgp_pointwise),
        ("soft to hard convergence", common::soft_to_hard_convergence),
    ];
    let mut failures = Vec::new();
    for (name, suite) in suites {
        let r = suite();
        println!("  {name}: {}", if r.is_ok() { "ok" } else { "failed" });
        if let Err(e) = r {
            failures.push(e);
        }
    }
    if failures.is_empty() {
        Ok(format!("{} suites", suites.len()))
    } else {
        Err(failures.join("; "))
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("spiral classification", criterion_1),
        ("Lipschitz harness", criterion_2),
        ("invexity verification", criterion_3),
        ("connectedness oracle", criterion_4),
        ("morphism replay", criterion_5),
        ("property suites", criterion_6),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        println!("criterion {id} ({name})");
        let t = Instant::now();
        let outcome = run();
        results.push((id, *name, outcome, t.elapsed()));
    }
    println!();
    let mut failed = false;
    for (id, name, outcome, took) in &results {
        match outcome {
            Ok(msg) => println!("criterion {id} {name}: PASS ({msg}) [{:.0}s]", took.as_secs_f64()),
            Err(msg) => {
                failed = true;
                println!("criterion {id} {name}: FAIL ({msg}) [{:.0}s]", took.as_secs_f64());
            }
        }
    }
    if failed {
        std::process::exit(1);
    }
}
