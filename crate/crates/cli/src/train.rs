use invexnet::checkpoint::{Checkpoint, Model};
use invexnet::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig};
use invexnet::datasets::{Dataset, Task};
use invexnet::gcgp::{
    lipschitz_eval_points, logit_accuracy, train_basic, train_guided, train_lipschitz, train_modified, train_ordinary, write_history_csv,
    BasicInvex, ComposedInvex, GcgpConfig, Guide, GuidedInvex, HistoryRow, Mode, TrainReport,
};
use invexnet::invex::{train_invex_composite, CompositeTrainConfig, InvexComposite};
use invexnet::nn::{Activation, ConvexNet, InvertibleNet, Mlp};
use invexnet::verify::{check_invexity_default, estimate_lipschitz, Direction, PointSource, ScalarField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GuideKind, Method, Resolved};
use crate::{data, CliError, CliResult};

const LOG_EVERY: usize = 50;

/// Contents of `summary.json`. Holds no timings, so equal configs give equal files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    /// `accuracy` or `mse`.
    pub metric: String,
    pub final_accuracy_or_mse: f64,
    #[serde(rename = "empirical_K")]
    pub empirical_k: Option<f64>,
    /// Share of training points obeying the projected-gradient rule (invex methods).
    pub invexity_fraction: Option<f64>,
}

fn sizes(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![d];
    s.extend_from_slice(hidden);
    s.push(1);
    s
}

fn class_mean(data: &Dataset, class: usize) -> CliResult<Vec<f64>> {
    let t = data.binary_targets(class);
    let n: f64 = t.iter().sum();
    if n == 0.0 {
        return Err(CliError::config(format!("class {class} has no samples")));
    }
    Ok((0..data.dim())
        .map(|j| (0..data.len()).map(|i| data.x.get(i, j) * t[i]).sum::<f64>() / n)
        .collect())
}

fn gcgp(cfg: &Resolved, mode: Mode) -> GcgpConfig {
    GcgpConfig {
        lambda: cfg.lambda,
        steps: cfg.steps,
        lr: cfg.lr,
        mode,
        target_k: cfg.target_k,
        seed: cfg.seed,
        log_every: LOG_EVERY,
        ..Default::default()
    }
}

fn require_classes(data: &Dataset, cfg: &Resolved) -> CliResult<()> {
    match data.task {
        Task::Classification { classes } if cfg.inner_class < classes => Ok(()),
        Task::Classification { classes } => Err(CliError::config(format!("--inner-class {} but the dataset has {classes} classes", cfg.inner_class))),
        Task::Regression => Err(CliError::config(format!("{} needs a classification dataset", cfg.method))),
    }
}

/// Trains the configured model and returns it with its training history.
pub fn fit(cfg: &Resolved, data: &Dataset) -> CliResult<(Model, Vec<HistoryRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = data.dim();
    let inner = cfg.inner_class;
    if !matches!(cfg.method, Method::Lipschitz(_)) {
        require_classes(data, cfg)?;
    }
    let mlp = |rng: &mut ChaCha8Rng| Mlp::new(&sizes(d, &cfg.hidden), cfg.activation, Activation::None, rng);
    let backbone = |rng: &mut ChaCha8Rng| InvertibleNet::new(d, cfg.blocks, cfg.block_hidden, cfg.depth, cfg.activation, cfg.coeff, cfg.batch_norm, rng);
    Ok(match cfg.method {
        Method::Ordinary => {
            let mut net = mlp(&mut rng);
            let r = train_ordinary(&mut net, data, inner, cfg.steps, cfg.lr)?;
            (Model::Ordinary { net, positive_class: inner }, r.history)
        }
        Method::Convex => {
            let mut net = ConvexNet::new(&sizes(d, &cfg.hidden), cfg.activation, &mut rng)?;
            let r = train_ordinary(&mut net, data, inner, cfg.steps, cfg.lr)?;
            (Model::Convex { net, positive_class: inner }, r.history)
        }
        Method::InvexBasic | Method::InvexModified | Method::InvexGuided => {
            let guided_by_cone = cfg.method == Method::InvexGuided && cfg.guide == GuideKind::Cone;
            let (base, mut history) = if guided_by_cone {
                (None, Vec::new())
            } else {
                let mut base = BasicInvex { net: mlp(&mut rng), center: class_mean(data, inner)?, inner_class: inner };
                let r = train_basic(&mut base, data, &gcgp(cfg, Mode::InvexBasic))?;
                (Some(base), r.history)
            };
            let mut g = mlp(&mut rng);
            let mut extend = |r: TrainReport| {
                let offset = if history.is_empty() { 0 } else { cfg.steps };
                history.extend(r.history.into_iter().map(|mut h| {
                    h.step += offset;
                    h
                }));
            };
            let model = match (cfg.method, base) {
                (Method::InvexBasic, Some(base)) => Model::InvexBasic(base),
                (Method::InvexModified, Some(base)) => {
                    extend(train_modified(&mut g, &base, data, &gcgp(cfg, Mode::InvexModified))?);
                    Model::InvexModified(ComposedInvex { base, g })
                }
                (_, base) => {
                    let guide = match base {
                        Some(b) => Guide::Basic(b),
                        None => Guide::Cone { center: class_mean(data, inner)?, scale: 1.0 },
                    };
                    extend(train_guided(&mut g, &guide, inner, data, &gcgp(cfg, Mode::InvexGuided))?);
                    Model::InvexGuided(GuidedInvex { g, guide, inner_class: inner })
                }
            };
            (model, history)
        }
        Method::InvexInvertible => {
            let mut m = InvexComposite::new(backbone(&mut rng)?, vec![0.0; d])?;
            m.center_at_medoid(data, inner)?;
            let tc = CompositeTrainConfig { steps: cfg.steps, lr: cfg.lr, cosine: true, log_every: LOG_EVERY };
            let r = train_invex_composite(&mut m, data, inner, &tc)?;
            (Model::InvexInvertible(m), r.history)
        }
        Method::MultiInvex => {
            if cfg.regions > data.len() {
                return Err(CliError::config(format!("--regions {} exceeds the {} samples", cfg.regions, data.len())));
            }
            let mut m = MultiInvex::init_kmeans(backbone(&mut rng)?, data, cfg.regions, 2.0, cfg.seed)?;
            let tc = MultiTrainConfig { steps: cfg.steps, lr: cfg.lr, log_every: LOG_EVERY, ..Default::default() };
            let r = train_multi_invex(&mut m, data, &tc)?;
            (Model::MultiInvex(m), r.history)
        }
        Method::Lipschitz(method) => {
            let mut net = mlp(&mut rng);
            let (_, r) = train_lipschitz(&mut net, data, &gcgp(cfg, Mode::Lipschitz), method)?;
            (Model::Lipschitz { net, method, target_k: cfg.target_k }, r.history)
        }
    })
}

/// Projected-gradient rule used to verify a model, if it has one.
pub fn invexity_direction(model: &Model) -> CliResult<Option<DirectionOwned>> {
    Ok(match model {
        Model::InvexBasic(b) => Some(DirectionOwned::Center(b.center.clone())),
        Model::InvexModified(c) => Some(DirectionOwned::Guide(Guide::Basic(c.base.clone()))),
        Model::InvexGuided(g) => Some(DirectionOwned::Guide(g.guide.clone())),
        Model::InvexInvertible(m) => Some(DirectionOwned::Center(m.center_pullback()?)),
        _ => None,
    })
}

pub enum DirectionOwned {
    Center(Vec<f64>),
    Guide(Guide),
}

impl DirectionOwned {
    pub fn borrow(&self) -> Direction<'_> {
        match self {
            DirectionOwned::Center(c) => Direction::TowardCenter(c),
            DirectionOwned::Guide(g) => Direction::GuideGradient(g),
        }
    }
}

fn final_score(model: &Model, data: &Dataset, inner_class: usize) -> CliResult<(String, f64)> {
    let acc = |v: invexnet::Result<f64>| -> CliResult<(String, f64)> { Ok(("accuracy".into(), v?)) };
    match model {
        Model::Ordinary { net, positive_class } => acc(logit_accuracy(net, data, *positive_class)),
        Model::Convex { net, positive_class } => acc(logit_accuracy(net, data, *positive_class)),
        Model::InvexBasic(m) => acc(m.accuracy(data)),
        Model::InvexModified(m) => acc(m.accuracy(data)),
        Model::InvexGuided(m) => acc(m.accuracy(data)),
        Model::InvexInvertible(m) => acc(m.accuracy(data, inner_class)),
        Model::MultiInvex(m) => acc(m.accuracy(data, true)),
        Model::Lipschitz { net, .. } => {
            let out = net.eval_direct(&data.x)?;
            match data.task {
                Task::Regression => {
                    let mse = out.data().iter().zip(&data.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / data.len() as f64;
                    Ok(("mse".into(), mse))
                }
                Task::Classification { .. } => {
                    let thr = if net.layers.last().map(|l| l.activation) == Some(Activation::Sigmoid4) { 2.0 } else { 0.0 };
                    let t = data.binary_targets(1);
                    let ok = out.data().iter().zip(&t).filter(|(&o, &t)| (o > thr) == (t > 0.5)).count();
                    Ok(("accuracy".into(), ok as f64 / data.len() as f64))
                }
            }
        }
    }
}

pub fn summarize(cfg: &Resolved, model: &Model, data: &Dataset) -> CliResult<Summary> {
    let (metric, value) = final_score(model, data, cfg.inner_class)?;
    let field: Option<&dyn ScalarField> = model.scalar_field();
    let empirical_k = match field {
        Some(f) => Some(estimate_lipschitz(f, &lipschitz_eval_points(data))?.max),
        None => None,
    };
    let invexity_fraction = match (field, invexity_direction(model)?) {
        (Some(f), Some(dir)) => Some(check_invexity_default(f, &data.x, dir.borrow(), PointSource::Train)?.fraction),
        _ => None,
    };
    Ok(Summary {
        method: cfg.method.to_string(),
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        metric,
        final_accuracy_or_mse: value,
        empirical_k,
        invexity_fraction,
    })
}

pub fn run(cfg: &Resolved) -> CliResult<Summary> {
    let (train, dref) = data::load(&cfg.dataset, &cfg.label_column, cfg.seed)?;
    let (model, history) = fit(cfg, &train)?;
    let summary = summarize(cfg, &model, &train)?;
    let ckpt = Checkpoint::new(model, Some(dref));
    let mut csv = Vec::new();
    write_history_csv(&history, &mut csv)?;
    data::write(&cfg.out.join("checkpoint.json"), ckpt.to_json()?.as_bytes())?;
    data::write(&cfg.out.join("metrics.csv"), &csv)?;
    data::write(&cfg.out.join("summary.json"), &data::json(&summary)?)?;
    Ok(summary)
}
