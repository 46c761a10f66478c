//! Gradient-clipped gradient penalty (GC-GP) training.
//!
//! A constraint is expressed as a per-sample projected gradient `pg` that
//! should be positive. Each step adds `lambda * mean(smooth_l1(pg_penalty(pg)))`
//! to the loss and clamps the criterion's adjoint at the model output to
//! `+-out_clip(pg)`, so samples that violate the constraint stop pulling the
//! model further into violation.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, GradHook, Tape, Tensor, Var};
use crate::datasets::{inflate, Dataset, Task};
use crate::error::{Error, Result};
use crate::nn::{spectral_normalize, value_and_input_grad, Adam, Mlp, Module, SpectralState};

/// Below this `pg` the soft branch of [`out_clip`] applies.
pub const CLIP_SWITCH: f64 = 0.14845;
pub const CLIP_OFFSET: f64 = 0.0844560006;
/// Directions shorter than this are treated as zero (sample skipped).
pub const DIRECTION_EPS: f64 = 1e-9;

/// Bound on the criterion adjoint for a sample with projected gradient `pg`.
pub fn out_clip(pg: f64) -> f64 {
    if pg < CLIP_SWITCH {
        softplus(20.0 * pg) / 20.0
    } else {
        3.0 * pg - CLIP_OFFSET
    }
}

/// Penalty curve: close to 0 for `pg >> 0.1`, about `-5 (0.1 - pg)` for `pg << 0.1`.
pub fn pg_penalty(pg: f64) -> f64 {
    -0.25 * softplus(-20.0 * (pg - 0.1))
}

/// `grad . direction / |direction|`, or `None` for a (near) zero direction.
pub fn projected_gradient(grad: &[f64], direction: &[f64]) -> Option<f64> {
    let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= DIRECTION_EPS {
        return None;
    }
    Some(grad.iter().zip(direction).map(|(g, d)| g * d).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InvexBasic,
    InvexModified,
    InvexGuided,
    Lipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMethod {
    Gp,
    Lp,
    Sn,
    Gcgp,
}

impl std::str::FromStr for LipschitzMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(Self::Gp),
            "lp" => Ok(Self::Lp),
            "sn" => Ok(Self::Sn),
            "gcgp" => Ok(Self::Gcgp),
            other => Err(Error::invalid(format!("unknown Lipschitz method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcgpConfig {
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub mode: Mode,
    /// Adds uniformly sampled points from the inflated data box to the penalty term.
    pub random_point_penalty: bool,
    pub target_k: f64,
    /// Clamp the criterion adjoint with `out_clip`. Disabling this (with
    /// `lambda = 0`) reduces training to plain gradient descent on the criterion.
    pub clip: bool,
    /// Cosine decay of the learning rate to 5% of `lr`.
    pub cosine: bool,
    pub seed: u64,
    /// History is recorded every `log_every` steps (and at the last step).
    pub log_every: usize,
}

impl Default for GcgpConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            steps: 4000,
            lr: 1e-3,
            mode: Mode::InvexBasic,
            random_point_penalty: false,
            target_k: 1.0,
            clip: true,
            cosine: false,
            seed: 0,
            log_every: 50,
        }
    }
}

impl GcgpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.target_k > 0.0 && self.target_k.is_finite()) {
            return Err(Error::invalid(format!("target_k must be > 0, got {}", self.target_k)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        Ok(())
    }

    fn logs(&self, step: usize) -> bool {
        step + 1 == self.steps || (self.log_every > 0 && step % self.log_every == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    /// Accuracy for classification, MSE for regression.
    pub accuracy: Option<f64>,
    /// Share of training samples with `pg > 0`.
    pub invexity_fraction: Option<f64>,
    /// Largest input-gradient norm over the training points at this step.
    pub empirical_k: Option<f64>,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "accuracy", "invexity_fraction", "empirical_K"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:?}", r.loss),
            opt(r.accuracy),
            opt(r.invexity_fraction),
            opt(r.empirical_k),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    /// Samples skipped because they coincided with the center, summed over steps.
    pub skipped: usize,
}

/// Single-output invex score `f` with trainable center; the class-1 logit is `-f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasicInvex {
    pub net: Mlp,
    pub center: Vec<f64>,
    /// Label treated as the inside (sublevel-set) class.
    pub inner_class: usize,
}

impl BasicInvex {
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.eval_direct(x)?.into_data())
    }

    /// Builds `f(x)` on a tape with constant parameters.
    pub fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.net.bind(tape, false);
        self.net.forward(tape, &p, x)
    }

    pub fn predict_inner(&self, x: &Tensor) -> Result<Vec<bool>> {
        Ok(self.score(x)?.into_iter().map(|f| f < 0.0).collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict_inner(&data.x)?;
        Ok(binary_accuracy(&pred, &data.binary_targets(self.inner_class)))
    }
}

/// `h = g + f` over a frozen basic invex score `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedInvex {
    pub base: BasicInvex,
    pub g: Mlp,
}

impl ComposedInvex {
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let f = self.base.score(x)?;
        let g = self.g.eval_direct(x)?;
        Ok(f.iter().zip(g.data()).map(|(a, b)| a + b).collect())
    }

    pub fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.base.build(tape, x)?;
        let p = self.g.bind(tape, false);
        let g = self.g.forward(tape, &p, x)?;
        Ok(tape.add(f, g)?)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred: Vec<bool> = self.score(&data.x)?.into_iter().map(|h| h < 0.0).collect();
        Ok(binary_accuracy(&pred, &data.binary_targets(self.base.inner_class)))
    }
}

/// Reference invex function whose gradient field guides training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Guide {
    /// `a * |x - center|`
    Cone { center: Vec<f64>, scale: f64 },
    Basic(BasicInvex),
}

impl Guide {
    /// Input gradients of the guide at every row of `x`.
    pub fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Guide::Cone { center, scale } => {
                if center.len() != x.cols() {
                    return Err(Error::Dimension {
                        expected: center.len(),
                        got: x.cols(),
                    });
                }
                let mut out = x.clone();
                let d = x.cols();
                for i in 0..x.rows() {
                    let row = &mut out.data_mut()[i * d..(i + 1) * d];
                    row.iter_mut().zip(center).for_each(|(v, c)| *v -= c);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = if n > 0.0 { scale / n } else { 0.0 };
                    row.iter_mut().for_each(|v| *v *= s);
                }
                Ok(out)
            }
            Guide::Basic(b) => Ok(value_and_input_grad(x, |t, xv| b.build(t, xv))?.1),
        }
    }
}

/// Output `g` alone, constrained to follow a guide's gradient field; class-1 logit is `-g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedInvex {
    pub g: Mlp,
    pub guide: Guide,
    pub inner_class: usize,
}

impl GuidedInvex {
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.g.eval_direct(x)?.into_data())
    }

    pub fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.g.bind(tape, false);
        self.g.forward(tape, &p, x)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred: Vec<bool> = self.score(&data.x)?.into_iter().map(|h| h < 0.0).collect();
        Ok(binary_accuracy(&pred, &data.binary_targets(self.inner_class)))
    }
}

pub(crate) fn binary_accuracy(pred: &[bool], targets: &[f64]) -> f64 {
    let correct = pred
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| p == (t > 0.5))
        .count();
    correct as f64 / targets.len().max(1) as f64
}

/// Mean binary cross-entropy of `sigmoid(logit)` against `targets`.
pub(crate) fn bce_with_logits(tape: &mut Tape, logit: Var, targets: Var) -> Result<Var> {
    let sp = tape.softplus(logit);
    let tz = tape.mul(targets, logit)?;
    let l = tape.sub(sp, tz)?;
    Ok(tape.mean(l))
}

/// `sum(mask * smooth_l1(pg_penalty(pg)))` on the tape.
fn penalty_sum(tape: &mut Tape, pg: Var, mask: &[bool]) -> Result<Var> {
    let shifted = tape.add_scalar(pg, -0.1);
    let s = tape.scale(shifted, -20.0);
    let sp = tape.softplus(s);
    let pen = tape.scale(sp, -0.25);
    let l = tape.smooth_l1(pen);
    let m = tape.constant(Tensor::column(&mask_values(mask)));
    let lm = tape.mul(l, m)?;
    Ok(tape.sum(lm))
}

fn mask_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Projected gradient of `gx` toward `x - center` (unit direction), with the skip mask.
fn radial_pg(tape: &mut Tape, x: Var, center: Var, gx: Var) -> Result<(Var, Vec<bool>)> {
    let d = tape.sub(x, center)?;
    let n = tape.norm(d, 1)?;
    let mask: Vec<bool> = tape.value(n).data().iter().map(|&v| v > DIRECTION_EPS).collect();
    let inv = tape.recip_safe(n);
    let m = tape.constant(Tensor::column(&mask_values(&mask)));
    let inv = tape.mul(inv, m)?;
    let u = tape.mul(d, inv)?;
    Ok((tape.row_dot(gx, u)?, mask))
}

fn clip_hook(node: Var, pg: &[f64], mask: &[bool]) -> GradHook<'static> {
    let bounds = pg
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { out_clip(p) } else { f64::INFINITY })
        .collect();
    GradHook::clip_rows(node, bounds)
}

fn fraction_positive(pg: &[f64], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    let pos = pg.iter().zip(mask).filter(|(&p, &m)| m && p > 0.0).count();
    pos as f64 / n.max(1) as f64
}

fn max_row_norm(g: &Tensor) -> f64 {
    g.row_norms().into_iter().fold(0.0, f64::max)
}

struct PointSampler {
    rng: ChaCha8Rng,
    bounds: Vec<(f64, f64)>,
}

impl PointSampler {
    fn new(data: &Dataset, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bounds: inflate(&data.bounds(), 0.2),
        }
    }

    fn sample(&mut self, n: usize) -> Tensor {
        let d = self.bounds.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &(lo, hi) in &self.bounds {
                out.push(self.rng.random_range(lo..hi));
            }
        }
        Tensor::matrix(n, d, out)
    }
}

fn require_classification(data: &Dataset) -> Result<()> {
    match data.task {
        Task::Classification { .. } => Ok(()),
        Task::Regression => Err(Error::invalid(format!("{} is a regression dataset", data.name))),
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Basic invex training: `pg = grad f(x) . (x - c) / |x - c|` with a trainable center `c`.
pub fn train_basic(model: &mut BasicInvex, data: &Dataset, cfg: &GcgpConfig) -> Result<TrainReport> {
    cfg.validate()?;
    require_classification(data)?;
    if model.center.len() != data.dim() {
        return Err(Error::Dimension {
            expected: data.dim(),
            got: model.center.len(),
        });
    }
    let targets = Tensor::column(&data.binary_targets(model.inner_class));
    let mut sampler = PointSampler::new(data, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let use_penalty = cfg.lambda > 0.0;
    let need_pg = use_penalty || cfg.clip;
    for step in 0..cfg.steps {
        opt.lr = crate::invex::cosine_lr(cfg.lr, step, cfg.steps, cfg.cosine);
        let mut tape = Tape::new();
        let params = model.net.bind(&mut tape, true);
        let c = tape.var(Tensor::row(&model.center));
        let x = tape.var(data.x.clone());
        let f = model.net.forward(&mut tape, &params, x)?;
        let logit = tape.neg(f);
        let t = tape.constant(targets.clone());
        let mut loss = bce_with_logits(&mut tape, logit, t)?;
        let mut hooks = Vec::new();
        let mut frac = None;
        if need_pg {
            let gx = tape.grad(f, &[x])?[0];
            let (pg, mask) = radial_pg(&mut tape, x, c, gx)?;
            let pg_vals = tape.value(pg).data().to_vec();
            report.skipped += mask.iter().filter(|&&m| !m).count();
            frac = Some(fraction_positive(&pg_vals, &mask));
            if use_penalty {
                let mut total = penalty_sum(&mut tape, pg, &mask)?;
                let mut count = mask.iter().filter(|&&m| m).count();
                if cfg.random_point_penalty {
                    let xr = tape.var(sampler.sample(data.len()));
                    let fr = model.net.forward(&mut tape, &params, xr)?;
                    let gr = tape.grad(fr, &[xr])?[0];
                    let (pgr, mr) = radial_pg(&mut tape, xr, c, gr)?;
                    let sr = penalty_sum(&mut tape, pgr, &mr)?;
                    total = tape.add(total, sr)?;
                    count += mr.iter().filter(|&&m| m).count();
                }
                let pen = tape.scale(total, cfg.lambda / count.max(1) as f64);
                loss = tape.add(loss, pen)?;
            }
            if cfg.clip {
                hooks.push(clip_hook(logit, &pg_vals, &mask));
            }
        }
        let loss_val = tape.value(loss).item();
        check_finite(loss_val, step)?;
        if cfg.logs(step) {
            let pred: Vec<bool> = tape.value(logit).data().iter().map(|&z| z > 0.0).collect();
            report.history.push(HistoryRow {
                step,
                loss: loss_val,
                accuracy: Some(binary_accuracy(&pred, targets.data())),
                invexity_fraction: frac,
                empirical_k: None,
            });
        }
        let mut wrt = params.clone();
        wrt.push(c);
        let grads = tape.backward(loss, &wrt, &hooks)?;
        let mut center = Tensor::row(&model.center);
        let mut ps = model.net.parameters_mut();
        ps.push(&mut center);
        opt.step(ps, &grads);
        model.center = center.into_data();
    }
    Ok(report)
}

/// Modified invex training of `g` over a frozen basic model `f`: the prediction
/// is `h = g + f` and `pg = grad h . grad f`.
pub fn train_modified(g: &mut Mlp, base: &BasicInvex, data: &Dataset, cfg: &GcgpConfig) -> Result<TrainReport> {
    cfg.validate()?;
    require_classification(data)?;
    let targets = Tensor::column(&data.binary_targets(base.inner_class));
    let (f_vals, f_grad) = value_and_input_grad(&data.x, |t, x| base.build(t, x))?;
    let guide = GuideField::Frozen {
        values: Tensor::column(&f_vals),
        grads: f_grad,
        base,
    };
    train_guided_inner(g, &guide, true, &targets, data, cfg)
}

/// Guided invex training: prediction is `g` alone and `pg = grad g . grad guide`.
pub fn train_guided(g: &mut Mlp, guide: &Guide, inner_class: usize, data: &Dataset, cfg: &GcgpConfig) -> Result<TrainReport> {
    cfg.validate()?;
    require_classification(data)?;
    let targets = Tensor::column(&data.binary_targets(inner_class));
    let grads = guide.gradient(&data.x)?;
    train_guided_inner(g, &GuideField::Guide { guide, grads }, false, &targets, data, cfg)
}

/// Projected gradients of `g` along a guide's gradient field at `x`.
pub fn guided_projected_gradients(g: &Mlp, guide: &Guide, x: &Tensor) -> Result<Vec<f64>> {
    let (_, gg) = value_and_input_grad(x, |t, xv| {
        let p = g.bind(t, false);
        g.forward(t, &p, xv)
    })?;
    let gf = guide.gradient(x)?;
    Ok((0..x.rows())
        .map(|i| gg.row_slice(i).iter().zip(gf.row_slice(i)).map(|(a, b)| a * b).sum())
        .collect())
}

enum GuideField<'a> {
    Frozen {
        values: Tensor,
        grads: Tensor,
        base: &'a BasicInvex,
    },
    Guide {
        guide: &'a Guide,
        grads: Tensor,
    },
}

impl GuideField<'_> {
    fn train_grads(&self) -> &Tensor {
        match self {
            GuideField::Frozen { grads, .. } | GuideField::Guide { grads, .. } => grads,
        }
    }

    fn grads_at(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            GuideField::Frozen { base, .. } => Ok(value_and_input_grad(x, |t, xv| base.build(t, xv))?.1),
            GuideField::Guide { guide, .. } => guide.gradient(x),
        }
    }
}

fn train_guided_inner(
    g: &mut Mlp,
    field: &GuideField<'_>,
    add_base: bool,
    targets: &Tensor,
    data: &Dataset,
    cfg: &GcgpConfig,
) -> Result<TrainReport> {
    let mut sampler = PointSampler::new(data, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mask = vec![true; data.len()];
    for step in 0..cfg.steps {
        opt.lr = crate::invex::cosine_lr(cfg.lr, step, cfg.steps, cfg.cosine);
        let mut tape = Tape::new();
        let params = g.bind(&mut tape, true);
        let x = tape.var(data.x.clone());
        let gv = g.forward(&mut tape, &params, x)?;
        let gx = tape.grad(gv, &[x])?[0];
        let gf = tape.constant(field.train_grads().clone());
        let (score, dir) = match field {
            GuideField::Frozen { values, .. } if add_base => {
                let fv = tape.constant(values.clone());
                let h = tape.add(gv, fv)?;
                let gh = tape.add(gx, gf)?;
                (h, gh)
            }
            _ => (gv, gx),
        };
        let pg = tape.row_dot(dir, gf)?;
        let pg_vals = tape.value(pg).data().to_vec();
        let logit = tape.neg(score);
        let t = tape.constant(targets.clone());
        let mut loss = bce_with_logits(&mut tape, logit, t)?;
        if cfg.lambda > 0.0 {
            let mut total = penalty_sum(&mut tape, pg, &mask)?;
            let mut count = data.len();
            if cfg.random_point_penalty {
                let xr_vals = sampler.sample(data.len());
                let gfr = tape.constant(field.grads_at(&xr_vals)?);
                let xr = tape.var(xr_vals);
                let gr = g.forward(&mut tape, &params, xr)?;
                let grx = tape.grad(gr, &[xr])?[0];
                let dir_r = if add_base { tape.add(grx, gfr)? } else { grx };
                let pgr = tape.row_dot(dir_r, gfr)?;
                let sr = penalty_sum(&mut tape, pgr, &vec![true; data.len()])?;
                total = tape.add(total, sr)?;
                count *= 2;
            }
            let pen = tape.scale(total, cfg.lambda / count as f64);
            loss = tape.add(loss, pen)?;
        }
        let hooks = if cfg.clip {
            vec![clip_hook(logit, &pg_vals, &mask)]
        } else {
            Vec::new()
        };
        let loss_val = tape.value(loss).item();
        check_finite(loss_val, step)?;
        if cfg.logs(step) {
            let pred: Vec<bool> = tape.value(logit).data().iter().map(|&z| z > 0.0).collect();
            report.history.push(HistoryRow {
                step,
                loss: loss_val,
                accuracy: Some(binary_accuracy(&pred, targets.data())),
                invexity_fraction: Some(fraction_positive(&pg_vals, &mask)),
                empirical_k: None,
            });
        }
        let grads = tape.backward(loss, &params, &hooks)?;
        opt.step(g.parameters_mut(), &grads);
    }
    Ok(report)
}

/// Plain BCE training of a single-logit model (class 1 where the output is positive).
pub fn train_ordinary<M: Module>(
    model: &mut M,
    data: &Dataset,
    positive_class: usize,
    steps: usize,
    lr: f64,
) -> Result<TrainReport> {
    require_classification(data)?;
    let targets = Tensor::column(&data.binary_targets(positive_class));
    let mut opt = Adam::new(lr);
    let mut report = TrainReport::default();
    for step in 0..steps {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let x = tape.constant(data.x.clone());
        let logit = model.forward(&mut tape, &params, x)?;
        let t = tape.constant(targets.clone());
        let loss = bce_with_logits(&mut tape, logit, t)?;
        let loss_val = tape.value(loss).item();
        check_finite(loss_val, step)?;
        if step + 1 == steps || step % 50 == 0 {
            let pred: Vec<bool> = tape.value(logit).data().iter().map(|&z| z > 0.0).collect();
            report.history.push(HistoryRow {
                step,
                loss: loss_val,
                accuracy: Some(binary_accuracy(&pred, targets.data())),
                invexity_fraction: None,
                empirical_k: None,
            });
        }
        let grads = tape.backward(loss, &params, &[])?;
        opt.step(model.parameters_mut(), &grads);
        model.project();
    }
    Ok(report)
}

/// Accuracy of a single-logit model, class 1 where the output is positive.
pub fn logit_accuracy<M: Module>(model: &M, data: &Dataset, positive_class: usize) -> Result<f64> {
    let out = model.eval(&data.x)?;
    let pred: Vec<bool> = out.data().iter().map(|&z| z > 0.0).collect();
    Ok(binary_accuracy(&pred, &data.binary_targets(positive_class)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzMetrics {
    pub method: LipschitzMethod,
    /// Final criterion value (MSE or BCE), without the penalty.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub empirical_k: f64,
    pub min_grad_norm: f64,
    pub ms_per_step: f64,
}

/// Training points plus a 101x101 grid over the data box (2D inputs only).
pub fn lipschitz_eval_points(data: &Dataset) -> Tensor {
    if data.dim() != 2 {
        return data.x.clone();
    }
    let b = data.bounds();
    let n = 101;
    let mut grid = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            grid.push(b[0].0 + (b[0].1 - b[0].0) * j as f64 / (n - 1) as f64);
            grid.push(b[1].0 + (b[1].1 - b[1].0) * i as f64 / (n - 1) as f64);
        }
    }
    Tensor::vstack(&[&data.x, &Tensor::matrix(n * n, 2, grid)])
}

fn criterion(tape: &mut Tape, model: &Mlp, out: Var, targets: Var, task: Task) -> Result<Var> {
    match task {
        Task::Regression => {
            let d = tape.sub(out, targets)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
        Task::Classification { .. } => {
            let last = model.layers.last().expect("non-empty").activation;
            if last == crate::nn::Activation::Sigmoid4 {
                let p = tape.scale(out, 0.25);
                let p = tape.clamp(p, 1e-7, 1.0 - 1e-7);
                let lp = tape.log(p);
                let a = tape.mul(targets, lp)?;
                let np = tape.neg(p);
                let q = tape.add_scalar(np, 1.0);
                let lq = tape.log(q);
                let nt = tape.neg(targets);
                let omt = tape.add_scalar(nt, 1.0);
                let b = tape.mul(omt, lq)?;
                let s = tape.add(a, b)?;
                let m = tape.mean(s);
                Ok(tape.neg(m))
            } else {
                bce_with_logits(tape, out, targets)
            }
        }
    }
}

fn task_score(out: &[f64], targets: &[f64], task: Task, sigmoid4: bool) -> f64 {
    match task {
        Task::Regression => out.iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64,
        Task::Classification { .. } => {
            let thr = if sigmoid4 { 2.0 } else { 0.0 };
            let pred: Vec<bool> = out.iter().map(|&z| z > thr).collect();
            binary_accuracy(&pred, targets)
        }
    }
}

/// Trains `model` under a K-Lipschitz constraint with the chosen method.
///
/// Regression uses MSE; classification uses BCE on the logit, or on `output / 4`
/// when the last activation is `sigmoid4`.
pub fn train_lipschitz(
    model: &mut Mlp,
    data: &Dataset,
    cfg: &GcgpConfig,
    method: LipschitzMethod,
) -> Result<(LipschitzMetrics, TrainReport)> {
    cfg.validate()?;
    let k = cfg.target_k;
    let targets = Tensor::column(&match data.task {
        Task::Regression => data.y.clone(),
        Task::Classification { .. } => data.binary_targets(1),
    });
    let sigmoid4 = model.layers.last().map(|l| l.activation) == Some(crate::nn::Activation::Sigmoid4);
    let mut spectral: Vec<SpectralState> = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let per_layer = k.powf(1.0 / model.layers.len() as f64);
        model
            .layers
            .iter()
            .map(|l| SpectralState::new(l.inputs(), l.outputs(), per_layer, &mut rng))
            .collect()
    };
    let project = |model: &mut Mlp, spectral: &mut [SpectralState], iters: usize| -> Result<()> {
        for (l, s) in model.layers.iter_mut().zip(spectral.iter_mut()) {
            l.weight = spectral_normalize(&l.weight, s, iters)?;
        }
        Ok(())
    };
    if method == LipschitzMethod::Sn {
        project(model, &mut spectral, 50)?;
    }
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let start = Instant::now();
    for step in 0..cfg.steps {
        opt.lr = crate::invex::cosine_lr(cfg.lr, step, cfg.steps, cfg.cosine);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let x = tape.var(data.x.clone());
        let out = model.forward(&mut tape, &params, x)?;
        let t = tape.constant(targets.clone());
        let crit = criterion(&mut tape, model, out, t, data.task)?;
        let mut loss = crit;
        let mut hooks = Vec::new();
        let mut step_k = None;
        if method != LipschitzMethod::Sn {
            let gx = tape.grad(out, &[x])?[0];
            let norm = tape.norm(gx, 1)?;
            step_k = Some(tape.value(norm).data().iter().cloned().fold(0.0, f64::max));
            let n = data.len() as f64;
            match method {
                LipschitzMethod::Gp | LipschitzMethod::Lp => {
                    let excess = tape.add_scalar(norm, -k);
                    let e = if method == LipschitzMethod::Lp { tape.relu(excess) } else { excess };
                    let s = tape.smooth_l1(e);
                    let total = tape.sum(s);
                    let pen = tape.scale(total, cfg.lambda / n);
                    loss = tape.add(loss, pen)?;
                }
                LipschitzMethod::Gcgp => {
                    let neg = tape.neg(norm);
                    let pg = tape.add_scalar(neg, k);
                    let pg_vals = tape.value(pg).data().to_vec();
                    let mask = vec![true; data.len()];
                    let total = penalty_sum(&mut tape, pg, &mask)?;
                    let pen = tape.scale(total, cfg.lambda / n);
                    loss = tape.add(loss, pen)?;
                    if cfg.clip {
                        hooks.push(clip_hook(out, &pg_vals, &mask));
                    }
                }
                LipschitzMethod::Sn => unreachable!(),
            }
        }
        let loss_val = tape.value(loss).item();
        check_finite(loss_val, step)?;
        if cfg.logs(step) {
            report.history.push(HistoryRow {
                step,
                loss: loss_val,
                accuracy: Some(task_score(tape.value(out).data(), targets.data(), data.task, sigmoid4)),
                invexity_fraction: None,
                empirical_k: step_k,
            });
        }
        let grads = tape.backward(loss, &params, &hooks)?;
        opt.step(model.parameters_mut(), &grads);
        if method == LipschitzMethod::Sn {
            project(model, &mut spectral, 1)?;
        }
    }
    if method == LipschitzMethod::Sn {
        project(model, &mut spectral, 50)?;
    }
    let ms_per_step = start.elapsed().as_secs_f64() * 1e3 / cfg.steps as f64;
    let out = model.eval_direct(&data.x)?;
    let score = task_score(out.data(), targets.data(), data.task, sigmoid4);
    let (loss, accuracy) = match data.task {
        Task::Regression => (score, None),
        Task::Classification { .. } => {
            let mut tape = Tape::new();
            let o = tape.constant(out);
            let t = tape.constant(targets);
            let c = criterion(&mut tape, model, o, t, data.task)?;
            (tape.value(c).item(), Some(score))
        }
    };
    let pts = lipschitz_eval_points(data);
    let (_, g) = value_and_input_grad(&pts, |t, xv| {
        let p = model.bind(t, false);
        model.forward(t, &p, xv)
    })?;
    let norms = g.row_norms();
    let empirical_k = max_row_norm(&g);
    let min_grad_norm = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((
        LipschitzMetrics {
            method,
            loss,
            accuracy,
            empirical_k,
            min_grad_norm,
            ms_per_step,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_branches() {
        assert!((out_clip(0.0) - std::f64::consts::LN_2 / 20.0).abs() < 1e-15);
        assert!((out_clip(1.0) - 2.9155439994).abs() < 1e-12);
        assert!(out_clip(-1.0) > 0.0 && out_clip(-1.0) < 2e-10);
    }

    #[test]
    fn projected_gradient_skips_zero_direction() {
        assert_eq!(projected_gradient(&[1.0, 0.0], &[2.0, 0.0]), Some(1.0));
        assert_eq!(projected_gradient(&[1.0, 0.0], &[0.0, 0.0]), None);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("gcgp".parse::<LipschitzMethod>().unwrap(), LipschitzMethod::Gcgp);
        assert!("wgan".parse::<LipschitzMethod>().is_err());
    }
}
