//! Invex functions by composition: a convex cone over an invertible backbone.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::gcgp::{bce_with_logits, binary_accuracy, HistoryRow, TrainReport};
use crate::nn::{Adam, InvertibleNet, Module};

/// `a * |z - center|` with `a = exp(log_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeHead {
    pub center: Vec<f64>,
    pub log_scale: f64,
}

impl ConeHead {
    pub fn new(center: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("cone scale must be > 0, got {scale}")));
        }
        Ok(Self {
            center,
            log_scale: scale.ln(),
        })
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn eval(&self, z: &Tensor) -> Vec<f64> {
        let a = self.scale();
        (0..z.rows())
            .map(|i| {
                a * z
                    .row_slice(i)
                    .iter()
                    .zip(&self.center)
                    .map(|(p, c)| (p - c) * (p - c))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// `f(x) = cone(backbone(x))`, classified as inner where `f(x) < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvexComposite {
    pub backbone: InvertibleNet,
    pub head: ConeHead,
    pub threshold: f64,
}

impl InvexComposite {
    /// Cone of scale 1 and threshold 1 over `backbone`.
    pub fn new(backbone: InvertibleNet, center: Vec<f64>) -> Result<Self> {
        if center.len() != backbone.dim {
            return Err(Error::Dimension {
                expected: backbone.dim,
                got: center.len(),
            });
        }
        Ok(Self {
            backbone,
            head: ConeHead::new(center, 1.0)?,
            threshold: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim
    }

    pub fn eval(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.head.eval(&self.backbone.eval_direct(x)?))
    }

    /// `(inner, P(inner))` per row, with `P = sigmoid(-(f - threshold))`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<(bool, f64)>> {
        Ok(self
            .eval(x)?
            .into_iter()
            .map(|f| {
                let m = f - self.threshold;
                (m < 0.0, crate::autodiff::sigmoid(-m))
            })
            .collect())
    }

    /// Preimage of the cone center: the unique minimizer of `f`.
    pub fn center_pullback(&self) -> Result<Vec<f64>> {
        Ok(self.backbone.inverse(&Tensor::row(&self.head.center))?.into_data())
    }

    /// Builds `f(x)` on a tape with constant parameters.
    pub fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.bind(tape, false);
        self.forward(tape, &p, x)
    }

    pub fn accuracy(&self, data: &Dataset, inner_class: usize) -> Result<f64> {
        let pred: Vec<bool> = self.predict(&data.x)?.into_iter().map(|(b, _)| b).collect();
        Ok(binary_accuracy(&pred, &data.binary_targets(inner_class)))
    }

    /// Cone center at the medoid (in latent space) of the points of `class`.
    pub fn center_at_medoid(&mut self, data: &Dataset, class: usize) -> Result<()> {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] as usize == class).collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!("no points of class {class}")));
        }
        let z = self.backbone.eval_direct(&data.x.select_rows(&idx))?;
        let m = crate::classifier::medoid(&z, &(0..idx.len()).collect::<Vec<_>>());
        self.head.center = z.row_vec(m);
        Ok(())
    }

    /// Backbone parameters followed by the cone center, log-scale and threshold.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut p = self.backbone.bind(tape, trainable);
        for t in [
            Tensor::row(&self.head.center),
            Tensor::scalar(self.head.log_scale),
            Tensor::scalar(self.threshold),
        ] {
            p.push(if trainable { tape.var(t) } else { tape.constant(t) });
        }
        p
    }

    /// `f(x)` from parameters produced by [`InvexComposite::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n = params.len();
        let z = self.backbone.forward(tape, &params[..n - 3], x)?;
        let d = tape.sub(z, params[n - 3])?;
        let r = tape.norm(d, 1)?;
        let a = tape.exp(params[n - 2]);
        Ok(tape.mul(r, a)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to 5% of `lr`.
    pub cosine: bool,
    pub log_every: usize,
}

impl Default for CompositeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 5e-3,
            cosine: true,
            log_every: 100,
        }
    }
}

pub(crate) fn cosine_lr(base: f64, step: usize, steps: usize, enabled: bool) -> f64 {
    if !enabled || steps <= 1 {
        return base;
    }
    let p = step as f64 / (steps - 1) as f64;
    let floor = 0.05;
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// BCE training of `sigmoid(-(f - threshold))` with every part trainable:
/// backbone, cone center, cone scale and threshold. Spectral bounds are
/// re-imposed after every step and tightened with 50 power iterations at the end.
pub fn train_invex_composite(
    c: &mut InvexComposite,
    data: &Dataset,
    inner_class: usize,
    cfg: &CompositeTrainConfig,
) -> Result<TrainReport> {
    if data.dim() != c.dim() {
        return Err(Error::Dimension {
            expected: c.dim(),
            got: data.dim(),
        });
    }
    let targets = Tensor::column(&data.binary_targets(inner_class));
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    c.backbone.set_training(true);
    for step in 0..cfg.steps {
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.cosine);
        let mut tape = Tape::new();
        let params = c.bind(&mut tape, true);
        let x = tape.constant(data.x.clone());
        let f = c.forward(&mut tape, &params, x)?;
        let theta = *params.last().expect("threshold");
        let m = tape.sub(f, theta)?;
        let logit = tape.neg(m);
        let t = tape.constant(targets.clone());
        let loss = bce_with_logits(&mut tape, logit, t)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            c.backbone.set_training(false);
            return Err(Error::Diverged { step });
        }
        if step + 1 == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let pred: Vec<bool> = tape.value(logit).data().iter().map(|&z| z > 0.0).collect();
            report.history.push(HistoryRow {
                step,
                loss: lv,
                accuracy: Some(binary_accuracy(&pred, targets.data())),
                invexity_fraction: None,
                empirical_k: None,
            });
        }
        let grads = tape.backward(loss, &params, &[])?;
        let nb = grads.len() - 3;
        let mut center = Tensor::row(&c.head.center);
        let mut log_scale = Tensor::scalar(c.head.log_scale);
        let mut threshold = Tensor::scalar(c.threshold);
        let mut ps = c.backbone.parameters_mut();
        debug_assert_eq!(ps.len(), nb);
        ps.extend([&mut center, &mut log_scale, &mut threshold]);
        opt.step(ps, &grads);
        c.head.center = center.into_data();
        c.head.log_scale = log_scale.item();
        c.threshold = threshold.item();
        c.backbone.project();
    }
    c.backbone.set_training(false);
    c.backbone.refresh_statistics(&data.x)?;
    c.backbone.normalize(50)?;
    Ok(report)
}
