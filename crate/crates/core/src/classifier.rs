//! Connected-region classifier: a Voronoi partition of the latent space of an
//! invertible backbone, each region voting a class distribution.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::gcgp::{HistoryRow, TrainReport};
use crate::invex::cosine_lr;
use crate::nn::{Adam, InvertibleNet, Module};

/// Class logit given to a freshly added region.
pub const NEW_REGION_LOGIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightType {
    /// `z W + b` with `W` of shape `[D, R]`.
    Linear,
    /// `-(|z - c_r| / sqrt(D) + b_r)` with centers of shape `[R, D]`.
    Euclidean,
}

impl std::str::FromStr for WeightType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(Error::invalid(format!("unknown weight type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectedClassifierState {
    pub weight_type: WeightType,
    /// `[D, R]` for linear scoring, `[R, D]` (centers) for euclidean.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// `[R, C]`; the row softmax gives each region's class distribution.
    pub region_class_logits: Tensor,
    /// Log of the inverse temperature.
    pub inverse_temp: f64,
    /// Bumped by every mutation and training call.
    pub revision: u64,
}

impl ConnectedClassifierState {
    pub fn new(weight_type: WeightType, weight: Tensor, bias: Vec<f64>, region_class_logits: Tensor) -> Result<Self> {
        let s = Self {
            weight_type,
            weight,
            bias,
            region_class_logits,
            inverse_temp: 0.0,
            revision: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Euclidean state with zero bias and the given per-region classes at logit `kappa`.
    pub fn euclidean(centers: Tensor, region_classes: &[usize], classes: usize, kappa: f64) -> Result<Self> {
        let r = centers.rows();
        if region_classes.len() != r {
            return Err(Error::Dimension {
                expected: r,
                got: region_classes.len(),
            });
        }
        let mut logits = Tensor::zeros(r, classes);
        for (i, &c) in region_classes.iter().enumerate() {
            if c >= classes {
                return Err(Error::invalid(format!("class {c} out of range for {classes} classes")));
            }
            logits.set(i, c, kappa);
        }
        Self::new(WeightType::Euclidean, centers, vec![0.0; r], logits)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.num_regions();
        let c = self.region_class_logits.cols();
        if r == 0 || c == 0 {
            return Err(Error::invalid("a classifier needs at least one region and one class"));
        }
        if self.bias.len() != r || self.region_class_logits.rows() != r {
            return Err(Error::invalid(format!(
                "inconsistent region counts: weight {r}, bias {}, logits {}",
                self.bias.len(),
                self.region_class_logits.rows()
            )));
        }
        let finite = self.weight.all_finite()
            && self.region_class_logits.all_finite()
            && self.bias.iter().all(|b| b.is_finite())
            && self.inverse_temp.is_finite();
        if !finite {
            return Err(Error::invalid("classifier state has non-finite values"));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        match self.weight_type {
            WeightType::Linear => self.weight.cols(),
            WeightType::Euclidean => self.weight.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self.weight_type {
            WeightType::Linear => self.weight.rows(),
            WeightType::Euclidean => self.weight.cols(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.region_class_logits.cols()
    }

    pub fn class_probs(&self) -> Tensor {
        softmax_rows(&self.region_class_logits)
    }

    /// Class with the highest probability in each region.
    pub fn region_classes(&self) -> Vec<usize> {
        let p = self.class_probs();
        (0..p.rows()).map(|r| argmax(p.row_slice(r))).collect()
    }

    fn check_dim(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.cols(),
            });
        }
        Ok(())
    }

    /// `[B, R]` region scores.
    pub fn region_scores(&self, z: &Tensor) -> Result<Tensor> {
        self.check_dim(z)?;
        let t = self.inverse_temp.exp();
        let (b, r) = (z.rows(), self.num_regions());
        let mut out = Tensor::zeros(b, r);
        match self.weight_type {
            WeightType::Linear => {
                let s = z.matmul(&self.weight);
                for i in 0..b {
                    for j in 0..r {
                        out.set(i, j, (s.get(i, j) + self.bias[j]) * t);
                    }
                }
            }
            WeightType::Euclidean => {
                let norm = (self.dim() as f64).sqrt();
                for i in 0..b {
                    let zi = z.row_slice(i);
                    for j in 0..r {
                        let d = distance(zi, self.weight.row_slice(j));
                        out.set(i, j, -(d / norm + self.bias[j]) * t);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Winning region per row; exact ties go to the lowest index.
    pub fn hard_regions(&self, z: &Tensor) -> Result<Vec<usize>> {
        let s = self.region_scores(z)?;
        Ok((0..s.rows()).map(|i| argmax(s.row_slice(i))).collect())
    }

    /// `[B, C]` class probabilities: `softmax(scores) P` or `onehot(argmax) P`.
    pub fn classify(&self, z: &Tensor, hard: bool) -> Result<Tensor> {
        let p = self.class_probs();
        if hard {
            let regions = self.hard_regions(z)?;
            return Ok(p.select_rows(&regions));
        }
        let w = softmax_rows(&self.region_scores(z)?);
        Ok(w.matmul(&p))
    }

    /// Region centers (euclidean) or weight columns (linear) as `[R, D]` rows.
    pub fn centers(&self) -> Tensor {
        match self.weight_type {
            WeightType::Linear => self.weight.transpose(),
            WeightType::Euclidean => self.weight.clone(),
        }
    }

    /// Parameters on the tape: weight, bias `[1, R]`, class logits, log inverse temperature.
    fn bind(&self, tape: &mut Tape, train_bias: bool) -> [Var; 4] {
        [
            tape.var(self.weight.clone()),
            if train_bias {
                tape.var(Tensor::row(&self.bias))
            } else {
                tape.constant(Tensor::row(&self.bias))
            },
            tape.var(self.region_class_logits.clone()),
            tape.var(Tensor::scalar(self.inverse_temp)),
        ]
    }

    fn scores_on_tape(&self, tape: &mut Tape, p: &[Var; 4], z: Var) -> Result<Var> {
        let raw = match self.weight_type {
            WeightType::Linear => {
                let s = tape.matmul(z, p[0])?;
                tape.add(s, p[1])?
            }
            WeightType::Euclidean => {
                let d = tape.cdist(z, p[0])?;
                let d = tape.scale(d, 1.0 / (self.dim() as f64).sqrt());
                let s = tape.add(d, p[1])?;
                tape.neg(s)
            }
        };
        let t = tape.exp(p[3]);
        Ok(tape.mul(raw, t)?)
    }
}

/// A classifier state over an invertible backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiInvex {
    pub backbone: InvertibleNet,
    pub state: ConnectedClassifierState,
}

impl MultiInvex {
    pub fn new(backbone: InvertibleNet, state: ConnectedClassifierState) -> Result<Self> {
        if backbone.dim != state.dim() {
            return Err(Error::Dimension {
                expected: backbone.dim,
                got: state.dim(),
            });
        }
        Ok(Self { backbone, state })
    }

    /// Euclidean classifier with `regions` centers placed by k-means++ and a
    /// few Lloyd iterations on the latent codes of `data`. Each region starts
    /// voting the majority label of its members at logit `init_logit`.
    pub fn init_kmeans(backbone: InvertibleNet, data: &Dataset, regions: usize, init_logit: f64, seed: u64) -> Result<Self> {
        if regions == 0 {
            return Err(Error::invalid("at least one region is required"));
        }
        if regions > data.len() {
            return Err(Error::invalid(format!("{regions} regions for {} points", data.len())));
        }
        let classes = data.classes();
        if classes == 0 {
            return Err(Error::invalid("multi-region classification needs a labelled dataset"));
        }
        let z = backbone.eval_direct(&data.x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = kmeans(&z, regions, 20, &mut rng);
        let assign: Vec<usize> = (0..z.rows())
            .map(|i| nearest(z.row_slice(i), &centers).0)
            .collect();
        let labels = data.labels();
        let mut logits = Tensor::zeros(regions, classes);
        for r in 0..regions {
            let mut counts = vec![0usize; classes];
            for (i, &a) in assign.iter().enumerate() {
                if a == r {
                    counts[labels[i]] += 1;
                }
            }
            let best = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
            logits.set(r, best, init_logit);
        }
        let state = ConnectedClassifierState::new(WeightType::Euclidean, centers, vec![0.0; regions], logits)?;
        Self::new(backbone, state)
    }

    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.eval_direct(x)
    }

    pub fn predict(&self, x: &Tensor, hard: bool) -> Result<Tensor> {
        self.state.classify(&self.latent(x)?, hard)
    }

    pub fn hard_regions(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.state.hard_regions(&self.latent(x)?)
    }

    pub fn predict_labels(&self, x: &Tensor, hard: bool) -> Result<Vec<usize>> {
        let p = self.predict(x, hard)?;
        Ok((0..p.rows()).map(|i| argmax(p.row_slice(i))).collect())
    }

    pub fn accuracy(&self, data: &Dataset, hard: bool) -> Result<f64> {
        let pred = self.predict_labels(&data.x, hard)?;
        let labels = data.labels();
        let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    /// Region centers pulled back to input space (euclidean only).
    pub fn input_space_centers(&self) -> Result<Tensor> {
        if self.state.weight_type != WeightType::Euclidean {
            return Err(Error::Unsupported("linear regions have no centers".into()));
        }
        self.backbone.inverse(&self.state.weight)
    }

    /// Appends the latent image of `center` as a new region voting `class`.
    pub fn add_region(&mut self, center: &[f64], class: usize) -> Result<usize> {
        add_region(&mut self.state, &self.backbone, center, class)
    }

    pub fn remove_region(&mut self, region: usize) -> Result<()> {
        remove_region(&mut self.state, region)
    }

    pub fn region_report(&self, data: &Dataset) -> Result<Vec<RegionReport>> {
        region_report(&self.backbone, &self.state, data)
    }
}

/// Appends a region at `backbone(center)` with zero bias and class logits
/// `NEW_REGION_LOGIT * onehot(class)`. Returns the new region id.
pub fn add_region(state: &mut ConnectedClassifierState, backbone: &InvertibleNet, center: &[f64], class: usize) -> Result<usize> {
    if state.weight_type != WeightType::Euclidean {
        return Err(Error::Unsupported("adding a region requires euclidean scoring".into()));
    }
    if class >= state.num_classes() {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            state.num_classes()
        )));
    }
    if center.len() != backbone.dim {
        return Err(Error::Dimension {
            expected: backbone.dim,
            got: center.len(),
        });
    }
    let z = backbone.eval_direct(&Tensor::row(center))?;
    let mut logits = vec![0.0; state.num_classes()];
    logits[class] = NEW_REGION_LOGIT;
    state.weight = state.weight.push_row(z.row_slice(0));
    state.bias.push(0.0);
    state.region_class_logits = state.region_class_logits.push_row(&logits);
    state.revision += 1;
    Ok(state.num_regions() - 1)
}

pub fn remove_region(state: &mut ConnectedClassifierState, region: usize) -> Result<()> {
    let r = state.num_regions();
    if region >= r {
        return Err(Error::invalid(format!("region {region} out of range for {r} regions")));
    }
    if r == 1 {
        return Err(Error::invalid("cannot remove the last region"));
    }
    state.weight = match state.weight_type {
        WeightType::Linear => state.weight.remove_column(region),
        WeightType::Euclidean => state.weight.remove_row(region),
    };
    state.bias.remove(region);
    state.region_class_logits = state.region_class_logits.remove_row(region);
    state.revision += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub cosine: bool,
    /// Fine-tune only the classifier head when false.
    pub train_backbone: bool,
    /// Trainable region bias. Breaks the zero-bias Voronoi locality of morphisms.
    pub train_bias: bool,
    pub log_every: usize,
}

impl Default for MultiTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 5e-3,
            cosine: true,
            train_backbone: true,
            train_bias: false,
            log_every: 100,
        }
    }
}

/// Full-batch cross-entropy on the soft output. History accuracies are hard.
pub fn train_multi_invex(model: &mut MultiInvex, data: &Dataset, cfg: &MultiTrainConfig) -> Result<TrainReport> {
    if data.dim() != model.backbone.dim {
        return Err(Error::Dimension {
            expected: model.backbone.dim,
            got: data.dim(),
        });
    }
    let c = model.state.num_classes();
    let labels = data.labels();
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    let mut onehot = Tensor::zeros(data.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    model.backbone.set_training(cfg.train_backbone);
    for step in 0..cfg.steps {
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.cosine);
        let mut tape = Tape::new();
        let bp = model.backbone.bind(&mut tape, cfg.train_backbone);
        let sp = model.state.bind(&mut tape, cfg.train_bias);
        let x = tape.constant(data.x.clone());
        let z = model.backbone.forward(&mut tape, &bp, x)?;
        let scores = model.state.scores_on_tape(&mut tape, &sp, z)?;
        let w = tape.softmax(scores, 1)?;
        let probs = tape.softmax(sp[2], 1)?;
        let out = tape.matmul(w, probs)?;
        let eps = tape.add_scalar(out, 1e-12);
        let logp = tape.log(eps);
        let t = tape.constant(onehot.clone());
        let picked = tape.mul(logp, t)?;
        let total = tape.sum(picked);
        let loss = tape.scale(total, -1.0 / data.len() as f64);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            model.backbone.set_training(false);
            return Err(Error::Diverged { step });
        }
        if step + 1 == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let s = tape.value(scores);
            let p = model.state.class_probs();
            let correct = (0..s.rows())
                .filter(|&i| argmax(p.row_slice(argmax(s.row_slice(i)))) == labels[i])
                .count();
            report.history.push(HistoryRow {
                step,
                loss: lv,
                accuracy: Some(correct as f64 / data.len() as f64),
                invexity_fraction: None,
                empirical_k: None,
            });
        }
        let mut wrt: Vec<Var> = if cfg.train_backbone { bp.clone() } else { Vec::new() };
        wrt.extend(sp);
        let grads = tape.backward(loss, &wrt, &[])?;
        let st = &mut model.state;
        let mut bias = Tensor::row(&st.bias);
        let mut temp = Tensor::scalar(st.inverse_temp);
        let mut ps: Vec<&mut Tensor> = if cfg.train_backbone {
            model.backbone.parameters_mut()
        } else {
            Vec::new()
        };
        ps.extend([&mut st.weight, &mut bias, &mut st.region_class_logits, &mut temp]);
        opt.step(ps, &grads);
        if cfg.train_bias {
            st.bias = bias.into_data();
        }
        st.inverse_temp = temp.item();
        if cfg.train_backbone {
            model.backbone.project();
        }
    }
    if cfg.steps > 0 {
        model.state.revision += 1;
    }
    model.backbone.set_training(false);
    if cfg.train_backbone {
        model.backbone.refresh_statistics(&data.x)?;
        model.backbone.normalize(50)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region_id: usize,
    pub class: usize,
    pub num_points: usize,
    pub correct: usize,
    /// `None` for an empty region.
    pub accuracy: Option<f64>,
    /// Dataset index of the member with the least summed latent distance to the others.
    pub medoid_index: Option<usize>,
    /// Dataset index of the member closest to the center (highest score for linear regions).
    pub nearest_index: Option<usize>,
    /// True when the region holds no points.
    pub removable: bool,
}

pub fn region_report(backbone: &InvertibleNet, state: &ConnectedClassifierState, data: &Dataset) -> Result<Vec<RegionReport>> {
    let z = backbone.eval_direct(&data.x)?;
    let scores = state.region_scores(&z)?;
    let assign: Vec<usize> = (0..scores.rows()).map(|i| argmax(scores.row_slice(i))).collect();
    let classes = state.region_classes();
    let labels = data.labels();
    let mut out = Vec::with_capacity(state.num_regions());
    for (r, &class) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == r).collect();
        let correct = members.iter().filter(|&&i| labels.get(i) == Some(&class)).count();
        let (medoid_index, nearest_index) = if members.is_empty() {
            (None, None)
        } else {
            let m = medoid(&z.select_rows(&members), &(0..members.len()).collect::<Vec<_>>());
            let best = members
                .iter()
                .copied()
                .fold(members[0], |b, i| if scores.get(i, r) > scores.get(b, r) { i } else { b });
            (Some(members[m]), Some(best))
        };
        out.push(RegionReport {
            region_id: r,
            class,
            num_points: members.len(),
            correct,
            accuracy: (!members.is_empty()).then(|| correct as f64 / members.len() as f64),
            medoid_index,
            nearest_index,
            removable: members.is_empty(),
        });
    }
    Ok(out)
}

pub fn write_region_csv<W: Write>(reports: &[RegionReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "region_id",
        "class",
        "num_points",
        "correct",
        "accuracy",
        "medoid_index",
        "nearest_index",
    ])?;
    let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.region_id.to_string(),
            r.class.to_string(),
            r.num_points.to_string(),
            r.correct.to_string(),
            r.accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
            opt(r.medoid_index),
            opt(r.nearest_index),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Row of `z` among `rows` minimizing the summed distance to the other rows.
pub fn medoid(z: &Tensor, rows: &[usize]) -> usize {
    assert!(!rows.is_empty(), "medoid of an empty set");
    let mut best = (rows[0], f64::INFINITY);
    for &i in rows {
        let zi = z.row_slice(i);
        let total: f64 = rows.iter().map(|&j| distance(zi, z.row_slice(j))).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    best.0
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (c, v) in e.into_iter().enumerate() {
            out.set(r, c, v / s);
        }
    }
    out
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn nearest(p: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = distance(p, centers.row_slice(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans(z: &Tensor, k: usize, iters: usize, rng: &mut impl Rng) -> Tensor {
    let n = z.rows();
    let all: Vec<usize> = (0..n).collect();
    let first = *all.choose(rng).expect("non-empty data");
    let mut centers = Tensor::row(z.row_slice(first));
    while centers.rows() < k {
        let d2: Vec<f64> = (0..n).map(|i| nearest(z.row_slice(i), &centers).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers = centers.push_row(z.row_slice(pick));
    }
    for _ in 0..iters {
        let mut sums = Tensor::zeros(k, z.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (j, _) = nearest(z.row_slice(i), &centers);
            counts[j] += 1;
            for (c, v) in z.row_slice(i).iter().enumerate() {
                sums.set(j, c, sums.get(j, c) + v);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..z.cols() {
                    centers.set(j, c, sums.get(j, c) / counts[j] as f64);
                }
            }
        }
    }
    centers
}
