//! Deterministic toy datasets and CSV ingestion.
//!
//! All generator formulas live in this file. Every generator is a pure
//! function of its parameters and seed.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Seed offset used to draw a test split from the same generator.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    /// `[N, D]`
    pub x: Tensor,
    /// Class indices (as floats) or regression targets.
    pub y: Vec<f64>,
    pub task: Task,
}

impl Dataset {
    pub fn new(name: impl Into<String>, seed: u64, x: Tensor, y: Vec<f64>, task: Task) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Task::Classification { classes } = task {
            if let Some(bad) = y.iter().find(|&&v| v < 0.0 || v >= classes as f64 || v.fract() != 0.0) {
                return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self {
            name: name.into(),
            seed,
            x,
            y,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        match self.task {
            Task::Classification { classes } => classes,
            Task::Regression => 0,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.y.iter().map(|&v| v as usize).collect()
    }

    /// `1.0` where the label equals `class`, else `0.0`.
    pub fn binary_targets(&self, class: usize) -> Vec<f64> {
        self.y
            .iter()
            .map(|&v| if v as usize == class { 1.0 } else { 0.0 })
            .collect()
    }

    /// Axis-aligned bounding box `(min, max)` per dimension.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|j| {
                (0..self.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    let v = self.x.get(i, j);
                    (lo.min(v), hi.max(v))
                })
            })
            .collect()
    }

    /// Concatenation of two datasets with the same shape and task.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset::new(
            format!("{}+{}", self.name, other.name),
            self.seed,
            Tensor::vstack(&[&self.x, &other.x]),
            y,
            self.task,
        )
    }

    /// Writes `x0, x1, ..., label` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(match self.task {
                Task::Classification { .. } => format!("{}", self.y[i] as usize),
                Task::Regression => format!("{:?}", self.y[i]),
            });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Grows a bounding box by `fraction` of its extent.
///
/// `inflate(b, 0.2)` widens every axis by 20% of its length, split evenly.
pub fn inflate(bounds: &[(f64, f64)], fraction: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let pad = 0.5 * fraction * (hi - lo);
            (lo - pad, hi + pad)
        })
        .collect()
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative sigma")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpiralConfig {
    pub n: usize,
    /// Total angle swept by each arm, in radians.
    pub angle_span: f64,
    pub jitter: f64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            n: 400,
            angle_span: 1.75 * PI,
            jitter: 0.02,
        }
    }
}

/// Two interleaved Archimedean arms, `r = 0.1 + 0.9 t`, `angle = span * t + arm * pi`,
/// with Gaussian jitter, scaled so the largest coordinate magnitude is 1.
pub fn spiral_with(cfg: SpiralConfig, seed: u64) -> Result<Dataset> {
    if cfg.n < 4 || cfg.n % 2 != 0 {
        return Err(Error::invalid(format!("spiral needs an even n >= 4, got {}", cfg.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(cfg.jitter);
    let h = cfg.n / 2;
    let mut pts = Vec::with_capacity(cfg.n * 2);
    let mut y = Vec::with_capacity(cfg.n);
    for arm in 0..2 {
        for i in 0..h {
            let t = i as f64 / (h - 1) as f64;
            let r = 0.1 + 0.9 * t;
            let a = cfg.angle_span * t + arm as f64 * PI;
            pts.push(r * a.cos() + noise.sample(&mut rng));
            pts.push(r * a.sin() + noise.sample(&mut rng));
            y.push(arm as f64);
        }
    }
    let m = pts.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    pts.iter_mut().for_each(|v| *v /= m);
    Dataset::new("spiral", seed, Tensor::matrix(cfg.n, 2, pts), y, Task::Classification { classes: 2 })
}

pub fn spiral(n: usize, seed: u64) -> Result<Dataset> {
    spiral_with(SpiralConfig { n, ..Default::default() }, seed)
}

struct Bump {
    center: [f64; 2],
    width: f64,
    amplitude: f64,
}

fn bumps(rng: &mut ChaCha8Rng, count: usize, widths: (f64, f64)) -> Vec<Bump> {
    (0..count)
        .map(|_| {
            let center = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let width = rng.random_range(widths.0..widths.1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amplitude = sign * rng.random_range(0.5..1.0);
            Bump {
                center,
                width,
                amplitude,
            }
        })
        .collect()
}

fn bump_surface(name: &str, side: usize, count: usize, widths: (f64, f64), seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = bumps(&mut rng, count, widths);
    let mut pts = Vec::with_capacity(side * side * 2);
    let mut y = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let p = [
                -1.0 + 2.0 * j as f64 / (side - 1) as f64,
                -1.0 + 2.0 * i as f64 / (side - 1) as f64,
            ];
            let v: f64 = bs
                .iter()
                .map(|b| {
                    let d2 = (p[0] - b.center[0]).powi(2) + (p[1] - b.center[1]).powi(2);
                    b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
                })
                .sum();
            pts.extend_from_slice(&p);
            y.push(v);
        }
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    y.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    Dataset::new(name, seed, Tensor::matrix(side * side, 2, pts), y, Task::Regression)
}

/// 50x50 grid on `[-1, 1]^2`; target is a sum of 3 narrow Gaussian bumps
/// (widths in `[0.15, 0.3)`), min-max scaled to `[0, 1]`.
pub fn regression1(seed: u64) -> Result<Dataset> {
    bump_surface("regression1", 50, 3, (0.15, 0.3), seed)
}

/// 75x75 grid on `[-1, 1]^2`; sum of 5 Gaussian bumps (widths in `[0.25, 0.45)`).
pub fn regression2(seed: u64) -> Result<Dataset> {
    bump_surface("regression2", 75, 5, (0.25, 0.45), seed)
}

/// Five clusters of 150 points in `[-1.5, 1.5]^2` with three classes:
///
/// | cluster | shape | location | class |
/// |---|---|---|---|
/// | 0 | blob | (-1, -1) | 2 |
/// | 1 | blob | (0, -1) | 1 |
/// | 2 | upper arc | centre (-0.45, 0.25), r 0.65 | 0 |
/// | 3 | right arc | centre (0.75, 0.05), r 0.55 | 2 |
/// | 4 | blob | (0.85, 1.05) | 1 |
///
/// Classes 1 and 2 are each split over two disconnected clusters.
pub fn clusters5(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blob = normal(0.13);
    let arc_noise = normal(0.06);
    let per = 150;
    let mut pts = Vec::with_capacity(per * 10);
    let mut y = Vec::with_capacity(per * 5);
    let mut push = |p: [f64; 2], label: usize, pts: &mut Vec<f64>| {
        pts.push(p[0].clamp(-1.5, 1.5));
        pts.push(p[1].clamp(-1.5, 1.5));
        y.push(label as f64);
    };
    for (c, label) in [([-1.0, -1.0], 2), ([0.0, -1.0], 1)] {
        for _ in 0..per {
            let p = [c[0] + blob.sample(&mut rng), c[1] + blob.sample(&mut rng)];
            push(p, label, &mut pts);
        }
    }
    let arcs = [([-0.45, 0.25], 0.65, 0.15 * PI, 0.95 * PI, 0), ([0.75, 0.05], 0.55, -0.45 * PI, 0.45 * PI, 2)];
    for (c, r, a0, a1, label) in arcs {
        for _ in 0..per {
            let a: f64 = rng.random_range(a0..a1);
            let rr = r + arc_noise.sample(&mut rng);
            push([c[0] + rr * a.cos(), c[1] + rr * a.sin()], label, &mut pts);
        }
    }
    for _ in 0..per {
        let p = [0.85 + blob.sample(&mut rng), 1.05 + blob.sample(&mut rng)];
        push(p, 1, &mut pts);
    }
    Dataset::new("clusters5", seed, Tensor::matrix(per * 5, 2, pts), y, Task::Classification { classes: 3 })
}

/// Four Gaussian groups at `(+-1, +-1)` with XOR labels: `(1,1)` and `(-1,-1)` are class 0.
pub fn xor_groups(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(0.2);
    let per = 100;
    let mut pts = Vec::with_capacity(per * 8);
    let mut y = Vec::with_capacity(per * 4);
    for (cx, cy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        let label = if (cx > 0.0) == (cy > 0.0) { 0.0 } else { 1.0 };
        for _ in 0..per {
            pts.push(cx + noise.sample(&mut rng));
            pts.push(cy + noise.sample(&mut rng));
            y.push(label);
        }
    }
    Dataset::new("xor_groups", seed, Tensor::matrix(per * 4, 2, pts), y, Task::Classification { classes: 2 })
}

/// `k` Gaussian blobs (sigma 0.2, 100 points each) evenly spaced on a circle of
/// radius 1.5; blob `i` has label `i`.
pub fn blobs(k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::invalid("blobs needs k >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(0.2);
    let per = 100;
    let mut pts = Vec::with_capacity(per * k * 2);
    let mut y = Vec::with_capacity(per * k);
    for i in 0..k {
        let a = 2.0 * PI * i as f64 / k as f64;
        for _ in 0..per {
            pts.push(1.5 * a.cos() + noise.sample(&mut rng));
            pts.push(1.5 * a.sin() + noise.sample(&mut rng));
            y.push(i as f64);
        }
    }
    Dataset::new(format!("blobs{k}"), seed, Tensor::matrix(per * k, 2, pts), y, Task::Classification { classes: k })
}

/// Looks up a generator by name: `spiral`, `regression1`, `regression2`,
/// `clusters5`, `xor_groups`, `blobs<k>`.
pub fn by_name(name: &str, seed: u64) -> Result<Dataset> {
    match name {
        "spiral" => spiral(400, seed),
        "regression1" => regression1(seed),
        "regression2" => regression2(seed),
        "clusters5" => clusters5(seed),
        "xor_groups" | "xor" => xor_groups(seed),
        _ => match name.strip_prefix("blobs").and_then(|k| k.parse().ok()) {
            Some(k) => blobs(k, seed),
            None => Err(Error::invalid(format!("unknown dataset '{name}'"))),
        },
    }
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and (population) standard deviation; constant columns get std 1.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = x.dims2();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            mean[j] = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
        out
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
        out
    }
}

/// Parses a headered numeric CSV. Every column except `label_column` is a feature.
///
/// Integer-valued labels make a classification task with `max + 1` classes;
/// anything else is treated as regression. Rows and columns in errors are 1-based,
/// with the header as row 1.
pub fn parse_csv<R: Read>(input: R, label_column: &str, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let label_idx = header.iter().position(|h| h.trim() == label_column).ok_or_else(|| Error::Parse {
        row: 1,
        column: 0,
        message: format!("no column named '{label_column}'"),
    })?;
    let width = header.len();
    let mut feats = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            if c == label_idx {
                y.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let integral = y.iter().all(|v| v.fract() == 0.0 && *v >= 0.0);
    let task = if integral {
        Task::Classification {
            classes: y.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1,
        }
    } else {
        Task::Regression
    };
    let x = Tensor::matrix(y.len(), width - 1, feats);
    Dataset::new(name, 0, x, y, task)
}

/// Loads a CSV file and standardizes its features, returning the fitted transform.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<(Dataset, Standardizer)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    let mut ds = parse_csv(file, label_column, &name)?;
    let st = Standardizer::fit(&ds.x);
    ds.x = st.transform(&ds.x);
    Ok((ds, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_rejects_odd_n() {
        assert!(spiral(401, 1).is_err());
    }

    #[test]
    fn parse_reports_location() {
        let err = parse_csv("a,b,label\n1,2,0\n3,x,1\n".as_bytes(), "label", "t").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("{e}"),
        }
        let err = parse_csv("a,b,label\n1,2\n".as_bytes(), "label", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }));
        let err = parse_csv("a,b\n1,2\n".as_bytes(), "label", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
    }

    #[test]
    fn inflate_pads_evenly() {
        assert_eq!(inflate(&[(0.0, 10.0)], 0.2), vec![(-1.0, 11.0)]);
    }
}
