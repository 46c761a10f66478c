//! Empirical checks: the projected-gradient invexity rule, gradient-norm
//! (Lipschitz) estimates and grid-based connectedness.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::classifier::MultiInvex;
use crate::datasets::inflate;
use crate::error::{Error, Result};
use crate::gcgp::{BasicInvex, ComposedInvex, Guide, GuidedInvex, DIRECTION_EPS};
use crate::invex::InvexComposite;
use crate::nn::{value_and_input_grad, ConvexNet, Mlp, Module};

/// Default number of uniform random points for invexity checks.
pub const RANDOM_POINTS: usize = 1_000_000;

/// A differentiable map from `[n, D]` inputs to `[n, 1]` outputs.
pub trait ScalarField {
    fn input_dim(&self) -> usize;
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.rows());
        for rows in crate::nn::chunks(x.rows()) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.select_rows(&rows));
            let y = self.build(&mut tape, xv)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    fn values_and_grads(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        value_and_input_grad(x, |t, xv| self.build(t, xv))
    }
}

fn check_dim(expected: usize, x: &Tensor) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::Dimension {
            expected,
            got: x.cols(),
        });
    }
    Ok(())
}

macro_rules! field_via_build {
    ($t:ty, $dim:expr) => {
        impl ScalarField for $t {
            fn input_dim(&self) -> usize {
                let f: fn(&$t) -> usize = $dim;
                f(self)
            }
            fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
                <$t>::build(self, tape, x)
            }
        }
    };
}

field_via_build!(BasicInvex, |m| m.center.len());
field_via_build!(ComposedInvex, |m| m.base.center.len());
field_via_build!(GuidedInvex, |m| m.g.input_dim());
field_via_build!(InvexComposite, |m| m.dim());

impl ScalarField for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.bind(tape, false);
        self.forward(tape, &p, x)
    }
}

impl ScalarField for ConvexNet {
    fn input_dim(&self) -> usize {
        ConvexNet::input_dim(self)
    }
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.bind(tape, false);
        self.forward(tape, &p, x)
    }
}

/// Where the reference direction of the projected gradient comes from.
#[derive(Debug, Clone, Copy)]
pub enum Direction<'a> {
    /// `x - center`: the rule for a single global minimum at `center`.
    TowardCenter(&'a [f64]),
    /// The gradient of a reference invex function.
    GuideGradient(&'a Guide),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Train,
    Test,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvexityReport {
    pub source: PointSource,
    /// Points with a usable direction.
    pub n_checked: usize,
    pub n_satisfied: usize,
    /// Points whose direction norm was at most `eps` (for example `x` at the center).
    pub n_skipped: usize,
    pub fraction: f64,
}

impl InvexityReport {
    pub fn violations(&self) -> usize {
        self.n_checked - self.n_satisfied
    }

    /// Pools two reports over disjoint point sets; the source is taken from `self`.
    pub fn merge(&self, other: &InvexityReport) -> InvexityReport {
        let n_checked = self.n_checked + other.n_checked;
        let n_satisfied = self.n_satisfied + other.n_satisfied;
        InvexityReport {
            source: self.source,
            n_checked,
            n_satisfied,
            n_skipped: self.n_skipped + other.n_skipped,
            fraction: ratio(n_satisfied, n_checked),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Counts points with `grad(x) . d(x) / |d(x)| > 0`; points with `|d(x)| <= eps` are skipped.
pub fn check_invexity(
    model: &dyn ScalarField,
    points: &Tensor,
    direction: Direction<'_>,
    eps: f64,
    source: PointSource,
) -> Result<InvexityReport> {
    check_dim(model.input_dim(), points)?;
    let (_, grads) = model.values_and_grads(points)?;
    let dirs = match direction {
        Direction::TowardCenter(c) => {
            if c.len() != points.cols() {
                return Err(Error::Dimension {
                    expected: points.cols(),
                    got: c.len(),
                });
            }
            let mut d = points.clone();
            let k = points.cols();
            for (i, v) in d.data_mut().iter_mut().enumerate() {
                *v -= c[i % k];
            }
            d
        }
        Direction::GuideGradient(g) => g.gradient(points)?,
    };
    let (mut checked, mut satisfied, mut skipped) = (0, 0, 0);
    for i in 0..points.rows() {
        let d = dirs.row_slice(i);
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= eps {
            skipped += 1;
            continue;
        }
        checked += 1;
        let pg: f64 = grads.row_slice(i).iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / n;
        if pg > 0.0 {
            satisfied += 1;
        }
    }
    Ok(InvexityReport {
        source,
        n_checked: checked,
        n_satisfied: satisfied,
        n_skipped: skipped,
        fraction: ratio(satisfied, checked),
    })
}

/// [`check_invexity`] with the default skip threshold.
pub fn check_invexity_default(
    model: &dyn ScalarField,
    points: &Tensor,
    direction: Direction<'_>,
    source: PointSource,
) -> Result<InvexityReport> {
    check_invexity(model, points, direction, DIRECTION_EPS, source)
}

/// `n` points uniform over `bounds` inflated by 20% on each side.
pub fn random_box_points(bounds: &[(f64, f64)], n: usize, seed: u64) -> Tensor {
    let b = inflate(bounds, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = b.len();
    let data = (0..n * d)
        .map(|i| {
            let (lo, hi) = b[i % d];
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    Tensor::matrix(n, d, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub max: f64,
    pub min: f64,
    /// Point where the largest gradient norm was found.
    pub argmax: Vec<f64>,
}

/// Max and min input-gradient norm over `points`.
pub fn estimate_lipschitz(model: &dyn ScalarField, points: &Tensor) -> Result<LipschitzEstimate> {
    if points.rows() == 0 {
        return Err(Error::invalid("at least one point is required"));
    }
    check_dim(model.input_dim(), points)?;
    let (_, g) = model.values_and_grads(points)?;
    let norms = g.row_norms();
    let mut best = 0;
    for (i, &n) in norms.iter().enumerate() {
        if n > norms[best] {
            best = i;
        }
    }
    Ok(LipschitzEstimate {
        max: norms[best],
        min: norms.iter().cloned().fold(f64::INFINITY, f64::min),
        argmax: points.row_vec(best),
    })
}

/// Cell labels over a 2D box. `values[i][j]` is the cell at row `i` (y, from
/// the lower bound up) and column `j` (x, from the left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRaster {
    /// `[[x_min, x_max], [y_min, y_max]]`.
    pub bounds: [[f64; 2]; 2],
    /// Cells per axis, `[nx, ny]`.
    pub resolution: [usize; 2],
    pub values: Vec<Vec<i64>>,
}

impl GridRaster {
    /// Cell centers, row by row, as an `[nx * ny, 2]` matrix.
    pub fn cell_centers(bounds: [[f64; 2]; 2], resolution: [usize; 2]) -> Tensor {
        let [nx, ny] = resolution;
        let mut data = Vec::with_capacity(nx * ny * 2);
        for i in 0..ny {
            let y = bounds[1][0] + (bounds[1][1] - bounds[1][0]) * (i as f64 + 0.5) / ny as f64;
            for j in 0..nx {
                data.push(bounds[0][0] + (bounds[0][1] - bounds[0][0]) * (j as f64 + 0.5) / nx as f64);
                data.push(y);
            }
        }
        Tensor::matrix(nx * ny, 2, data)
    }

    /// Evaluates `label` at every cell center.
    pub fn from_fn<F>(bounds: [[f64; 2]; 2], resolution: [usize; 2], label: F) -> Result<Self>
    where
        F: Fn(&Tensor) -> Result<Vec<i64>>,
    {
        let [nx, ny] = resolution;
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("raster resolution must be positive"));
        }
        if !(bounds[0][1] > bounds[0][0] && bounds[1][1] > bounds[1][0]) {
            return Err(Error::invalid(format!("empty raster bounds {bounds:?}")));
        }
        let pts = Self::cell_centers(bounds, resolution);
        let flat = label(&pts)?;
        if flat.len() != nx * ny {
            return Err(Error::Dimension {
                expected: nx * ny,
                got: flat.len(),
            });
        }
        Ok(Self {
            bounds,
            resolution,
            values: flat.chunks(nx).map(<[i64]>::to_vec).collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let [nx, ny] = self.resolution;
        Self {
            bounds: [self.bounds[1], self.bounds[0]],
            resolution: [ny, nx],
            values: (0..nx).map(|j| (0..ny).map(|i| self.values[i][j]).collect()).collect(),
        }
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<i64> {
        let mut v: Vec<i64> = self.values.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Number of 4-connected components of cells equal to `label`.
    pub fn connected_components(&self, label: i64) -> usize {
        let [nx, ny] = self.resolution;
        let mut seen = vec![false; nx * ny];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..nx * ny {
            if seen[start] || self.values[start / nx][start % nx] != label {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(c) = stack.pop() {
                let (i, j) = (c / nx, c % nx);
                let mut visit = |i: usize, j: usize| {
                    let k = i * nx + j;
                    if !seen[k] && self.values[i][j] == label {
                        seen[k] = true;
                        stack.push(k);
                    }
                };
                if i > 0 {
                    visit(i - 1, j);
                }
                if i + 1 < ny {
                    visit(i + 1, j);
                }
                if j > 0 {
                    visit(i, j - 1);
                }
                if j + 1 < nx {
                    visit(i, j + 1);
                }
            }
        }
        count
    }

    /// Component count for every label present.
    pub fn component_counts(&self) -> BTreeMap<i64, usize> {
        self.labels().into_iter().map(|l| (l, self.connected_components(l))).collect()
    }

    /// One CSV line per raster row, lowest y first, no header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.values {
            let line: Vec<String> = row.iter().map(i64::to_string).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn check_2d(dim: usize) -> Result<()> {
    if dim != 2 {
        return Err(Error::Unsupported(format!("rasters need a 2D model, got {dim} inputs")));
    }
    Ok(())
}

/// 1 where `f(x) < theta`, else 0.
pub fn rasterize_sublevel(model: &dyn ScalarField, bounds: [[f64; 2]; 2], resolution: [usize; 2], theta: f64) -> Result<GridRaster> {
    check_2d(model.input_dim())?;
    GridRaster::from_fn(bounds, resolution, |pts| {
        Ok(model.values(pts)?.into_iter().map(|v| i64::from(v < theta)).collect())
    })
}

/// Hard region id per cell.
pub fn rasterize_regions(model: &MultiInvex, bounds: [[f64; 2]; 2], resolution: [usize; 2]) -> Result<GridRaster> {
    check_2d(model.backbone.dim)?;
    GridRaster::from_fn(bounds, resolution, |pts| {
        Ok(model.hard_regions(pts)?.into_iter().map(|r| r as i64).collect())
    })
}

/// Hard class per cell.
pub fn rasterize_classes(model: &MultiInvex, bounds: [[f64; 2]; 2], resolution: [usize; 2]) -> Result<GridRaster> {
    check_2d(model.backbone.dim)?;
    GridRaster::from_fn(bounds, resolution, |pts| {
        Ok(model.predict_labels(pts, true)?.into_iter().map(|c| c as i64).collect())
    })
}

/// Box `[[x0, x1], [y0, y1]]` from per-axis bounds, inflated by `fraction`.
pub fn raster_bounds(bounds: &[(f64, f64)], fraction: f64) -> Result<[[f64; 2]; 2]> {
    check_2d(bounds.len())?;
    let b = inflate(bounds, fraction);
    Ok([[b[0].0, b[0].1], [b[1].0, b[1].1]])
}

/// Two cones with direction-dependent scale, `a_k |S_k (x - c_k)|` with
/// `S_1 = diag(1, 3)` at `(-0.5, 0)` and `S_2 = diag(3, 1)` at `(0.5, 0)`,
/// labelled by the smaller cone on `[-2, 2]^2`. The boundary is a hyperbola,
/// so the region of the first cone has two components (`x < 0.25` and `x > 1`).
///
/// With a single isotropic scale per cone the winning regions are star-shaped
/// around a center and stay connected; the extra freedom of a scale per region
/// and direction is what breaks connectedness.
pub fn two_cone_control(resolution: usize) -> Result<GridRaster> {
    let cones = [([-0.5, 0.0], [1.0, 3.0]), ([0.5, 0.0], [3.0, 1.0])];
    GridRaster::from_fn([[-2.0, 2.0], [-2.0, 2.0]], [resolution, resolution], |pts| {
        Ok((0..pts.rows())
            .map(|i| {
                let p = pts.row_slice(i);
                let f: Vec<f64> = cones
                    .iter()
                    .map(|(c, s)| ((s[0] * (p[0] - c[0])).powi(2) + (s[1] * (p[1] - c[1])).powi(2)).sqrt())
                    .collect();
                i64::from(f[1] < f[0])
            })
            .collect())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    /// Threshold for sublevel rasters, region or class id otherwise.
    pub key: f64,
    pub components: usize,
}

/// Collected verification results for one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub invexity: Vec<InvexityReport>,
    pub lipschitz: Option<LipschitzEstimate>,
    /// Sublevel components per threshold.
    pub sublevel_components: Vec<ComponentCount>,
    /// Components per non-empty hard region.
    pub region_components: Vec<ComponentCount>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, centers: &[(f64, f64, f64)]) -> GridRaster {
        GridRaster::from_fn([[-1.0, 1.0], [-1.0, 1.0]], [n, n], |p| {
            Ok((0..p.rows())
                .map(|i| {
                    let (x, y) = (p.get(i, 0), p.get(i, 1));
                    i64::from(centers.iter().any(|&(cx, cy, r)| (x - cx).hypot(y - cy) < r))
                })
                .collect())
        })
        .unwrap()
    }

    #[test]
    fn counts_disks() {
        assert_eq!(disk(64, &[(0.0, 0.0, 0.5)]).connected_components(1), 1);
        let two = disk(64, &[(-0.5, 0.0, 0.3), (0.5, 0.0, 0.3)]);
        assert_eq!(two.connected_components(1), 2);
        assert_eq!(two.connected_components(1), two.transpose().connected_components(1));
        assert_eq!(two.connected_components(7), 0);
    }

    #[test]
    fn annulus_separates_hole_from_outside() {
        let r = GridRaster::from_fn([[-1.0, 1.0], [-1.0, 1.0]], [80, 80], |p| {
            Ok((0..p.rows())
                .map(|i| {
                    let d = p.get(i, 0).hypot(p.get(i, 1));
                    i64::from((0.4..0.7).contains(&d))
                })
                .collect())
        })
        .unwrap();
        assert_eq!(r.connected_components(1), 1);
        assert_eq!(r.connected_components(0), 2);
    }

    #[test]
    fn diagonal_neighbours_are_not_connected() {
        let r = GridRaster {
            bounds: [[0.0, 1.0], [0.0, 1.0]],
            resolution: [2, 2],
            values: vec![vec![1, 0], vec![0, 1]],
        };
        assert_eq!(r.connected_components(1), 2);
    }

    #[test]
    fn cell_centers_layout() {
        let c = GridRaster::cell_centers([[0.0, 2.0], [0.0, 1.0]], [2, 1]);
        assert_eq!(c.data(), &[0.5, 0.5, 1.5, 0.5]);
    }

    #[test]
    fn control_has_a_split_region() {
        let r = two_cone_control(200).unwrap();
        assert_eq!(r.connected_components(0), 2);
        assert_eq!(r.connected_components(1), 1);
    }

    #[test]
    fn csv_rows() {
        let r = GridRaster {
            bounds: [[0.0, 1.0], [0.0, 1.0]],
            resolution: [2, 2],
            values: vec![vec![1, 0], vec![3, 1]],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,0\n3,1\n");
    }
}
