//! Two-dimensional kernel density estimates and their discrete KL divergence.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::PidGains;
use crate::dataset::AugmentedDataset;
use crate::error::{Error, Result};
use crate::plant::Trajectory;

/// Probability floor applied to `q` where `p` has mass.
pub const KLD_FLOOR: f64 = 1e-12;

/// Axis-aligned grid of `a_cells x b_cells` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
    pub a_cells: usize,
    pub b_cells: usize,
}

fn extent(sets: &[&[f64]]) -> (f64, f64) {
    sets.iter().flat_map(|s| s.iter()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl GridSpec {
    /// Square grid covering every sample set, padded by `pad` bandwidths.
    pub fn covering(a_sets: &[&[f64]], b_sets: &[&[f64]], bandwidth: (f64, f64), pad: f64, cells: usize) -> Self {
        let widen = |(lo, hi): (f64, f64), h: f64| {
            let p = (pad * h).max(1e-9 * (1.0 + lo.abs().max(hi.abs())));
            (lo - p, hi + p)
        };
        Self {
            a_range: widen(extent(a_sets), bandwidth.0),
            b_range: widen(extent(b_sets), bandwidth.1),
            a_cells: cells,
            b_cells: cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok(self.a_range) || !ok(self.b_range) || self.a_cells == 0 || self.b_cells == 0 {
            return Err(Error::Config(format!("invalid density grid {self:?}")));
        }
        Ok(())
    }

    pub fn a_width(&self) -> f64 {
        (self.a_range.1 - self.a_range.0) / self.a_cells as f64
    }

    pub fn b_width(&self) -> f64 {
        (self.b_range.1 - self.b_range.0) / self.b_cells as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.a_width() * self.b_width()
    }

    pub fn a_center(&self, i: usize) -> f64 {
        self.a_range.0 + (i as f64 + 0.5) * self.a_width()
    }

    pub fn b_center(&self, j: usize) -> f64 {
        self.b_range.0 + (j as f64 + 0.5) * self.b_width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64, f64),
}

/// Silverman's rule for one axis of a bivariate estimate: `sd * n^(-1/6)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt() * n.powf(-1.0 / 6.0)
}

/// Density on cell centres, normalized so that `sum * cell_area = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub bandwidth: (f64, f64),
    /// `a_cells x b_cells`.
    pub density: DMatrix<f64>,
}

impl DensityGrid {
    /// Probability mass per cell.
    pub fn masses(&self) -> DMatrix<f64> {
        &self.density * self.spec.cell_area()
    }

    /// Peak location `(a, b)`.
    pub fn argmax(&self) -> (f64, f64) {
        let (i, j) = self.density.iamax_full();
        (self.spec.a_center(i), self.spec.b_center(j))
    }

    /// CSV with one metadata comment line followed by `a_name,b_name,density` rows.
    pub fn write_csv<W: Write>(&self, mut writer: W, a_name: &str, b_name: &str) -> Result<()> {
        let s = &self.spec;
        writeln!(
            writer,
            "# {a_name}_min={},{a_name}_max={},{a_name}_cells={},{b_name}_min={},{b_name}_max={},{b_name}_cells={},bandwidth_{a_name}={},bandwidth_{b_name}={}",
            s.a_range.0, s.a_range.1, s.a_cells, s.b_range.0, s.b_range.1, s.b_cells, self.bandwidth.0, self.bandwidth.1
        )?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([a_name, b_name, "density"])?;
        for i in 0..s.a_cells {
            for j in 0..s.b_cells {
                w.write_record([s.a_center(i).to_string(), s.b_center(j).to_string(), self.density[(i, j)].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaussian product-kernel density estimate of paired samples on `grid`.
/// Bandwidths are floored at one grid cell so degenerate samples still
/// produce a resolvable peak.
pub fn kde_joint(a: &[f64], b: &[f64], grid: &GridSpec, bandwidth: Bandwidth) -> Result<DensityGrid> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::EmptyData("density estimation needs at least two samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::DataQuality("non-finite density sample".into()));
    }
    grid.validate()?;
    let (ha, hb) = match bandwidth {
        Bandwidth::Silverman => (silverman_bandwidth(a), silverman_bandwidth(b)),
        Bandwidth::Fixed(ha, hb) => {
            if !(ha > 0.0 && hb > 0.0) {
                return Err(Error::Config(format!("bandwidths must be positive, got ({ha}, {hb})")));
            }
            (ha, hb)
        }
    };
    let (ha, hb) = (ha.max(grid.a_width()), hb.max(grid.b_width()));
    // the product kernel factorizes: density = Ka * Kb^T
    let ka = DMatrix::from_fn(grid.a_cells, a.len(), |i, s| (-0.5 * ((grid.a_center(i) - a[s]) / ha).powi(2)).exp());
    let kb = DMatrix::from_fn(grid.b_cells, b.len(), |j, s| (-0.5 * ((grid.b_center(j) - b[s]) / hb).powi(2)).exp());
    let mut density = ka * kb.transpose();
    let total = density.sum() * grid.cell_area();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DataQuality("samples fall outside the density grid".into()));
    }
    density /= total;
    Ok(DensityGrid { spec: grid.clone(), bandwidth: (ha, hb), density })
}

/// `sum p log(p / q)` over cells where `p > 0`, with `q` floored.
/// Both arguments are per-cell probability masses summing to one.
pub fn kld_discrete(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!("grids {:?} and {:?}", p.shape(), q.shape())));
    }
    for (name, g) in [("p", p), ("q", q)] {
        if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (g.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("{name} is not a normalized probability grid")));
        }
    }
    Ok(p.iter()
        .zip(q.iter())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KLD_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Value of state component `index` for every dataset row, in row order.
pub fn row_states(trajectories: &[Trajectory], index: usize) -> Vec<f64> {
    trajectories
        .iter()
        .flat_map(|t| t.states[..t.len()].iter().map(move |s| s.to_array()[index]))
        .collect()
}

/// Joint control/state densities of the expert and two PID policies on a
/// shared grid, with the divergences from the expert.
#[derive(Debug, Clone)]
pub struct JointPdfs {
    pub expert: DensityGrid,
    pub initial: DensityGrid,
    pub fitted: DensityGrid,
    pub kld_initial: f64,
    pub kld_fitted: f64,
}

/// Compare `(u, state)` densities. PID controls are the clamped mean actions
/// `K e` on the expert's own feature rows, so all three share the expert's
/// state distribution and differ only in the policy.
pub fn compare_joint_pdfs(
    data: &AugmentedDataset,
    states: &[f64],
    initial: &PidGains,
    fitted: &PidGains,
    u_max: f64,
    cells: usize,
) -> Result<JointPdfs> {
    if states.len() != data.rows() {
        return Err(Error::Shape(format!("{} state samples for {} rows", states.len(), data.rows())));
    }
    let expert_u: Vec<f64> = data.controls.column(0).iter().copied().collect();
    let pid_u = |g: &PidGains| -> Vec<f64> {
        data.features
            .row_iter()
            .map(|r| g.mean_control(r.transpose().as_slice())[0].clamp(-u_max, u_max))
            .collect()
    };
    let (u_init, u_fit) = (pid_u(initial), pid_u(fitted));
    let bw = (silverman_bandwidth(&expert_u), silverman_bandwidth(states));
    let grid = GridSpec::covering(&[&expert_u, &u_init, &u_fit], &[states], bw, 3.0, cells);
    let expert = kde_joint(&expert_u, states, &grid, Bandwidth::Silverman)?;
    let initial = kde_joint(&u_init, states, &grid, Bandwidth::Silverman)?;
    let fitted = kde_joint(&u_fit, states, &grid, Bandwidth::Silverman)?;
    let kld_initial = kld_discrete(&expert.masses(), &initial.masses())?;
    let kld_fitted = kld_discrete(&expert.masses(), &fitted.masses())?;
    Ok(JointPdfs { expert, initial, fitted, kld_initial, kld_fitted })
}
