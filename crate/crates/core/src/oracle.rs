//! Exact desk-scale references: grid density recursions and probability metrics.
//!
//! [`GridDensity`] holds a piecewise-constant density on a uniform grid of at
//! most two dimensions. [`grid_filter_step`] evaluates the (tempered) KL-MHE
//! density recursion on it; the pushforward through `f0` scatters each
//! cell's mass from its center into the neighbouring target cells by
//! bilinear splitting, so `f0` never has to be inverted.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::cost::HorizonCost;
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::io::fmt_f64;
use crate::model::{State, SystemModel};

/// Mass fraction allowed to leave the grid during a pushforward.
pub const ESCAPE_TOLERANCE: f64 = 0.01;
const NORMALIZATION_TOL: f64 = 1e-9;
/// Targets this close to a cell center (in cell units) land on it exactly.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n_cells: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n_cells: usize) -> Result<Self> {
        if !(lo < hi) || n_cells == 0 {
            return Err(Error::Config(format!("bad grid axis [{lo}, {hi}] with {n_cells} cells")));
        }
        Ok(Self { lo, hi, n_cells })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    /// Cell containing `t`, if any.
    pub fn cell_of(&self, t: f64) -> Option<usize> {
        if !(t >= self.lo && t <= self.hi) {
            return None;
        }
        Some((((t - self.lo) / self.width()) as usize).min(self.n_cells - 1))
    }

    /// Linear splitting weights of a point mass at `t` between adjacent centers.
    fn split(&self, t: f64) -> Vec<(usize, f64)> {
        if !(t >= self.lo && t <= self.hi) {
            return vec![];
        }
        let u = (t - self.lo) / self.width() - 0.5;
        let last = self.n_cells - 1;
        if u <= 0.0 {
            return vec![(0, 1.0)];
        }
        if u >= last as f64 {
            return vec![(last, 1.0)];
        }
        let nearest = u.round();
        if (u - nearest).abs() < SNAP {
            return vec![(nearest as usize, 1.0)];
        }
        let i = u.floor() as usize;
        let frac = u - i as f64;
        vec![(i, 1.0 - frac), (i + 1, frac)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    axes: Vec<GridAxis>,
    /// Row-major, last axis fastest.
    values: Vec<f64>,
    normalized: bool,
}

impl GridDensity {
    pub fn new(axes: Vec<GridAxis>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Config(format!(
                "grid densities support 1 or 2 dimensions, got {}",
                axes.len()
            )));
        }
        let cells: usize = axes.iter().map(|a| a.n_cells).product();
        check_dim("grid values", cells, values.len())?;
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("grid density values must be finite and >= 0".into()));
        }
        let mut g = Self {
            axes,
            values,
            normalized: false,
        };
        g.normalized = (g.mass() - 1.0).abs() <= NORMALIZATION_TOL;
        Ok(g)
    }

    /// Density proportional to `f(center)`, normalized.
    pub fn from_fn<F: Fn(&State) -> f64>(axes: Vec<GridAxis>, f: F) -> Result<Self> {
        let probe = Self::new(axes.clone(), vec![0.0; axes.iter().map(|a| a.n_cells).product()])?;
        let values = (0..probe.len()).map(|i| f(&probe.center(i))).collect();
        let mut g = Self::new(axes, values)?;
        g.normalize()?;
        Ok(g)
    }

    pub fn uniform(axes: Vec<GridAxis>) -> Result<Self> {
        Self::from_fn(axes, |_| 1.0)
    }

    /// Uniform density on the cells whose centers lie in the box `[lo, hi]`.
    pub fn uniform_box(axes: Vec<GridAxis>, lo: &State, hi: &State) -> Result<Self> {
        Self::from_fn(axes, |c| {
            let inside = c.iter().zip(lo.iter().zip(hi.iter())).all(|(x, (a, b))| x >= a && x <= b);
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Weighted histogram of an ensemble; samples outside the grid are dropped.
    pub fn histogram(axes: Vec<GridAxis>, ensemble: &Ensemble) -> Result<Self> {
        let mut g = Self::new(axes.clone(), vec![0.0; axes.iter().map(|a| a.n_cells).product()])?;
        check_dim("histogram samples", g.dim(), ensemble.dim())?;
        let vol = g.cell_volume();
        for (z, w) in ensemble.samples().iter().zip(ensemble.weights()) {
            if let Some(idx) = g.cell_index(z) {
                g.values[idx] += w / vol;
            }
        }
        g.normalize()?;
        Ok(g)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn dim(&self) -> usize {
        self.axes.len()
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(GridAxis::width).product()
    }

    fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        let mut idx = vec![0; self.dim()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            idx[d] = rest % axis.n_cells;
            rest /= axis.n_cells;
        }
        idx
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.n_cells + i)
    }

    pub fn center(&self, flat: usize) -> State {
        let idx = self.multi_index(flat);
        DVector::from_iterator(self.dim(), idx.iter().zip(&self.axes).map(|(&i, a)| a.center(i)))
    }

    pub fn cell_index(&self, x: &State) -> Option<usize> {
        let idx: Option<Vec<usize>> = x.iter().zip(&self.axes).map(|(&t, a)| a.cell_of(t)).collect();
        idx.map(|i| self.flat_index(&i))
    }

    /// `sum values * cell_volume`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Precondition(format!("cannot normalize a density of mass {mass}")));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        self.normalized = true;
        Ok(())
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.axes == other.axes
    }

    pub fn mean(&self) -> State {
        let vol = self.cell_volume();
        (0..self.len()).fold(DVector::zeros(self.dim()), |acc, i| acc + self.center(i) * (self.values[i] * vol))
    }

    /// Merge `factor` consecutive cells along every axis.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.axes.iter().any(|a| a.n_cells % factor != 0) {
            return Err(Error::Config(format!("cannot coarsen by {factor}")));
        }
        let axes: Vec<GridAxis> = self
            .axes
            .iter()
            .map(|a| GridAxis::new(a.lo, a.hi, a.n_cells / factor))
            .collect::<Result<_>>()?;
        let mut out = Self::new(axes.clone(), vec![0.0; axes.iter().map(|a| a.n_cells).product()])?;
        let scale = self.cell_volume() / out.cell_volume();
        for (i, v) in self.values.iter().enumerate() {
            let coarse: Vec<usize> = self.multi_index(i).iter().map(|j| j / factor).collect();
            let target = out.flat_index(&coarse);
            out.values[target] += v * scale;
        }
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Rows `x_1..x_d, value` at cell centers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x_{i}")).collect();
        header.push("value".into());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.center(i).iter().map(|&c| fmt_f64(c)).collect();
            row.push(fmt_f64(self.values[i]));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Push a density through `f0` by forward scattering. Errors when more than 1% of the mass escapes.
pub fn pushforward(density: &GridDensity, model: &SystemModel) -> Result<GridDensity> {
    check_dim("grid density", model.dim_state(), density.dim())?;
    let targets: Vec<Option<State>> = (0..density.len())
        .into_par_iter()
        .map(|i| (density.values[i] > 0.0).then(|| model.f0(&density.center(i))))
        .collect();
    let mut out = GridDensity {
        axes: density.axes.clone(),
        values: vec![0.0; density.len()],
        normalized: false,
    };
    let mut kept = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let Some(t) = target else { continue };
        let v = density.values[i];
        let splits: Vec<Vec<(usize, f64)>> = t.iter().zip(&density.axes).map(|(&x, a)| a.split(x)).collect();
        match splits.as_slice() {
            [a] => {
                for &(i0, w0) in a {
                    out.values[i0] += v * w0;
                    kept += v * w0;
                }
            }
            [a, b] => {
                for &(i0, w0) in a {
                    for &(i1, w1) in b {
                        let target = out.flat_index(&[i0, i1]);
                        out.values[target] += v * w0 * w1;
                        kept += v * w0 * w1;
                    }
                }
            }
            _ => unreachable!("grid dimension is 1 or 2"),
        }
    }
    let total: f64 = density.values.iter().sum();
    let lost = if total > 0.0 { 1.0 - kept / total } else { 0.0 };
    if lost > ESCAPE_TOLERANCE {
        return Err(Error::GridEscape { lost_fraction: lost });
    }
    out.normalized = (out.mass() - 1.0).abs() <= NORMALIZATION_TOL;
    Ok(out)
}

/// `rho_k ∝ (f0# rho_{k-1})^s exp(-eta s G_k)` on the grid; `s = 1` is the plain recursion.
pub fn grid_filter_step(
    density: &GridDensity,
    model: &SystemModel,
    cost: &HorizonCost<'_>,
    eta: f64,
    s: f64,
) -> Result<GridDensity> {
    if !(s > 0.0 && s <= 1.0) || !(eta >= 0.0) {
        return Err(Error::Config("grid step needs s in (0, 1] and eta >= 0".into()));
    }
    if !density.is_normalized() {
        return Err(Error::Precondition("grid step needs a normalized density".into()));
    }
    let pushed = pushforward(density, model)?;
    let log_values: Vec<f64> = pushed
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                s * p.ln() - eta * s * cost.value(&pushed.center(i))
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Precondition("pushforward density vanished".into()));
    }
    let values = log_values.iter().map(|l| (l - max).exp()).collect();
    let mut out = GridDensity::new(pushed.axes, values)?;
    out.normalize()?;
    Ok(out)
}

fn check_same_grid(p: &GridDensity, q: &GridDensity) -> Result<()> {
    if !p.same_grid(q) {
        return Err(Error::Config("densities live on different grids".into()));
    }
    Ok(())
}

/// `max |log(p/q)|` over cells; infinite when the supports differ.
pub fn max_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    let mut worst: f64 = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        match (a > 0.0, b > 0.0) {
            (true, true) => worst = worst.max((a / b).ln().abs()),
            (false, false) => {}
            _ => return Ok(f64::INFINITY),
        }
    }
    Ok(worst)
}

/// `sum p log(p/q) vol`; infinite when `q` vanishes where `p` does not.
pub fn kl_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    let vol = p.cell_volume();
    let mut sum = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            sum += a * (a / b).ln() * vol;
        }
    }
    Ok(sum)
}

/// `S(rho) = sum rho log(rho) vol`; larger means more concentrated.
pub fn entropy(p: &GridDensity) -> f64 {
    let vol = p.cell_volume();
    p.values.iter().filter(|v| **v > 0.0).map(|v| v * v.ln() * vol).sum()
}

/// `½ sum |p - q| vol`.
pub fn total_variation(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    let vol = p.cell_volume();
    Ok(0.5 * p.values.iter().zip(&q.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * vol)
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method, `O(n³)`).
/// Returns `assignment[row] = column`.
pub fn linear_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Exact `W2` between two equal-size, uniformly weighted ensembles.
pub fn empirical_w2(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "empirical W2 needs equal sample counts ({} vs {}); resample first",
            a.len(),
            b.len()
        )));
    }
    check_dim("ensemble", a.dim(), b.dim())?;
    let n = a.len();
    let uniform = |e: &Ensemble| e.weights().iter().all(|w| (w * n as f64 - 1.0).abs() < 1e-9);
    if !uniform(a) || !uniform(b) {
        return Err(Error::Config("empirical W2 needs uniform weights".into()));
    }
    let total = if a.dim() == 1 {
        let sorted = |e: &Ensemble| {
            let mut x: Vec<f64> = e.samples().iter().map(|z| z[0]).collect();
            x.sort_by(f64::total_cmp);
            x
        };
        sorted(a).iter().zip(sorted(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    } else {
        let cost: Vec<Vec<f64>> = a
            .samples()
            .iter()
            .map(|x| b.samples().iter().map(|y| (x - y).norm_squared()).collect())
            .collect();
        let assignment = linear_assignment(&cost);
        assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    };
    Ok((total / n as f64).sqrt())
}

/// Per-coordinate root mean squared error.
pub fn rmse(estimates: &[State], truth: &[State]) -> Result<DVector<f64>> {
    check_dim("rmse sequence", truth.len(), estimates.len())?;
    let Some(first) = truth.first() else {
        return Err(Error::Config("rmse of empty sequences".into()));
    };
    let mut acc = DVector::zeros(first.len());
    for (e, t) in estimates.iter().zip(truth) {
        check_dim("rmse state", t.len(), e.len())?;
        acc += (e - t).map(|d| d * d);
    }
    Ok((acc / truth.len() as f64).map(f64::sqrt))
}
