//! Numerical strong-local-observability checks.
//!
//! The system is strongly locally observable with minimum horizon `T0` when
//! the stacked output Jacobian `∇Σ_T(x)` has full column rank for every
//! `T >= T0`. Black-box dynamics rule out a symbolic test, so ranks are
//! evaluated on user-supplied probe grids.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::cost::HorizonCost;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{NoiseSpec, State, SystemModel};
use crate::rng::stream;

/// Relative singular-value threshold used when none is given.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// `∇Σ_T(x)`: row block `j` is `∇(h ∘ f0^j)(x)`, `j = 0..=T`.
pub fn stacked_jacobian(model: &SystemModel, x: &State, horizon: usize) -> DMatrix<f64> {
    let zero = model.zero_disturbance();
    let w = vec![zero; horizon];
    stacked_jacobian_disturbed(model, x, &w)
}

/// `∇Ω_w(x)` for a fixed disturbance sequence `w_0..w_{T-1}`; horizon `T = w.len()`.
pub fn stacked_jacobian_disturbed(
    model: &SystemModel,
    x: &State,
    disturbances: &[DVector<f64>],
) -> DMatrix<f64> {
    let (n, m) = (model.dim_state(), model.dim_output());
    let mut out = DMatrix::zeros((disturbances.len() + 1) * m, n);
    let mut z = x.clone();
    let mut sensitivity = DMatrix::<f64>::identity(n, n);
    out.view_mut((0, 0), (m, n)).copy_from(&model.jacobian_h(&z));
    for (j, w) in disturbances.iter().enumerate() {
        sensitivity = model.jacobian_f(&z, w) * &sensitivity;
        z = model.step(&z, w);
        let block = model.jacobian_h(&z) * &sensitivity;
        out.view_mut(((j + 1) * m, 0), (m, n)).copy_from(&block);
    }
    out
}

/// Count singular values above `tol * max(σ_max, 1)`.
///
/// The floor of 1 keeps a matrix of pure rounding noise (e.g. `cos(π/2)`
/// entries around 1e-16) at rank 0.
pub fn numerical_rank(matrix: &DMatrix<f64>, tol: f64) -> usize {
    if matrix.is_empty() {
        return 0;
    }
    let sv = matrix.clone().svd(false, false).singular_values;
    let threshold = tol * sv.max().max(1.0);
    sv.iter().filter(|&&s| s > threshold).count()
}

pub fn check_rank(model: &SystemModel, x: &State, horizon: usize, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Config("rank tolerance must be > 0".into()));
    }
    model.check_state(x)?;
    Ok(numerical_rank(&stacked_jacobian(model, x, horizon), tol))
}

/// Smallest rank of `∇Ω_w(x)` over `draws` sampled disturbance sequences.
pub fn check_rank_almost_surely(
    model: &SystemModel,
    noise: &NoiseSpec,
    x: &State,
    horizon: usize,
    draws: usize,
    seed: u64,
    tol: f64,
) -> Result<usize> {
    if draws == 0 {
        return Err(Error::Config("need at least one noise draw".into()));
    }
    model.check_state(x)?;
    let ranks: Vec<usize> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, &[0x0b5, d as u64]);
            let w: Vec<_> = (0..horizon)
                .map(|_| noise.sample_process(&mut rng, model.dim_disturbance()))
                .collect();
            numerical_rank(&stacked_jacobian_disturbed(model, x, &w), tol)
        })
        .collect();
    Ok(ranks.into_iter().min().unwrap_or(0))
}

/// Per-point rank scan over horizons `0..=horizon_tested`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    pub horizon_tested: usize,
    pub grid: Vec<State>,
    /// `ranks[i][t]` is the rank of `∇Σ_t(grid[i])`.
    pub ranks: Vec<Vec<usize>>,
    /// Smallest scanned horizon with full rank at every grid point.
    pub min_horizon_estimate: Option<usize>,
    /// `(grid index, T)` pairs with rank below the state dimension.
    pub failures: Vec<(usize, usize)>,
}

impl ObservabilityReport {
    pub fn summary(&self) -> String {
        match self.min_horizon_estimate {
            Some(t0) => format!("T0 = {t0}"),
            None => format!("T0 not found for T <= {}", self.horizon_tested),
        }
    }

    /// Rows `x_1..x_d, T, rank`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.grid.first().map_or(0, |x| x.len());
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=dim).map(|i| format!("x_{i}")).collect();
        header.push("T".into());
        header.push("rank".into());
        wtr.write_record(&header)?;
        for (x, ranks) in self.grid.iter().zip(&self.ranks) {
            for (t, rank) in ranks.iter().enumerate() {
                let mut row: Vec<String> = x.iter().map(|&c| fmt_f64(c)).collect();
                row.push(t.to_string());
                row.push(rank.to_string());
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Scan `T = 0..=t_max` on every grid point.
pub fn find_min_horizon(
    model: &SystemModel,
    grid: &[State],
    t_max: usize,
    tol: f64,
) -> Result<ObservabilityReport> {
    if grid.is_empty() {
        return Err(Error::Config("observability grid is empty".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config("rank tolerance must be > 0".into()));
    }
    for x in grid {
        model.check_state(x)?;
    }
    let m = model.dim_output();
    let ranks: Vec<Vec<usize>> = grid
        .par_iter()
        .map(|x| {
            let full = stacked_jacobian(model, x, t_max);
            (0..=t_max)
                .map(|t| numerical_rank(&full.rows(0, (t + 1) * m).into_owned(), tol))
                .collect()
        })
        .collect();
    let n = model.dim_state();
    let mut failures = vec![];
    for (i, r) in ranks.iter().enumerate() {
        for (t, &rank) in r.iter().enumerate() {
            if rank < n {
                failures.push((i, t));
            }
        }
    }
    let min_horizon_estimate = (0..=t_max).find(|&t| ranks.iter().all(|r| r[t] == n));
    Ok(ObservabilityReport {
        horizon_tested: t_max,
        grid: grid.to_vec(),
        ranks,
        min_horizon_estimate,
        failures,
    })
}

/// Uniform tensor grid with `points_per_axis` points per coordinate.
pub fn tensor_grid(lo: &State, hi: &State, points_per_axis: usize) -> Vec<State> {
    let d = lo.len();
    let axis = |i: usize, j: usize| {
        if points_per_axis == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * j as f64 / (points_per_axis - 1) as f64
        }
    };
    let total = points_per_axis.pow(d as u32);
    (0..total)
        .map(|mut flat| {
            let mut x = DVector::zeros(d);
            for i in (0..d).rev() {
                x[i] = axis(i, flat % points_per_axis);
                flat /= points_per_axis;
            }
            x
        })
        .collect()
}

/// Outcome of the second-order local/global test at a critical point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondOrderVerdict {
    /// The cost vanishes: the point is a global minimizer.
    AtGlobalMin,
    /// Every probed direction satisfies the inequality: a spurious critical point is not a local minimum.
    Satisfied,
    Violated,
}

/// Test the second-order sufficient condition for the horizon cost at a critical point `x`.
///
/// With `P(x) = (h(f0^j(x)))_{j=1..N}` and stage loss `J`, checks on probe
/// directions `v` that `<∇²P[v,v], ∇J(P(x))> <= -λ_max(Hess J) |∇P v|^2`,
/// using finite differences for `∇²P`.
pub fn check_second_order_condition(
    cost: &HorizonCost<'_>,
    x: &State,
    tol: f64,
) -> Result<SecondOrderVerdict> {
    let model = cost.model();
    model.check_state(x)?;
    let (value, grad) = cost.value_and_gradient(x);
    if grad.norm() > tol {
        return Err(Error::Precondition(format!(
            "not a critical point: |grad| = {:e} > {tol:e}",
            grad.norm()
        )));
    }
    if value <= tol {
        return Ok(SecondOrderVerdict::AtGlobalMin);
    }
    let lambda = cost.stage().hessian_bound().ok_or_else(|| {
        Error::Precondition("second-order test needs a stage cost with a known Hessian bound".into())
    })?;

    let window = cost.window();
    let m = model.dim_output();
    let predict = |z: &State| -> DVector<f64> {
        let seq = model.output_sequence(z, window.len());
        DVector::from_iterator(window.len() * m, seq[1..].iter().flat_map(|y| y.iter().copied()))
    };
    let center = predict(x);
    let dj = DVector::from_iterator(
        window.len() * m,
        window.iter().enumerate().flat_map(|(j, y)| {
            let pred = center.rows(j * m, m).into_owned();
            cost.stage().gradient(y, &pred).iter().copied().collect::<Vec<_>>()
        }),
    );
    let jac = stacked_jacobian(model, x, window.len());
    let jac = jac.rows(m, window.len() * m).into_owned();

    let n = model.dim_state();
    let mut directions: Vec<State> = (0..n)
        .map(|i| DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }))
        .collect();
    let mut rng = stream(0x5ec0, &[n as u64]);
    for _ in 0..64 {
        let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        if d.norm() > 1e-6 {
            directions.push(d.normalize());
        }
    }
    let h = 1e-4 * x.norm().max(1.0);
    for v in &directions {
        let second = (predict(&(x + v * h)) - &center * 2.0 + predict(&(x - v * h))) / (h * h);
        let lhs = second.dot(&dj);
        let rhs = -lambda * (&jac * v).norm_squared();
        let slack = 1e-5 * (1.0 + lhs.abs() + rhs.abs());
        if lhs > rhs + slack {
            return Ok(SecondOrderVerdict::Violated);
        }
    }
    Ok(SecondOrderVerdict::Satisfied)
}
