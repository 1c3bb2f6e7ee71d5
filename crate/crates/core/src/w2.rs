//! W2-MHE: every sample moves by the proximal map
//! `z_k = prox_{eta G_k}(f0(z_{k-1}))`.
//!
//! The prox is the unique minimizer of the strongly convex
//! `Θ(z) = ½|z - v|² + eta G(z)` whenever `eta l < 1`; it is computed by
//! gradient descent with step `1 / (1 + eta l)`.
//!
//! The entropy-regularized variant adds Gaussian noise of variance
//! `2 eta (1 - s_k) / s_k` to each sample after the prox map, the
//! diffusion step matching an entropy term of weight `(1 - s_k) / s_k`.
//! This is an approximation of the regularized measure flow; the grid
//! recursion in [`crate::oracle`] is the exact reference.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cost::{HorizonCost, Objective, Smoothness, StageCost};
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::model::{State, SystemModel, Trajectory};
use crate::rng::stream;

pub const DEFAULT_INNER_TOL: f64 = 1e-10;
pub const DEFAULT_INNER_MAX_ITERS: usize = 200;

/// Certified step-size window `((1 - sqrt(1 - 2lL)) / l, min(alpha, 1/l))`.
pub fn eta_window(l: f64, drift: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(l > 0.0 && drift >= 0.0 && alpha > 0.0) {
        return Err(Error::Config("eta_window needs l > 0, L >= 0, alpha > 0".into()));
    }
    if l * drift > 0.5 {
        return Err(Error::Infeasible(format!(
            "l L = {} exceeds 1/2; no certified step size exists",
            l * drift
        )));
    }
    let lo = (1.0 - (1.0 - 2.0 * l * drift).sqrt()) / l;
    let hi = alpha.min(1.0 / l);
    if lo >= hi {
        return Err(Error::Infeasible(format!("empty step-size window ({lo}, {hi})")));
    }
    Ok((lo, hi))
}

/// `prox_{eta G}(v)` with `|∇Θ(z)| <= tol` on return.
pub fn prox_step<O: Objective + ?Sized>(
    cost: &O,
    v: &State,
    eta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<State> {
    check_dim("prox input", cost.dim(), v.len())?;
    let l = cost.smoothness();
    if !(eta > 0.0 && eta * l < 1.0) {
        return Err(Error::Config(format!(
            "prox needs 0 < eta l < 1 (eta = {eta}, l = {l})"
        )));
    }
    let step = 1.0 / (1.0 + eta * l);
    let mut z = v.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let grad = &z - v + cost.gradient(&z) * eta;
        residual = grad.norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(z);
        }
        z -= grad * step;
    }
    Err(Error::Convergence {
        iterations: max_iters,
        residual,
        last_iterate: z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepMode {
    /// η must lie in the certified window for the given invariance radius α.
    Certified { alpha: f64 },
    /// Only `eta l < 1` is enforced.
    Permissive,
}

/// Entropy-regularization schedule `s_1..s_T` with its noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSchedule {
    pub s: Vec<f64>,
    pub seed: u64,
}

impl DpSchedule {
    pub fn constant(s: f64, steps: usize, seed: u64) -> Self {
        Self {
            s: vec![s; steps],
            seed,
        }
    }

    /// `s_k` for step `k >= 1`.
    pub fn at(&self, k: usize) -> Result<f64> {
        k.checked_sub(1)
            .and_then(|i| self.s.get(i))
            .copied()
            .ok_or_else(|| Error::Config(format!("privacy schedule has no entry for step {k}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config("schedule entries must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2Config {
    pub eta: f64,
    pub window_len: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub mode: StepMode,
    pub dp: Option<DpSchedule>,
}

impl W2Config {
    pub fn new(eta: f64, window_len: usize, mode: StepMode) -> Self {
        Self {
            eta,
            window_len,
            inner_tol: DEFAULT_INNER_TOL,
            inner_max_iters: DEFAULT_INNER_MAX_ITERS,
            mode,
            dp: None,
        }
    }

    pub fn validate(&self, smoothness: &Smoothness) -> Result<()> {
        if !(self.eta > 0.0) || self.window_len == 0 {
            return Err(Error::Config("W2 config needs eta > 0 and N >= 1".into()));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iters == 0 {
            return Err(Error::Config("inner solver needs tol > 0 and max_iters >= 1".into()));
        }
        if self.eta * smoothness.l >= 1.0 {
            return Err(Error::Config(format!(
                "eta l = {} must be < 1",
                self.eta * smoothness.l
            )));
        }
        if let StepMode::Certified { alpha } = self.mode {
            let (lo, hi) = eta_window(smoothness.l, smoothness.drift, alpha)?;
            if !(self.eta > lo && self.eta < hi) {
                return Err(Error::Infeasible(format!(
                    "eta = {} outside the certified window ({lo}, {hi})",
                    self.eta
                )));
            }
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    /// Diffusion standard deviation `sqrt(2 eta (1 - s) / s)` at step `k`; 0 without DP.
    pub fn noise_std(&self, k: usize) -> Result<f64> {
        match &self.dp {
            None => Ok(0.0),
            Some(dp) => {
                let s = dp.at(k)?;
                Ok((2.0 * self.eta * (1.0 - s) / s).sqrt())
            }
        }
    }
}

/// Map every sample through `propagate` then the prox of `objective`, adding DP noise if configured.
fn advance<P, O>(ensemble: &Ensemble, propagate: P, objective: &O, config: &W2Config) -> Result<Ensemble>
where
    P: Fn(&State) -> State + Sync,
    O: Objective + ?Sized,
{
    let k = ensemble.time_index() + 1;
    let std = config.noise_std(k)?;
    let noise_seed = config.dp.as_ref().map(|d| d.seed);
    let samples = ensemble
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let v = propagate(z);
            let mut out = prox_step(objective, &v, config.eta, config.inner_tol, config.inner_max_iters)
                .map_err(|e| e.in_sample(i))?;
            if let (Some(seed), true) = (noise_seed, std > 0.0) {
                let mut rng = stream(seed, &[k as u64, i as u64]);
                out += DVector::from_fn(out.len(), |_, _| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * std
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ensemble.advanced(samples, k as u64))
}

fn check_step(ensemble: &Ensemble, cost: &HorizonCost<'_>) -> Result<()> {
    check_dim("ensemble", cost.model().dim_state(), ensemble.dim())?;
    if cost.time_index() != ensemble.time_index() + 1 {
        return Err(Error::Precondition(format!(
            "cost is for k = {} but the ensemble is at k = {}",
            cost.time_index(),
            ensemble.time_index()
        )));
    }
    Ok(())
}

/// One W2-MHE step: `z ↦ prox_{eta G_k}(f0(z))` for every sample.
pub fn w2_step(ensemble: &Ensemble, cost: &HorizonCost<'_>, config: &W2Config) -> Result<Ensemble> {
    check_step(ensemble, cost)?;
    let model = cost.model();
    advance(ensemble, |z| model.f0(z), cost, config)
}

/// Per-step diagnostics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTelemetry {
    pub k: usize,
    pub mean: State,
    pub costs: Vec<f64>,
    pub gradient_norms: Vec<f64>,
}

impl StepTelemetry {
    fn collect(k: usize, ensemble: &Ensemble, cost: &HorizonCost<'_>) -> Self {
        let (costs, gradient_norms) = ensemble
            .samples()
            .par_iter()
            .map(|z| {
                let (c, g) = cost.value_and_gradient(z);
                (c, g.norm())
            })
            .unzip();
        Self {
            k,
            mean: ensemble.mean(),
            costs,
            gradient_norms,
        }
    }

    /// Weighted mean of `|∇G_k(z)|^2` across samples.
    pub fn mean_squared_gradient(&self, weights: &[f64]) -> f64 {
        self.gradient_norms
            .iter()
            .zip(weights)
            .map(|(g, w)| w * g * g)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct W2Run {
    /// `mu_0..mu_T`.
    pub ensembles: Vec<Ensemble>,
    /// Diagnostics for `k = 1..T`.
    pub telemetry: Vec<StepTelemetry>,
}

impl W2Run {
    pub fn means(&self) -> Vec<State> {
        self.ensembles.iter().map(Ensemble::mean).collect()
    }
}

fn check_measurements(len: usize, steps: usize, window_len: usize) -> Result<()> {
    if len < steps + window_len + 1 {
        return Err(Error::Config(format!(
            "{steps} steps with N = {window_len} need y_0..y_{}, have {len} measurements",
            steps + window_len
        )));
    }
    Ok(())
}

/// Run W2-MHE for `k = 1..=steps` on `measurements = y_0, y_1, ...`.
pub fn run_w2(
    model: &SystemModel,
    stage: &StageCost,
    measurements: &[DVector<f64>],
    prior: Ensemble,
    smoothness: Smoothness,
    config: &W2Config,
    steps: usize,
) -> Result<W2Run> {
    config.validate(&smoothness)?;
    check_measurements(measurements.len(), steps, config.window_len)?;
    let mut ensembles = vec![prior];
    let mut telemetry = Vec::with_capacity(steps);
    for k in 1..=steps {
        let cost = HorizonCost::from_measurements(model, stage, measurements, k, config.window_len, smoothness)?;
        let next = w2_step(ensembles.last().expect("nonempty"), &cost, config)?;
        telemetry.push(StepTelemetry::collect(k, &next, &cost));
        ensembles.push(next);
    }
    Ok(W2Run { ensembles, telemetry })
}

/// Noise-aware reference estimator: `z̄_k = prox_{eta Ḡ_k}(f(z̄_{k-1}, w_{k-1}))`
/// with the true disturbances of a simulated trajectory.
pub fn run_reference_w2(
    model: &SystemModel,
    stage: &StageCost,
    trajectory: &Trajectory,
    prior: Ensemble,
    smoothness: Smoothness,
    config: &W2Config,
    steps: usize,
) -> Result<Vec<Ensemble>> {
    config.validate(&smoothness)?;
    let n = config.window_len;
    check_measurements(trajectory.outputs.len(), steps, n)?;
    if trajectory.process_noise.len() < steps + n {
        return Err(Error::Config("trajectory is too short for the reference estimator".into()));
    }
    let mut ensembles = vec![prior];
    for k in 1..=steps {
        let cost = HorizonCost::from_measurements(model, stage, &trajectory.outputs, k, n, smoothness)?;
        let w = &trajectory.process_noise[k..k + n];
        let v = &trajectory.measurement_noise[k + 1..=k + n];
        let disturbed = cost.with_disturbances(w, v)?;
        let prev = ensembles.last().expect("nonempty");
        check_step(prev, &cost)?;
        let w_prev = &trajectory.process_noise[k - 1];
        let next = advance(prev, |z| model.step(z, w_prev), &disturbed, config)?;
        ensembles.push(next);
    }
    Ok(ensembles)
}

/// Inputs of the robustness bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessParams {
    pub c_f1: f64,
    pub c_f2: f64,
    pub l: f64,
    pub l_w: f64,
    pub eta: f64,
    pub window_len: usize,
    pub process_bound: f64,
    pub measurement_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessBound {
    /// `C_k = sum_{j=1..k} r^j`.
    pub c_k: f64,
    pub bound: f64,
    /// `r = c_f1 / (1 - eta l)`.
    pub contraction_ratio: f64,
    /// `r >= 1`: the series grows without bound in `k`.
    pub diverges: bool,
}

impl RobustnessParams {
    fn validate(&self) -> Result<()> {
        if !(self.c_f1 > 0.0 && self.eta > 0.0 && self.eta * self.l < 1.0) {
            return Err(Error::Config("robustness bound needs c_f1 > 0 and 0 < eta l < 1".into()));
        }
        Ok(())
    }

    pub fn contraction_ratio(&self) -> f64 {
        self.c_f1 / (1.0 - self.eta * self.l)
    }

    /// Coefficient multiplying `C_k`.
    fn gain(&self) -> f64 {
        let (w, v) = (self.process_bound, self.measurement_bound);
        self.c_f2 / self.c_f1 * w
            + self.eta * self.l_w * (self.window_len as f64).sqrt() / self.c_f1 * (w + v)
    }

    /// `C_∞ = r / (1 - r)`, or `None` when `r >= 1`.
    pub fn limit(&self) -> Result<Option<f64>> {
        self.validate()?;
        let r = self.contraction_ratio();
        Ok((r < 1.0).then(|| r / (1.0 - r)))
    }
}

/// Upper bound on `W2(mu_k, mu̅_k)` between the estimator and the noise-aware reference.
pub fn robustness_bound(params: &RobustnessParams, k: usize) -> Result<RobustnessBound> {
    params.validate()?;
    let r = params.contraction_ratio();
    let mut c_k = 0.0;
    let mut term = 1.0;
    for _ in 0..k {
        term *= r;
        c_k += term;
    }
    Ok(RobustnessBound {
        c_k,
        bound: params.gain() * c_k,
        contraction_ratio: r,
        diverges: r >= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry::{benchmark2d, linear, scalar_linear};
    use crate::model::{sample_box, simulate, NoiseSpec};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> State {
        DVector::from_row_slice(xs)
    }

    /// `G(z) = |Az - b|^2` as a bare objective.
    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
        l: f64,
    }

    impl Quadratic {
        fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
            let ata = a.transpose() * &a;
            let l = 2.0 * ata.symmetric_eigen().eigenvalues.max().max(1e-12);
            Self { a, b, l }
        }
        fn prox_closed_form(&self, v: &State, eta: f64) -> State {
            let n = self.a.ncols();
            let lhs = DMatrix::identity(n, n) + self.a.transpose() * &self.a * (2.0 * eta);
            let rhs = v + self.a.transpose() * &self.b * (2.0 * eta);
            lhs.lu().solve(&rhs).unwrap()
        }
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn value(&self, z: &State) -> f64 {
            (&self.a * z - &self.b).norm_squared()
        }
        fn gradient(&self, z: &State) -> State {
            self.a.transpose() * (&self.a * z - &self.b) * 2.0
        }
        fn smoothness(&self) -> f64 {
            self.l
        }
    }

    struct Zero;
    impl Objective for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _: &State) -> f64 {
            0.0
        }
        fn gradient(&self, z: &State) -> State {
            DVector::zeros(z.len())
        }
        fn smoothness(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn eta_window_examples() {
        let (lo, hi) = eta_window(2.0, 0.1, 0.4).unwrap();
        assert!((lo - (1.0 - 0.6f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((lo - 0.11270).abs() < 1e-5);
        assert_eq!(hi, 0.4);
        assert_eq!(eta_window(2.0, 0.0, 0.4).unwrap(), (0.0, 0.4));
        assert_eq!(eta_window(2.0, 0.0, 3.0).unwrap(), (0.0, 0.5));
        assert!(matches!(eta_window(2.0, 0.3, 0.4), Err(Error::Infeasible(_))));
        assert!(matches!(eta_window(2.0, 0.25, 0.01), Err(Error::Infeasible(_))));
        assert!(eta_window(0.0, 0.1, 0.4).is_err());
    }

    #[test]
    fn prox_of_zero_is_identity() {
        let x = v(&[0.3, -2.0]);
        assert_eq!(prox_step(&Zero, &x, 0.5, 1e-10, 10).unwrap(), x);
    }

    #[test]
    fn scalar_prox_closed_form() {
        let g = Quadratic::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0]));
        let z = prox_step(&g, &v(&[0.0]), 0.25, 1e-12, 200).unwrap();
        assert!((z[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn prox_rejects_large_step() {
        let g = Quadratic::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0]));
        assert!(prox_step(&g, &v(&[0.0]), 0.5, 1e-12, 200).unwrap_err().is_config());
    }

    #[test]
    fn prox_convergence_error_carries_iterate() {
        // An overstated l slows the inner descent below one-step convergence.
        let mut g = Quadratic::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0]));
        g.l = 3.0;
        match prox_step(&g, &v(&[0.0]), 0.25, 1e-14, 2) {
            Err(Error::Convergence {
                iterations,
                residual,
                last_iterate,
            }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-14);
                assert!(last_iterate[0] > 0.0 && last_iterate[0] < 1.0 / 3.0 + 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    fn random_quadratic(rng: &mut impl Rng) -> (Quadratic, State, f64) {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=4);
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let q = Quadratic::new(a, b);
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let eta = rng.gen_range(0.05..0.95) / q.l;
        (q, x, eta)
    }

    #[test]
    fn random_quadratic_prox_matches_linear_solve() {
        let mut rng = stream(11, &[]);
        for _ in 0..100 {
            let (q, x, eta) = random_quadratic(&mut rng);
            let z = prox_step(&q, &x, eta, 1e-11, 5000).unwrap();
            let exact = q.prox_closed_form(&x, eta);
            assert!((z - exact).amax() < 1e-8);
        }
    }

    #[test]
    fn prox_satisfies_fixed_point_residual() {
        let mut rng = stream(12, &[]);
        for _ in 0..50 {
            let (q, x, eta) = random_quadratic(&mut rng);
            let tol = 1e-9;
            let z = prox_step(&q, &x, eta, tol, 5000).unwrap();
            let implicit = &x - q.gradient(&z) * eta;
            assert!((&z - implicit).norm() <= tol * (1.0 + eta * q.l));
        }
    }

    #[test]
    fn inner_objective_strongly_convex_on_horizon_cost() {
        let model = benchmark2d(0.1);
        let stage = StageCost::quadratic();
        let traj = simulate(&model, &NoiseSpec::zero(), &v(&[1.0, 0.0]), 20, 0).unwrap();
        let smooth = Smoothness::new(26.5, 0.0, 0.0).unwrap();
        let cost = HorizonCost::from_measurements(&model, &stage, &traj.outputs, 1, 5, smooth).unwrap();
        let eta = 0.5 / smooth.l;
        let lo = v(&[-1.0, -1.0]);
        let hi = v(&[1.0, 1.0]);
        let mut rng = stream(13, &[]);
        // Θ gradient without the v offset; differences cancel it.
        let grad_theta = |z: &State| z + cost.gradient(z) * eta;
        let mut worst = f64::INFINITY;
        for _ in 0..1000 {
            let a = sample_box(&mut rng, &lo, &hi);
            let b = sample_box(&mut rng, &lo, &hi);
            let d = &a - &b;
            let lhs = (grad_theta(&a) - grad_theta(&b)).dot(&d);
            worst = worst.min(lhs / d.norm_squared());
        }
        assert!(worst >= 1.0 - eta * smooth.l, "{worst}");
    }

    proptest! {
        #[test]
        fn strong_convexity_inequality(seed in 0u64..1000) {
            let mut rng = stream(seed, &[1]);
            let (q, _, eta) = random_quadratic(&mut rng);
            let n = q.dim();
            let a = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let d = &a - &b;
            let g = |z: &State| z + q.gradient(z) * eta;
            let lhs = (g(&a) - g(&b)).dot(&d);
            prop_assert!(lhs >= (1.0 - eta * q.l) * d.norm_squared() - 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let smooth = Smoothness::new(2.0, 0.1, 0.0).unwrap();
        let mut cfg = W2Config::new(0.2, 3, StepMode::Certified { alpha: 0.4 });
        cfg.validate(&smooth).unwrap();
        cfg.eta = 0.1;
        assert!(matches!(cfg.validate(&smooth), Err(Error::Infeasible(_))));
        cfg.mode = StepMode::Permissive;
        cfg.validate(&smooth).unwrap();
        cfg.eta = 0.5;
        assert!(cfg.validate(&smooth).unwrap_err().is_config());
        let drifty = Smoothness::new(2.0, 0.3, 0.0).unwrap();
        let cfg = W2Config::new(0.2, 3, StepMode::Certified { alpha: 0.4 });
        assert!(matches!(cfg.validate(&drifty), Err(Error::Infeasible(_))));
        let mut cfg = W2Config::new(0.2, 3, StepMode::Permissive);
        cfg.dp = Some(DpSchedule::constant(0.0, 3, 1));
        assert!(cfg.validate(&smooth).is_err());
    }

    fn exact_setup(model: &SystemModel, steps: usize, n: usize) -> (Trajectory, Ensemble) {
        let traj = simulate(model, &NoiseSpec::zero(), &v(&[1.0, 0.0]), steps + n, 3).unwrap();
        let prior = Ensemble::uniform(vec![traj.states[0].clone(); 3], 0, vec![]).unwrap();
        (traj, prior)
    }

    #[test]
    fn exact_states_stay_on_trajectory() {
        let model = benchmark2d(0.1);
        let (traj, prior) = exact_setup(&model, 10, 4);
        let smooth = Smoothness::new(26.5, 0.0, 0.0).unwrap();
        let cfg = W2Config::new(0.03, 4, StepMode::Permissive);
        let run = run_w2(&model, &StageCost::quadratic(), &traj.outputs, prior, smooth, &cfg, 10).unwrap();
        for (k, e) in run.ensembles.iter().enumerate() {
            assert_eq!(e.time_index(), k);
            for z in e.samples() {
                assert!((z - &traj.states[k]).norm() < 1e-12);
            }
        }
        assert!(run.telemetry.iter().all(|t| t.gradient_norms.iter().all(|g| *g < 1e-10)));
    }

    #[test]
    fn single_sample_matches_closed_form() {
        // x_{k+1} = a x, y = x: G_k(z) = sum_j (a^j z - y_{k+j})^2, prox is linear.
        let a = 0.9;
        let model = scalar_linear(a);
        let stage = StageCost::quadratic();
        let ys: Vec<_> = [0.0, 1.0, 0.5, -0.2, 0.4].iter().map(|&y| v(&[y])).collect();
        let smooth = Smoothness::new(4.0, 0.0, 0.0).unwrap();
        let eta = 0.1;
        let mut cfg = W2Config::new(eta, 2, StepMode::Permissive);
        cfg.inner_tol = 1e-13;
        cfg.inner_max_iters = 1000;
        let prior = Ensemble::uniform(vec![v(&[2.0])], 0, vec![]).unwrap();
        let run = run_w2(&model, &stage, &ys, prior, smooth, &cfg, 2).unwrap();
        let mut z = 2.0;
        for k in 1..=2 {
            let vv = a * z;
            let (y1, y2) = (ys[k + 1][0], ys[k + 2][0]);
            let num = vv + 2.0 * eta * (a * y1 + a * a * y2);
            let den = 1.0 + 2.0 * eta * (a * a + a.powi(4));
            z = num / den;
            assert!((run.ensembles[k].samples()[0][0] - z).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn dp_with_unit_schedule_is_identical() {
        let model = benchmark2d(0.1);
        let noise = NoiseSpec::new(0.1, 0.15).unwrap();
        let traj = simulate(&model, &noise, &v(&[1.0, 0.0]), 20, 5).unwrap();
        let prior = Ensemble::sample_box_prior(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), 8, 5).unwrap();
        let smooth = Smoothness::new(26.5, 0.0, 0.0).unwrap();
        let stage = StageCost::quadratic();
        let plain = W2Config::new(0.03, 5, StepMode::Permissive);
        let mut dp = plain.clone();
        dp.dp = Some(DpSchedule::constant(1.0, 10, 77));
        let a = run_w2(&model, &stage, &traj.outputs, prior.clone(), smooth, &plain, 10).unwrap();
        let b = run_w2(&model, &stage, &traj.outputs, prior.clone(), smooth, &dp, 10).unwrap();
        assert_eq!(a.ensembles, b.ensembles);

        dp.dp = Some(DpSchedule::constant(0.5, 10, 77));
        let c = run_w2(&model, &stage, &traj.outputs, prior.clone(), smooth, &dp, 10).unwrap();
        let d = run_w2(&model, &stage, &traj.outputs, prior, smooth, &dp, 10).unwrap();
        assert_ne!(a.ensembles, c.ensembles);
        assert_eq!(c.ensembles, d.ensembles);
    }

    #[test]
    fn dp_noise_has_configured_variance() {
        let model = scalar_linear(1.0);
        let eta = 0.1;
        let s = 0.25;
        let mut cfg = W2Config::new(eta, 1, StepMode::Permissive);
        cfg.dp = Some(DpSchedule::constant(s, 1, 3));
        // Zero measurement window cost at z = 0 for every sample: only noise moves them.
        let ys = vec![v(&[0.0]); 3];
        let stage = StageCost::User {
            value: Arc::new(|_, _| 0.0),
            gradient: Arc::new(|_, p: &DVector<f64>| DVector::zeros(p.len())),
        };
        let prior = Ensemble::uniform(vec![v(&[0.0]); 20_000], 0, vec![]).unwrap();
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let run = run_w2(&model, &stage, &ys, prior, smooth, &cfg, 1).unwrap();
        let var = run.ensembles[1].samples().iter().map(|z| z[0] * z[0]).sum::<f64>() / 20_000.0;
        let expected = 2.0 * eta * (1.0 - s) / s;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn run_needs_enough_measurements() {
        let model = benchmark2d(0.1);
        let (traj, prior) = exact_setup(&model, 5, 4);
        let smooth = Smoothness::new(26.5, 0.0, 0.0).unwrap();
        let cfg = W2Config::new(0.03, 4, StepMode::Permissive);
        assert!(run_w2(&model, &StageCost::quadratic(), &traj.outputs, prior, smooth, &cfg, 6)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn reference_with_zero_disturbances_is_bitwise_equal() {
        let model = benchmark2d(0.1);
        let traj = simulate(&model, &NoiseSpec::zero(), &v(&[1.0, 0.0]), 20, 0).unwrap();
        let prior = Ensemble::sample_box_prior(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), 6, 2).unwrap();
        let smooth = Smoothness::new(26.5, 0.0, 0.0).unwrap();
        let stage = StageCost::quadratic();
        let cfg = W2Config::new(0.03, 5, StepMode::Permissive);
        let a = run_w2(&model, &stage, &traj.outputs, prior.clone(), smooth, &cfg, 12).unwrap();
        let b = run_reference_w2(&model, &stage, &traj, prior, smooth, &cfg, 12).unwrap();
        assert_eq!(a.ensembles, b);
    }

    #[test]
    fn reference_scalar_hand_computation() {
        // x_{k+1} = a x + w, y = x + v; Ḡ_k(z) = sum_j (a^j z + sum_i a^{j-1-i} w_{k+i} + v_{k+j} - y_{k+j})^2.
        let a = 0.8;
        let model = linear(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let traj = Trajectory {
            states: vec![v(&[0.0]); 5],
            outputs: [0.3, 0.9, -0.4, 0.2, 0.7].iter().map(|&y| v(&[y])).collect(),
            process_noise: [0.05, -0.02, 0.01, 0.03].iter().map(|&w| v(&[w])).collect(),
            measurement_noise: [0.0, 0.1, -0.1, 0.05, 0.02].iter().map(|&e| v(&[e])).collect(),
            seed: 0,
        };
        let eta = 0.2;
        let smooth = Smoothness::new(2.0, 0.0, 0.0).unwrap();
        let mut cfg = W2Config::new(eta, 1, StepMode::Permissive);
        cfg.inner_tol = 1e-14;
        cfg.inner_max_iters = 1000;
        let prior = Ensemble::uniform(vec![v(&[1.0])], 0, vec![]).unwrap();
        let run = run_reference_w2(&model, &StageCost::quadratic(), &traj, prior, smooth, &cfg, 3).unwrap();
        let mut z = 1.0;
        #[allow(clippy::needless_range_loop)]
        for k in 1..=3 {
            let vv = a * z + traj.process_noise[k - 1][0];
            // N = 1: residual a z + w_k + v_{k+1} - y_{k+1}.
            let c = traj.process_noise[k][0] + traj.measurement_noise[k + 1][0] - traj.outputs[k + 1][0];
            z = (vv - 2.0 * eta * a * c) / (1.0 + 2.0 * eta * a * a);
            assert!((run[k].samples()[0][0] - z).abs() < 1e-13, "k={k}");
        }
    }

    fn params(c_f1: f64) -> RobustnessParams {
        RobustnessParams {
            c_f1,
            c_f2: 1.0,
            l: 2.0,
            l_w: 1.0,
            eta: 0.1,
            window_len: 4,
            process_bound: 0.1,
            measurement_bound: 0.1,
        }
    }

    #[test]
    fn robustness_examples() {
        let p = params(0.7);
        assert!((p.limit().unwrap().unwrap() - 7.0).abs() < 1e-12);
        let b = robustness_bound(&p, 2000).unwrap();
        assert!((b.c_k - 7.0).abs() < 1e-9);
        assert!((b.contraction_ratio - 0.875).abs() < 1e-15);
        assert!(!b.diverges);
        let gain = 1.0 / 0.7 * 0.1 + 0.1 * 1.0 * 2.0 / 0.7 * 0.2;
        assert!((b.bound - gain * b.c_k).abs() < 1e-12);

        let mut quiet = p;
        quiet.process_bound = 0.0;
        quiet.measurement_bound = 0.0;
        assert_eq!(robustness_bound(&quiet, 10).unwrap().bound, 0.0);

        let d = params(0.9);
        assert!(d.limit().unwrap().is_none());
        let b10 = robustness_bound(&d, 10).unwrap();
        let b20 = robustness_bound(&d, 20).unwrap();
        assert!(b10.diverges && b20.c_k > b10.c_k);
        assert!(b20.c_k > 20.0);

        let mut bad = p;
        bad.eta = 0.5;
        assert!(robustness_bound(&bad, 3).is_err());
    }

    proptest! {
        #[test]
        fn c_k_is_increasing_and_below_limit(c in 0.05f64..0.79, k in 1usize..200) {
            let p = params(c);
            let a = robustness_bound(&p, k).unwrap();
            let b = robustness_bound(&p, k + 1).unwrap();
            prop_assert!(b.c_k >= a.c_k);
            prop_assert!(a.c_k <= p.limit().unwrap().unwrap() * (1.0 + 1e-12));
        }
    }
}
