//! Moving-horizon cost `G_k(z)` and its gradient.
//!
//! `z` is the state estimate at time `k`. The predicted outputs are
//! `h(f0^j(z))` for `j = 1..=N`, compared against the window
//! `y_{k+1}, ..., y_{k+N}`; both sequences have length `N`.
//!
//! The disturbed cost `Ḡ_k(z, w, v)` propagates `z` through `f(., w_{k+j-1})`
//! and adds `v_{k+j}` to each predicted output. With zero disturbances the two
//! coincide.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::model::{sample_box, State, SystemModel};
use crate::rng::stream;

/// Per-output loss `l(y, y_pred)` and its gradient with respect to `y_pred`.
pub type StageFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type StageGradFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Loss summed over the window. Must be `>= 0` and vanish only at `y_pred = y`.
#[derive(Clone)]
pub enum StageCost {
    /// `(y_pred - y)^T W (y_pred - y)`; `None` means `W = I`.
    Quadratic { weight: Option<DMatrix<f64>> },
    User { value: StageFn, gradient: StageGradFn },
}

impl fmt::Debug for StageCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageCost::Quadratic { weight } => f
                .debug_struct("Quadratic")
                .field("weight", weight)
                .finish(),
            StageCost::User { .. } => f.write_str("User"),
        }
    }
}

impl Default for StageCost {
    fn default() -> Self {
        StageCost::Quadratic { weight: None }
    }
}

impl StageCost {
    pub fn quadratic() -> Self {
        Self::default()
    }

    /// Weighted quadratic stage; the weight must be symmetric positive definite.
    pub fn weighted(weight: DMatrix<f64>) -> Result<Self> {
        if !weight.is_square() || (&weight - weight.transpose()).norm() > 1e-12 * weight.norm() {
            return Err(Error::Config("stage weight must be symmetric".into()));
        }
        if weight.clone().cholesky().is_none() {
            return Err(Error::Config("stage weight must be positive definite".into()));
        }
        Ok(StageCost::Quadratic {
            weight: Some(weight),
        })
    }

    pub fn value(&self, y: &DVector<f64>, pred: &DVector<f64>) -> f64 {
        match self {
            StageCost::Quadratic { weight: None } => (pred - y).norm_squared(),
            StageCost::Quadratic { weight: Some(w) } => {
                let r = pred - y;
                r.dot(&(w * &r))
            }
            StageCost::User { value, .. } => {
                let v = value(y, pred);
                debug_assert!(v >= 0.0, "user stage cost returned a negative value");
                v
            }
        }
    }

    pub fn gradient(&self, y: &DVector<f64>, pred: &DVector<f64>) -> DVector<f64> {
        match self {
            StageCost::Quadratic { weight: None } => (pred - y) * 2.0,
            StageCost::Quadratic { weight: Some(w) } => (w * (pred - y)) * 2.0,
            StageCost::User { gradient, .. } => gradient(y, pred),
        }
    }

    /// Largest Hessian eigenvalue of the loss in `y_pred`, when known.
    pub fn hessian_bound(&self) -> Option<f64> {
        match self {
            StageCost::Quadratic { weight: None } => Some(2.0),
            StageCost::Quadratic { weight: Some(w) } => {
                Some(2.0 * w.clone().symmetric_eigen().eigenvalues.max())
            }
            StageCost::User { .. } => None,
        }
    }
}

/// Regularity constants of the horizon cost, supplied by the user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    /// Lipschitz constant of `grad G_k`.
    pub l: f64,
    /// Drift constant: `|G_{k+1}(f0(z)) - G_k(z)| <= L |grad G_k(z)|^2`.
    pub drift: f64,
    /// Sensitivity of `grad G_k` to the disturbances.
    pub l_w: f64,
}

impl Smoothness {
    pub fn new(l: f64, drift: f64, l_w: f64) -> Result<Self> {
        if !(l > 0.0 && drift >= 0.0 && l_w >= 0.0) {
            return Err(Error::Config(
                "smoothness requires l > 0, L >= 0, l_w >= 0".into(),
            ));
        }
        Ok(Self { l, drift, l_w })
    }

    /// `l L <= 1/2`, needed by the certified step-size window.
    pub fn drift_condition_holds(&self) -> bool {
        self.l * self.drift <= 0.5
    }
}

/// A differentiable objective with a declared gradient-Lipschitz constant.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &State) -> f64;
    fn gradient(&self, z: &State) -> State;
    fn smoothness(&self) -> f64;
}

/// `(w_k..w_{k+N-1}, v_{k+1}..v_{k+N})`.
type DisturbanceRecord<'r> = (&'r [DVector<f64>], &'r [DVector<f64>]);

/// `G_k` for one measurement window.
#[derive(Clone)]
pub struct HorizonCost<'a> {
    model: &'a SystemModel,
    stage: &'a StageCost,
    window: &'a [DVector<f64>],
    k: usize,
    smoothness: Smoothness,
}

impl fmt::Debug for HorizonCost<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HorizonCost")
            .field("model", &self.model.name())
            .field("stage", self.stage)
            .field("k", &self.k)
            .field("window_len", &self.window.len())
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl<'a> HorizonCost<'a> {
    /// Cost over an explicit window `y_{k+1..=k+N}`.
    pub fn new(
        model: &'a SystemModel,
        stage: &'a StageCost,
        window: &'a [DVector<f64>],
        k: usize,
        smoothness: Smoothness,
    ) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::Config("measurement window must be nonempty".into()));
        }
        for y in window {
            check_dim("window measurement", model.dim_output(), y.len())?;
        }
        Ok(Self {
            model,
            stage,
            window,
            k,
            smoothness,
        })
    }

    /// Cost at time `k` using `measurements[k+1..=k+N]`.
    pub fn from_measurements(
        model: &'a SystemModel,
        stage: &'a StageCost,
        measurements: &'a [DVector<f64>],
        k: usize,
        window_len: usize,
        smoothness: Smoothness,
    ) -> Result<Self> {
        let end = k + window_len;
        if end >= measurements.len() {
            return Err(Error::Config(format!(
                "window y_{}..=y_{end} needs {} measurements, have {}",
                k + 1,
                end + 1,
                measurements.len()
            )));
        }
        Self::new(model, stage, &measurements[k + 1..=end], k, smoothness)
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }
    pub fn stage(&self) -> &'a StageCost {
        self.stage
    }
    pub fn window(&self) -> &'a [DVector<f64>] {
        self.window
    }
    pub fn window_len(&self) -> usize {
        self.window.len()
    }
    pub fn time_index(&self) -> usize {
        self.k
    }
    pub fn smoothness_constants(&self) -> Smoothness {
        self.smoothness
    }

    pub fn with_smoothness(mut self, smoothness: Smoothness) -> Self {
        self.smoothness = smoothness;
        self
    }

    fn evaluate(
        &self,
        z: &State,
        disturbances: Option<DisturbanceRecord<'_>>,
        with_gradient: bool,
    ) -> (f64, Option<State>) {
        let n = self.model.dim_state();
        let zero_w = self.model.zero_disturbance();
        let mut x = z.clone();
        let mut sensitivity = DMatrix::<f64>::identity(n, n);
        let mut value = 0.0;
        let mut grad = with_gradient.then(|| DVector::zeros(n));
        for (j, y) in self.window.iter().enumerate() {
            let w = disturbances.map_or(&zero_w, |(w, _)| &w[j]);
            if let Some(g) = grad.as_mut() {
                sensitivity = self.model.jacobian_f(&x, w) * &sensitivity;
                x = self.model.step(&x, w);
                let mut pred = self.model.output(&x);
                if let Some((_, v)) = disturbances {
                    pred += &v[j];
                }
                value += self.stage.value(y, &pred);
                let dpred = self.stage.gradient(y, &pred);
                let jh = self.model.jacobian_h(&x);
                *g += sensitivity.tr_mul(&jh.tr_mul(&dpred));
            } else {
                x = self.model.step(&x, w);
                let mut pred = self.model.output(&x);
                if let Some((_, v)) = disturbances {
                    pred += &v[j];
                }
                value += self.stage.value(y, &pred);
            }
        }
        (value, grad)
    }

    /// `G_k(z)`.
    pub fn value(&self, z: &State) -> f64 {
        self.evaluate(z, None, false).0
    }

    /// `grad G_k(z)` by the chain rule through `f0` and `h`.
    pub fn gradient(&self, z: &State) -> State {
        self.evaluate(z, None, true).1.expect("gradient requested")
    }

    pub fn value_and_gradient(&self, z: &State) -> (f64, State) {
        let (v, g) = self.evaluate(z, None, true);
        (v, g.expect("gradient requested"))
    }

    fn check_disturbances(&self, w: &[DVector<f64>], v: &[DVector<f64>]) -> Result<()> {
        check_dim("process disturbance slice", self.window.len(), w.len())?;
        check_dim("measurement disturbance slice", self.window.len(), v.len())?;
        for wj in w {
            check_dim("process disturbance", self.model.dim_disturbance(), wj.len())?;
        }
        for vj in v {
            check_dim("measurement disturbance", self.model.dim_output(), vj.len())?;
        }
        Ok(())
    }

    /// `Ḡ_k(z, w, v)` with `w = (w_k..w_{k+N-1})`, `v = (v_{k+1}..v_{k+N})`.
    pub fn value_noisy(&self, z: &State, w: &[DVector<f64>], v: &[DVector<f64>]) -> Result<f64> {
        self.check_disturbances(w, v)?;
        Ok(self.evaluate(z, Some((w, v)), false).0)
    }

    pub fn gradient_noisy(
        &self,
        z: &State,
        w: &[DVector<f64>],
        v: &[DVector<f64>],
    ) -> Result<State> {
        self.check_disturbances(w, v)?;
        Ok(self.evaluate(z, Some((w, v)), true).1.expect("gradient requested"))
    }

    /// Borrow this cost together with a disturbance record as an [`Objective`].
    pub fn with_disturbances<'b>(
        &'b self,
        w: &'b [DVector<f64>],
        v: &'b [DVector<f64>],
    ) -> Result<DisturbedCost<'b, 'a>> {
        self.check_disturbances(w, v)?;
        Ok(DisturbedCost { cost: self, w, v })
    }
}

impl Objective for HorizonCost<'_> {
    fn dim(&self) -> usize {
        self.model.dim_state()
    }
    fn value(&self, z: &State) -> f64 {
        HorizonCost::value(self, z)
    }
    fn gradient(&self, z: &State) -> State {
        HorizonCost::gradient(self, z)
    }
    fn smoothness(&self) -> f64 {
        self.smoothness.l
    }
}

/// `Ḡ_k(., w, v)` for a fixed disturbance record.
#[derive(Debug, Clone)]
pub struct DisturbedCost<'b, 'a> {
    cost: &'b HorizonCost<'a>,
    w: &'b [DVector<f64>],
    v: &'b [DVector<f64>],
}

impl Objective for DisturbedCost<'_, '_> {
    fn dim(&self) -> usize {
        self.cost.model.dim_state()
    }
    fn value(&self, z: &State) -> f64 {
        self.cost.evaluate(z, Some((self.w, self.v)), false).0
    }
    fn gradient(&self, z: &State) -> State {
        self.cost
            .evaluate(z, Some((self.w, self.v)), true)
            .1
            .expect("gradient requested")
    }
    fn smoothness(&self) -> f64 {
        self.cost.smoothness.l
    }
}

/// Sampling region and effort for [`estimate_smoothness`].
#[derive(Debug, Clone)]
pub struct SmoothnessProbe {
    pub lo: State,
    pub hi: State,
    pub samples: usize,
    pub seed: u64,
    /// Half-width of the uniform disturbances used for the `l_w` ratio.
    pub disturbance_scale: f64,
}

/// Sampled lower bounds on `(l, L, l_w)`; the true constants may be larger.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmoothnessEstimate {
    pub l_hat: f64,
    pub drift_hat: f64,
    pub l_w_hat: f64,
}

/// Largest sampled ratios for the three smoothness constants.
///
/// `next` is `G_{k+1}`; without it the drift estimate is reported as 0.
pub fn estimate_smoothness(
    cost: &HorizonCost<'_>,
    next: Option<&HorizonCost<'_>>,
    probe: &SmoothnessProbe,
) -> Result<SmoothnessEstimate> {
    if probe.samples < 2 {
        return Err(Error::Config("estimate_smoothness needs at least 2 samples".into()));
    }
    let model = cost.model;
    model.check_state(&probe.lo)?;
    model.check_state(&probe.hi)?;
    let mut rng = stream(probe.seed, &[0x5300]);
    let span = (&probe.hi - &probe.lo).norm().max(1e-12);
    let mut est = SmoothnessEstimate::default();
    let n_window = cost.window_len();
    for i in 0..probe.samples {
        let x = sample_box(&mut rng, &probe.lo, &probe.hi);
        // Alternate far pairs with near pairs so local curvature peaks are seen.
        let y = if i % 2 == 0 {
            sample_box(&mut rng, &probe.lo, &probe.hi)
        } else {
            let dir = DVector::from_fn(x.len(), |_, _| rng.gen_range(-1.0..1.0));
            &x + dir * (1e-4 * span)
        };
        let gx = cost.gradient(&x);
        let dxy = (&x - &y).norm();
        if dxy > 0.0 {
            est.l_hat = est.l_hat.max((&gx - cost.gradient(&y)).norm() / dxy);
        }
        if let Some(next) = next {
            let g2 = gx.norm_squared();
            if g2 > 1e-14 {
                let drift = (next.value(&model.f0(&x)) - cost.value(&x)).abs();
                est.drift_hat = est.drift_hat.max(drift / g2);
            }
        }
        let scale = probe.disturbance_scale;
        let w: Vec<_> = (0..n_window)
            .map(|_| DVector::from_fn(model.dim_disturbance(), |_, _| rng.gen_range(-1.0..=1.0) * scale))
            .collect();
        let v: Vec<_> = (0..n_window)
            .map(|_| DVector::from_fn(model.dim_output(), |_, _| rng.gen_range(-1.0..=1.0) * scale))
            .collect();
        let dist = w
            .iter()
            .chain(v.iter())
            .map(|d| d.norm_squared())
            .sum::<f64>()
            .sqrt();
        if dist > 0.0 {
            let gbar = cost.gradient_noisy(&x, &w, &v)?;
            est.l_w_hat = est.l_w_hat.max((&gx - gbar).norm() / dist);
        }
    }
    Ok(est)
}
