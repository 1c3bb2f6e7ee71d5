//! Privacy budgets of the entropy-regularized estimators.
//!
//! Each calculator evaluates a sufficient condition of the form
//! `LHS(s) <= RHS(eps, delta, constants)` for a regularization schedule
//! `s_1..s_T`; smaller `s_k` means stronger regularization and more privacy.
//! Two measurement sequences are `delta`-adjacent when the Euclidean norm of
//! their stacked difference is at most `delta`.
//!
//! The horizon-level KL bound assumes the per-step marginals are coupled
//! independently; the sequential filter does not literally satisfy this.

use nalgebra::DVector;

use crate::cost::{HorizonCost, Smoothness, StageCost};
use crate::error::{Error, Result};
use crate::model::{State, SystemModel};
use crate::oracle::{grid_filter_step, max_divergence, GridDensity};

/// Assumption reported with every horizon-level KL verdict.
pub const INDEPENDENT_COUPLING_NOTE: &str =
    "horizon KL bound assumes independent coupling of the per-step marginals";

/// Class-K modulus `q(delta)` of the W2 pointwise bound.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum QModulus {
    #[default]
    Identity,
    Linear(f64),
}

impl QModulus {
    pub fn eval(&self, delta: f64) -> f64 {
        match self {
            QModulus::Identity => delta,
            QModulus::Linear(g) => g * delta,
        }
    }
}

/// System and cost constants entering the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyConstants {
    /// Gradient-Lipschitz constant of the horizon cost.
    pub l: f64,
    pub eta: f64,
    pub c_f1: f64,
    /// Diameter of the initial support.
    pub diam_k0: f64,
    /// `alpha_k` for `k = 0..=T`; empty means all zero.
    pub alpha: Vec<f64>,
    pub q: QModulus,
}

impl PrivacyConstants {
    pub fn new(l: f64, eta: f64, c_f1: f64, diam_k0: f64) -> Self {
        Self {
            l,
            eta,
            c_f1,
            diam_k0,
            alpha: vec![],
            q: QModulus::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.eta > 0.0 && self.c_f1 > 0.0 && self.diam_k0 >= 0.0) {
            return Err(Error::Config(
                "privacy constants need l, eta, c_f1 > 0 and diam >= 0".into(),
            ));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("alpha_k must be >= 0".into()));
        }
        if let QModulus::Linear(g) = self.q {
            if !(g >= 0.0) {
                return Err(Error::Config("q modulus gain must be >= 0".into()));
            }
        }
        Ok(())
    }

    fn alpha_at(&self, k: usize) -> Result<f64> {
        if self.alpha.is_empty() {
            return Ok(0.0);
        }
        self.alpha
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("alpha has no entry for k = {k}")))
    }

    /// `2 eta max_{k=0..T} (alpha_k + l c_f1^k delta diam)`.
    fn kl_scale(&self, delta: f64, horizon: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..=horizon {
            let term = self.alpha_at(k)? + self.l * self.c_f1.powi(k as i32) * delta * self.diam_k0;
            worst = worst.max(term);
        }
        Ok(2.0 * self.eta * worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySchedule {
    pub epsilon: f64,
    pub delta: f64,
    /// `s_1..s_T`.
    pub s: Vec<f64>,
    pub constants: PrivacyConstants,
}

impl PrivacySchedule {
    pub fn constant(epsilon: f64, delta: f64, s: f64, horizon: usize, constants: PrivacyConstants) -> Self {
        Self {
            epsilon,
            delta,
            s: vec![s; horizon],
            constants,
        }
    }

    pub fn horizon(&self) -> usize {
        self.s.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.delta >= 0.0) {
            return Err(Error::Config("privacy schedule needs eps > 0 and delta >= 0".into()));
        }
        if self.s.is_empty() || self.s.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config("schedule entries must lie in (0, 1] and T >= 1".into()));
        }
        self.constants.validate()
    }
}

/// Evaluated sufficient condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; infinite when the condition holds trivially.
    pub slack: f64,
    pub feasible: bool,
    /// The condition holds for every schedule (e.g. `delta = 0`).
    pub trivial: bool,
    pub assumptions: Vec<&'static str>,
}

impl Verdict {
    fn compare(lhs: f64, rhs: f64, assumptions: Vec<&'static str>) -> Self {
        Self {
            lhs,
            rhs,
            slack: rhs - lhs,
            feasible: lhs <= rhs,
            trivial: false,
            assumptions,
        }
    }

    fn trivially_feasible(lhs: f64, assumptions: Vec<&'static str>) -> Self {
        Self {
            lhs,
            rhs: f64::INFINITY,
            slack: f64::INFINITY,
            feasible: true,
            trivial: true,
            assumptions,
        }
    }
}

/// Largest `s_T` allowed by the W2 pointwise sensitivity bound, clamped to `(0, 1]`.
pub fn w2_pointwise_s_bound(epsilon_t: f64, delta: f64, horizon: usize, constants: &PrivacyConstants) -> Result<f64> {
    constants.validate()?;
    if !(epsilon_t > 0.0 && delta >= 0.0) {
        return Err(Error::Config("need eps_T > 0 and delta >= 0".into()));
    }
    let reach = constants.c_f1.powi(horizon as i32) * constants.diam_k0;
    let denom = epsilon_t
        + reach * (constants.eta * constants.l * delta + reach * constants.q.eval(delta));
    Ok((epsilon_t / denom).min(1.0))
}

/// `sum_k s_k / (1 - s_k) c_f1^k <= eps / (l delta diam)`.
pub fn w2_horizon_feasible(schedule: &PrivacySchedule) -> Result<Verdict> {
    schedule.validate()?;
    let c = &schedule.constants;
    let lhs: f64 = schedule
        .s
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let k = (i + 1) as i32;
            if s >= 1.0 {
                f64::INFINITY
            } else {
                s / (1.0 - s) * c.c_f1.powi(k)
            }
        })
        .sum();
    let scale = c.l * schedule.delta * c.diam_k0;
    if scale == 0.0 {
        return Ok(Verdict::trivially_feasible(lhs, vec![]));
    }
    Ok(Verdict::compare(lhs, schedule.epsilon / scale, vec![]))
}

/// `sum_{k=1..T} prod_{i=k..T} s_i`.
fn nested_products(s: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut prod = 1.0;
    for &x in s.iter().rev() {
        prod *= x;
        sum += prod;
    }
    sum
}

fn kl_verdict(schedule: &PrivacySchedule, lhs: f64, assumptions: Vec<&'static str>) -> Result<Verdict> {
    let scale = schedule.constants.kl_scale(schedule.delta, schedule.horizon())?;
    if scale == 0.0 {
        return Ok(Verdict::trivially_feasible(lhs, assumptions));
    }
    Ok(Verdict::compare(lhs, schedule.epsilon / scale, assumptions))
}

/// `sum_{k=1..T} prod_{i=k..T} s_i <= eps_T / (2 eta max_k(alpha_k + l c_f1^k delta diam))`.
pub fn kl_pointwise_feasible(schedule: &PrivacySchedule) -> Result<Verdict> {
    schedule.validate()?;
    kl_verdict(schedule, nested_products(&schedule.s), vec![])
}

/// `sum_{k=1..T} sum_{m=1..k} prod_{i=m..k} s_i <= eps / (2 eta max_k(...))`.
pub fn kl_horizon_feasible(schedule: &PrivacySchedule) -> Result<Verdict> {
    schedule.validate()?;
    let lhs = (1..=schedule.horizon()).map(|k| nested_products(&schedule.s[..k])).sum();
    kl_verdict(schedule, lhs, vec![INDEPENDENT_COUPLING_NOTE])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    W2Pointwise,
    W2Horizon,
    KlPointwise,
    KlHorizon,
}

impl BoundKind {
    pub const ALL: [BoundKind; 4] = [
        BoundKind::W2Pointwise,
        BoundKind::W2Horizon,
        BoundKind::KlPointwise,
        BoundKind::KlHorizon,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::W2Pointwise => "w2_pointwise",
            BoundKind::W2Horizon => "w2_horizon",
            BoundKind::KlPointwise => "kl_pointwise",
            BoundKind::KlHorizon => "kl_horizon",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown privacy bound {name:?}")))
    }
}

/// Evaluate the selected condition. The W2 pointwise bound constrains only `s_T`.
pub fn feasibility(kind: BoundKind, schedule: &PrivacySchedule) -> Result<Verdict> {
    match kind {
        BoundKind::W2Pointwise => {
            schedule.validate()?;
            let bound = w2_pointwise_s_bound(schedule.epsilon, schedule.delta, schedule.horizon(), &schedule.constants)?;
            let s_t = *schedule.s.last().expect("validated nonempty");
            Ok(Verdict::compare(s_t, bound, vec!["q(delta) modulus as configured"]))
        }
        BoundKind::W2Horizon => w2_horizon_feasible(schedule),
        BoundKind::KlPointwise => kl_pointwise_feasible(schedule),
        BoundKind::KlHorizon => kl_horizon_feasible(schedule),
    }
}

/// Largest constant `s` in `(0, 1]` satisfying the selected bound (bisection to 1e-10).
pub fn max_s_schedule(
    kind: BoundKind,
    epsilon: f64,
    delta: f64,
    horizon: usize,
    constants: &PrivacyConstants,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if kind == BoundKind::W2Pointwise {
        return w2_pointwise_s_bound(epsilon, delta, horizon, constants);
    }
    let feasible = |s: f64| -> Result<bool> {
        let schedule = PrivacySchedule::constant(epsilon, delta, s, horizon, constants.clone());
        Ok(feasibility(kind, &schedule)?.feasible)
    };
    if feasible(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Smallest `eps` for which the schedule satisfies the selected bound.
pub fn implied_epsilon(kind: BoundKind, schedule: &PrivacySchedule) -> Result<f64> {
    schedule.validate()?;
    let c = &schedule.constants;
    let delta = schedule.delta;
    match kind {
        BoundKind::W2Pointwise => {
            // s_T <= e / (e + D)  <=>  e >= s_T D / (1 - s_T).
            let reach = c.c_f1.powi(schedule.horizon() as i32) * c.diam_k0;
            let d = reach * (c.eta * c.l * delta + reach * c.q.eval(delta));
            let s_t = *schedule.s.last().expect("validated nonempty");
            Ok(if d == 0.0 {
                0.0
            } else if s_t >= 1.0 {
                f64::INFINITY
            } else {
                s_t * d / (1.0 - s_t)
            })
        }
        BoundKind::W2Horizon => {
            let v = w2_horizon_feasible(schedule)?;
            let scale = c.l * delta * c.diam_k0;
            Ok(if scale == 0.0 { 0.0 } else { v.lhs * scale })
        }
        BoundKind::KlPointwise | BoundKind::KlHorizon => {
            let v = feasibility(kind, schedule)?;
            Ok(v.lhs * c.kl_scale(delta, schedule.horizon())?)
        }
    }
}

/// `alpha_k ≈ min |G_k - G̃_k|` over `f0^k` of the given initial-support samples.
pub fn estimate_alpha(
    model: &SystemModel,
    cost: &HorizonCost<'_>,
    adjacent: &HorizonCost<'_>,
    support_k0: &[State],
    k: usize,
) -> Result<f64> {
    if support_k0.is_empty() {
        return Err(Error::Config("alpha estimate needs support samples".into()));
    }
    let mut best = f64::INFINITY;
    for x in support_k0 {
        model.check_state(x)?;
        let xi = model.iterate_f0(x, k);
        best = best.min((cost.value(&xi) - adjacent.value(&xi)).abs());
    }
    Ok(best)
}

/// Outcome of an exact grid privacy check.
#[derive(Debug, Clone, PartialEq)]
pub struct DpVerification {
    /// `D_max(rho_k, rhõ_k)` for `k = 1..T`.
    pub d_max: Vec<f64>,
    /// `eps_T` implied by the KL pointwise bound for the schedule.
    pub epsilon_bound: f64,
    /// Norm of the stacked measurement difference.
    pub delta_observed: f64,
}

/// Run the tempered grid recursion on two adjacent measurement sequences and
/// compare the final max-divergence with the KL pointwise bound.
pub fn dp_verify_on_grid(
    model: &SystemModel,
    stage: &StageCost,
    measurements: &[DVector<f64>],
    adjacent: &[DVector<f64>],
    schedule: &PrivacySchedule,
    window_len: usize,
    initial: &GridDensity,
) -> Result<DpVerification> {
    schedule.validate()?;
    if measurements.len() != adjacent.len() {
        return Err(Error::Config("adjacent measurement sequences differ in length".into()));
    }
    let delta_observed = measurements
        .iter()
        .zip(adjacent)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt();
    if delta_observed > schedule.delta * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "sequences are {delta_observed} apart, more than delta = {}",
            schedule.delta
        )));
    }
    let eta = schedule.constants.eta;
    let smooth = Smoothness::new(schedule.constants.l, 0.0, 0.0)?;
    let run = |ys: &[DVector<f64>]| -> Result<Vec<GridDensity>> {
        let mut out = Vec::with_capacity(schedule.horizon());
        let mut rho = initial.clone();
        for (i, &s) in schedule.s.iter().enumerate() {
            let cost = HorizonCost::from_measurements(model, stage, ys, i + 1, window_len, smooth)?;
            rho = grid_filter_step(&rho, model, &cost, eta, s)?;
            out.push(rho.clone());
        }
        Ok(out)
    };
    let (a, b) = rayon::join(|| run(measurements), || run(adjacent));
    let (a, b) = (a?, b?);
    let d_max = a
        .iter()
        .zip(&b)
        .map(|(p, q)| max_divergence(p, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(DpVerification {
        d_max,
        epsilon_bound: implied_epsilon(BoundKind::KlPointwise, schedule)?,
        delta_observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry::scalar_linear;
    use crate::oracle::GridAxis;

    fn constants(l: f64, eta: f64, diam: f64) -> PrivacyConstants {
        PrivacyConstants::new(l, eta, 1.0, diam)
    }

    #[test]
    fn w2_pointwise_examples() {
        let c = constants(2.0, 0.5, 1.0);
        assert!((w2_pointwise_s_bound(1.0, 0.1, 7, &c).unwrap() - 1.0 / 1.2).abs() < 1e-12);
        assert_eq!(w2_pointwise_s_bound(1.0, 0.0, 7, &c).unwrap(), 1.0);
        assert!(w2_pointwise_s_bound(1e-9, 0.1, 7, &c).unwrap() < 1e-8);
        assert!(w2_pointwise_s_bound(0.0, 0.1, 7, &c).is_err());
    }

    #[test]
    fn w2_horizon_examples() {
        let c = constants(2.0, 0.5, 1.0);
        let at = |s| w2_horizon_feasible(&PrivacySchedule::constant(1.0, 0.1, s, 10, c.clone())).unwrap();
        assert!(at(0.33).feasible);
        assert!(!at(0.34).feasible);
        assert!((at(1.0 / 3.0).slack).abs() < 1e-12);
        assert!(!at(1.0).feasible && at(1.0).lhs.is_infinite());
        let free = w2_horizon_feasible(&PrivacySchedule::constant(1.0, 0.0, 1.0, 10, c.clone())).unwrap();
        assert!(free.feasible && free.trivial && free.slack.is_infinite());
        let s = max_s_schedule(BoundKind::W2Horizon, 1.0, 0.1, 10, &c).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-9);
    }

    fn kl_constants() -> PrivacyConstants {
        constants(2.0, 0.1, 1.0)
    }

    #[test]
    fn kl_pointwise_examples() {
        let c = kl_constants();
        let v = kl_pointwise_feasible(&PrivacySchedule::constant(0.04, 0.1, 0.5, 3, c.clone())).unwrap();
        assert!((v.lhs - (0.5 + 0.25 + 0.125)).abs() < 1e-15);
        assert!((v.rhs - 1.0).abs() < 1e-12);
        let s = max_s_schedule(BoundKind::KlPointwise, 0.04, 0.1, 3, &c).unwrap();
        assert!((s + s * s + s * s * s - 1.0).abs() < 1e-8);
        assert!((s - 0.543_689_012_692_076).abs() < 1e-6);
        let tiny = kl_pointwise_feasible(&PrivacySchedule::constant(0.04, 0.1, 1e-9, 3, c.clone())).unwrap();
        assert!(tiny.feasible);
        let free = kl_pointwise_feasible(&PrivacySchedule::constant(0.04, 0.0, 1.0, 3, c)).unwrap();
        assert!(free.trivial && free.feasible);
    }

    #[test]
    fn kl_horizon_examples() {
        let c = kl_constants();
        let v = kl_horizon_feasible(&PrivacySchedule::constant(0.04, 0.1, 0.3, 2, c.clone())).unwrap();
        assert!((v.lhs - (2.0 * 0.3 + 0.09)).abs() < 1e-15);
        assert_eq!(v.assumptions, vec![INDEPENDENT_COUPLING_NOTE]);
        let s = max_s_schedule(BoundKind::KlHorizon, 0.04, 0.1, 2, &c).unwrap();
        assert!((s - (2f64.sqrt() - 1.0)).abs() < 1e-9);
        let one = PrivacySchedule::constant(0.04, 0.1, 0.7, 1, c);
        assert_eq!(kl_horizon_feasible(&one).unwrap().lhs, kl_pointwise_feasible(&one).unwrap().lhs);
    }

    #[test]
    fn delta_zero_gives_unit_s() {
        let c = kl_constants();
        for kind in BoundKind::ALL {
            assert_eq!(max_s_schedule(kind, 0.5, 0.0, 5, &c).unwrap(), 1.0, "{kind:?}");
        }
    }

    #[test]
    fn max_s_round_trips_with_nonnegative_slack() {
        let mut c = PrivacyConstants::new(3.0, 0.2, 1.1, 2.0);
        c.q = QModulus::Linear(0.5);
        for kind in BoundKind::ALL {
            for eps in [0.05, 0.5, 5.0] {
                let s = max_s_schedule(kind, eps, 0.2, 6, &c).unwrap();
                let v = feasibility(kind, &PrivacySchedule::constant(eps, 0.2, s, 6, c.clone())).unwrap();
                assert!(v.slack >= -1e-9, "{kind:?} eps={eps}: {v:?}");
            }
        }
    }

    #[test]
    fn implied_epsilon_inverts_feasibility() {
        let c = PrivacyConstants::new(3.0, 0.2, 1.1, 2.0);
        for kind in BoundKind::ALL {
            let schedule = PrivacySchedule::constant(1.0, 0.2, 0.4, 6, c.clone());
            let eps = implied_epsilon(kind, &schedule).unwrap();
            let tight = PrivacySchedule { epsilon: eps * (1.0 + 1e-9), ..schedule.clone() };
            let loose = PrivacySchedule { epsilon: eps * (1.0 - 1e-6), ..schedule };
            assert!(feasibility(kind, &tight).unwrap().feasible, "{kind:?}");
            assert!(!feasibility(kind, &loose).unwrap().feasible, "{kind:?}");
        }
    }

    #[test]
    fn monotonicity_grid() {
        let values = [0.1, 0.3, 1.0, 3.0, 10.0];
        for kind in BoundKind::ALL {
            for &eps in &values {
                for &delta in &values {
                    for &diam in &values {
                        let base = PrivacyConstants::new(2.0, 0.1, 1.05, diam);
                        let s = max_s_schedule(kind, eps, delta * 0.1, 5, &base).unwrap();
                        let more_eps = max_s_schedule(kind, eps * 2.0, delta * 0.1, 5, &base).unwrap();
                        let more_delta = max_s_schedule(kind, eps, delta * 0.2, 5, &base).unwrap();
                        let bigger = PrivacyConstants::new(2.0, 0.1, 1.05, diam * 2.0);
                        let more_diam = max_s_schedule(kind, eps, delta * 0.1, 5, &bigger).unwrap();
                        let steeper = PrivacyConstants::new(4.0, 0.1, 1.05, diam);
                        let more_l = max_s_schedule(kind, eps, delta * 0.1, 5, &steeper).unwrap();
                        let tol = 2e-10;
                        assert!(more_eps >= s - tol, "{kind:?}");
                        assert!(more_delta <= s + tol, "{kind:?}");
                        assert!(more_diam <= s + tol, "{kind:?}");
                        assert!(more_l <= s + tol, "{kind:?}");
                        if kind != BoundKind::W2Horizon {
                            let slower = PrivacyConstants::new(2.0, 0.2, 1.05, diam);
                            let more_eta = max_s_schedule(kind, eps, delta * 0.1, 5, &slower).unwrap();
                            assert!(more_eta <= s + tol, "{kind:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_sequence_enters_kl_bound() {
        let mut c = kl_constants();
        c.alpha = vec![0.0, 0.0, 0.0, 0.5];
        let v = kl_pointwise_feasible(&PrivacySchedule::constant(0.04, 0.1, 0.5, 3, c.clone())).unwrap();
        assert!((v.rhs - 0.04 / (0.2 * 0.7)).abs() < 1e-12);
        c.alpha.truncate(2);
        assert!(kl_pointwise_feasible(&PrivacySchedule::constant(0.04, 0.1, 0.5, 3, c)).is_err());
    }

    #[test]
    fn alpha_estimate_is_min_gap() {
        let model = scalar_linear(1.0);
        let stage = StageCost::quadratic();
        let ys = vec![DVector::from_element(1, 0.0); 3];
        let ys2 = vec![DVector::from_element(1, 0.2); 3];
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let g = HorizonCost::from_measurements(&model, &stage, &ys, 1, 1, smooth).unwrap();
        let h = HorizonCost::from_measurements(&model, &stage, &ys2, 1, 1, smooth).unwrap();
        // (x)^2 - (x - 0.2)^2 = 0.4 x - 0.04 vanishes at x = 0.1.
        let support: Vec<State> = (0..=20).map(|i| DVector::from_element(1, -1.0 + 0.1 * i as f64)).collect();
        assert!(estimate_alpha(&model, &g, &h, &support, 0).unwrap() < 1e-12);
        let far: Vec<State> = vec![DVector::from_element(1, 1.0)];
        assert!((estimate_alpha(&model, &g, &h, &far, 0).unwrap() - 0.36).abs() < 1e-12);
    }

    #[test]
    fn identical_sequences_have_zero_divergence() {
        let model = scalar_linear(0.95);
        let ys: Vec<_> = (0..10).map(|k| DVector::from_element(1, 0.5 * 0.95f64.powi(k))).collect();
        let axes = vec![GridAxis::new(-2.0, 2.0, 80).unwrap()];
        let init = GridDensity::uniform_box(axes, &DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0)).unwrap();
        let schedule = PrivacySchedule::constant(1.0, 0.1, 0.5, 5, PrivacyConstants::new(4.0, 0.5, 0.95, 2.0));
        let out = dp_verify_on_grid(&model, &StageCost::quadratic(), &ys, &ys, &schedule, 2, &init).unwrap();
        assert!(out.d_max.iter().all(|d| *d == 0.0));
        let mut far = ys.clone();
        far[3][0] += 1.0;
        assert!(dp_verify_on_grid(&model, &StageCost::quadratic(), &ys, &far, &schedule, 2, &init).is_err());
    }
}
