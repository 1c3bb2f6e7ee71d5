//! KL-MHE as a particle filter.
//!
//! The density recursion `rho_k ∝ (f0# rho_{k-1}) exp(-eta G_k)` is realized
//! by propagating particles through `f0` and multiplying their weights by
//! `exp(-eta G_k)`, in log space. Systematic resampling runs when the
//! effective sample size drops below a fraction of the particle count.
//!
//! The tempered variant targets `(f0# rho_{k-1})^s exp(-eta s G_k)`. Raising a
//! Gaussian kernel mixture to the power `s` is approximated by inflating the
//! kernel bandwidth from `h` to `h / sqrt(s)`, i.e. jittering every particle
//! with standard deviation `h sqrt(1/s - 1)`, and raising the mixture weights
//! to the power `s`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cost::{HorizonCost, Smoothness, StageCost};
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::model::{State, SystemModel};
use crate::rng::{derive_seed, stream};
use crate::w2::DpSchedule;

/// Log-weights below this everywhere mean every weight underflows.
const LOG_WEIGHT_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFilterConfig {
    pub eta: f64,
    pub window_len: usize,
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold * n`.
    pub resample_threshold: f64,
    /// Kernel bandwidth for tempering; `None` uses Silverman's rule per coordinate.
    pub jitter_bandwidth: Option<f64>,
    /// Standard deviation of Gaussian jitter applied after each resampling (0 disables).
    pub roughening: f64,
    pub dp: Option<DpSchedule>,
}

impl ParticleFilterConfig {
    pub fn new(eta: f64, window_len: usize, n_particles: usize) -> Self {
        Self {
            eta,
            window_len,
            n_particles,
            resample_threshold: 0.5,
            jitter_bandwidth: None,
            roughening: 0.0,
            dp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || self.window_len == 0 || self.n_particles == 0 {
            return Err(Error::Config("particle filter needs eta > 0, N >= 1, n >= 1".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Config("resample threshold must lie in (0, 1]".into()));
        }
        if self.jitter_bandwidth.is_some_and(|h| !(h >= 0.0)) || !(self.roughening >= 0.0) {
            return Err(Error::Config("jitter bandwidth and roughening must be >= 0".into()));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// `n` ancestor indices by systematic resampling with one uniform offset.
pub fn systematic_resample(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || weights.is_empty() {
        return Err(Error::Config("resampling needs n >= 1 and nonempty weights".into()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("resampling needs normalized weights (sum {sum})")));
    }
    let last_positive = weights.iter().rposition(|w| *w > 0.0).expect("sum is 1");
    let u: f64 = stream(seed, &[0x5e5a]).gen();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut cumulative = weights[0];
    for j in 0..n {
        let position = (j as f64 + u) / n as f64;
        while position >= cumulative && i < last_positive {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    Ok(out)
}

/// Silverman's rule of thumb per coordinate, from the weighted spread.
pub fn silverman_bandwidth(ensemble: &Ensemble) -> DVector<f64> {
    let d = ensemble.dim() as f64;
    let n = ensemble.ess();
    let mean = ensemble.mean();
    let var = ensemble
        .samples()
        .iter()
        .zip(ensemble.weights())
        .fold(DVector::zeros(ensemble.dim()), |acc, (z, w)| {
            acc + (z - &mean).map(|e| e * e) * *w
        });
    let factor = (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0));
    var.map(|v| v.sqrt() * factor)
}

/// Result of one filter step.
#[derive(Debug, Clone)]
pub struct KlStep {
    pub ensemble: Ensemble,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One KL-MHE step at time `k = cost.time_index()`. All randomness comes from `seed`.
pub fn kl_step(
    ensemble: &Ensemble,
    cost: &HorizonCost<'_>,
    config: &ParticleFilterConfig,
    seed: u64,
) -> Result<KlStep> {
    let model = cost.model();
    check_dim("ensemble", model.dim_state(), ensemble.dim())?;
    let k = cost.time_index();
    let s = match &config.dp {
        Some(dp) => dp.at(k)?,
        None => 1.0,
    };

    let propagated: Vec<State> = ensemble.samples().par_iter().map(|z| model.f0(z)).collect();
    let particles = if s < 1.0 {
        let predicted = Ensemble::new(propagated.clone(), ensemble.weights().to_vec(), k, vec![])?;
        let h = match config.jitter_bandwidth {
            Some(h) => DVector::from_element(ensemble.dim(), h),
            None => silverman_bandwidth(&predicted),
        };
        let std = h * (1.0 / s - 1.0).sqrt();
        propagated
            .into_par_iter()
            .enumerate()
            .map(|(i, z)| {
                let mut rng = stream(seed, &[0x7e3, i as u64]);
                z + DVector::from_fn(std.len(), |j, _| std[j] * gaussian(&mut rng))
            })
            .collect()
    } else {
        propagated
    };

    let costs: Vec<f64> = particles.par_iter().map(|z| cost.value(z)).collect();
    let log_w: Vec<f64> = ensemble
        .weights()
        .iter()
        .zip(&costs)
        .map(|(w, g)| s * w.ln() - config.eta * s * g)
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max >= LOG_WEIGHT_FLOOR) {
        let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Degeneracy { min_cost });
    }
    let unnormalized: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    let weights: Vec<f64> = unnormalized.iter().map(|w| w / total).collect();
    let mut lineage = ensemble.seed_lineage().to_vec();
    lineage.push(k as u64);
    let weighted = Ensemble::new(particles, weights, k, lineage.clone())?;
    let ess = weighted.ess();
    let n = weighted.len();
    if ess >= config.resample_threshold * n as f64 {
        return Ok(KlStep {
            ensemble: weighted,
            ess,
            resampled: false,
        });
    }

    let ancestors = systematic_resample(weighted.weights(), n, seed)?;
    let rough = config.roughening;
    let samples: Vec<State> = ancestors
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let z = weighted.samples()[a].clone();
            if rough > 0.0 {
                let mut rng = stream(seed, &[0x7a9, i as u64]);
                z.map(|x| x + rough * gaussian(&mut rng))
            } else {
                z
            }
        })
        .collect();
    Ok(KlStep {
        ensemble: Ensemble::uniform(samples, k, lineage)?,
        ess,
        resampled: true,
    })
}

#[derive(Debug, Clone)]
pub struct KlRun {
    /// `rho_0..rho_T`.
    pub ensembles: Vec<Ensemble>,
    /// ESS and resampling flag for `k = 1..T`.
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
}

impl KlRun {
    pub fn means(&self) -> Vec<State> {
        self.ensembles.iter().map(Ensemble::mean).collect()
    }
}

/// Run the particle filter for `k = 1..=steps` on `measurements = y_0, y_1, ...`.
pub fn run_kl(
    model: &SystemModel,
    stage: &StageCost,
    measurements: &[DVector<f64>],
    prior: Ensemble,
    config: &ParticleFilterConfig,
    steps: usize,
    seed: u64,
) -> Result<KlRun> {
    config.validate()?;
    if prior.len() != config.n_particles {
        return Err(Error::Config(format!(
            "prior has {} particles, config expects {}",
            prior.len(),
            config.n_particles
        )));
    }
    if measurements.len() < steps + config.window_len + 1 {
        return Err(Error::Config(format!(
            "{steps} steps with N = {} need {} measurements, have {}",
            config.window_len,
            steps + config.window_len + 1,
            measurements.len()
        )));
    }
    // The particle filter never uses the smoothness constant.
    let unused = Smoothness::new(1.0, 0.0, 0.0)?;
    let mut run = KlRun {
        ensembles: vec![prior],
        ess: Vec::with_capacity(steps),
        resampled: Vec::with_capacity(steps),
    };
    for k in 1..=steps {
        let cost = HorizonCost::from_measurements(model, stage, measurements, k, config.window_len, unused)?;
        let step = kl_step(run.ensembles.last().expect("nonempty"), &cost, config, derive_seed(seed, &[k as u64]))?;
        run.ess.push(step.ess);
        run.resampled.push(step.resampled);
        run.ensembles.push(step.ensemble);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry::{benchmark2d, scalar_linear};
    use crate::model::{simulate, NoiseSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> State {
        DVector::from_row_slice(xs)
    }

    fn counts(idx: &[usize], len: usize) -> Vec<usize> {
        let mut c = vec![0; len];
        for &i in idx {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn resample_examples() {
        assert_eq!(systematic_resample(&[1.0, 0.0, 0.0], 3, 1).unwrap(), vec![0, 0, 0]);
        for seed in 0..20 {
            let idx = systematic_resample(&[0.5, 0.25, 0.25], 4, seed).unwrap();
            assert_eq!(counts(&idx, 3), vec![2, 1, 1]);
            let idx = systematic_resample(&[0.2; 5], 5, seed).unwrap();
            assert!(counts(&idx, 5).iter().all(|c| *c <= 2));
            assert_eq!(idx.len(), 5);
        }
        assert!(systematic_resample(&[0.5, 0.6], 2, 0).is_err());
        assert!(systematic_resample(&[0.5, 0.5], 0, 0).is_err());
        assert_eq!(systematic_resample(&[0.0, 0.0, 1.0], 2, 3).unwrap(), vec![2, 2]);
    }

    proptest! {
        #[test]
        fn resample_counts_within_one_of_expectation(
            raw in proptest::collection::vec(0.0f64..1.0, 1..12),
            n in 1usize..50,
            seed in 0u64..1000,
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let idx = systematic_resample(&w, n, seed).unwrap();
            prop_assert_eq!(idx.len(), n);
            for (i, c) in counts(&idx, w.len()).iter().enumerate() {
                prop_assert!((*c as f64 - n as f64 * w[i]).abs() < 1.0 + 1e-9);
            }
        }
    }

    /// A 1D identity model whose window cost is `(z - c_i)^2`-like via a user stage.
    fn user_cost_setup() -> (SystemModel, StageCost, Vec<DVector<f64>>) {
        let model = scalar_linear(1.0);
        let stage = StageCost::User {
            value: Arc::new(|_, p: &DVector<f64>| if p[0] > 0.5 { 2f64.ln() } else { 0.0 }),
            gradient: Arc::new(|_, p: &DVector<f64>| DVector::zeros(p.len())),
        };
        (model, stage, vec![v(&[0.0]); 4])
    }

    #[test]
    fn two_particle_weights() {
        let (model, stage, ys) = user_cost_setup();
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let cost = HorizonCost::from_measurements(&model, &stage, &ys, 1, 1, smooth).unwrap();
        let prior = Ensemble::uniform(vec![v(&[0.0]), v(&[1.0])], 0, vec![]).unwrap();
        let mut cfg = ParticleFilterConfig::new(1.0, 1, 2);
        cfg.resample_threshold = 0.1;
        let step = kl_step(&prior, &cost, &cfg, 0).unwrap();
        assert!(!step.resampled);
        let w = step.ensemble.weights();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);

        // s = 1 tempering is the plain update.
        cfg.dp = Some(DpSchedule::constant(1.0, 3, 9));
        let tempered = kl_step(&prior, &cost, &cfg, 0).unwrap();
        assert_eq!(tempered.ensemble, step.ensemble);
    }

    #[test]
    fn constant_cost_leaves_weights() {
        let model = scalar_linear(1.0);
        let stage = StageCost::User {
            value: Arc::new(|_, _| 3.7),
            gradient: Arc::new(|_, p: &DVector<f64>| DVector::zeros(p.len())),
        };
        let ys = vec![v(&[0.0]); 3];
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let cost = HorizonCost::from_measurements(&model, &stage, &ys, 1, 1, smooth).unwrap();
        let prior = Ensemble::new(vec![v(&[0.0]), v(&[1.0]), v(&[2.0])], vec![0.2, 0.3, 0.5], 0, vec![]).unwrap();
        let step = kl_step(&prior, &cost, &ParticleFilterConfig::new(2.0, 1, 3), 0).unwrap();
        for (a, b) in step.ensemble.weights().iter().zip(prior.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cost_offset_invariance() {
        let model = benchmark2d(0.1);
        let traj = simulate(&model, &NoiseSpec::new(0.1, 0.15).unwrap(), &v(&[1.0, 0.0]), 10, 1).unwrap();
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let plain = StageCost::quadratic();
        let shifted = StageCost::User {
            value: Arc::new(|y, p| (p - y).norm_squared() + 0.25),
            gradient: Arc::new(|y, p| (p - y) * 2.0),
        };
        let prior = Ensemble::sample_box_prior(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), 20, 4).unwrap();
        let mut cfg = ParticleFilterConfig::new(0.5, 4, 20);
        cfg.resample_threshold = 1e-9;
        let a = HorizonCost::from_measurements(&model, &plain, &traj.outputs, 1, 4, smooth).unwrap();
        let b = HorizonCost::from_measurements(&model, &shifted, &traj.outputs, 1, 4, smooth).unwrap();
        let wa = kl_step(&prior, &a, &cfg, 0).unwrap();
        let wb = kl_step(&prior, &b, &cfg, 0).unwrap();
        for (x, y) in wa.ensemble.weights().iter().zip(wb.ensemble.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn degeneracy_reports_min_cost() {
        let model = scalar_linear(1.0);
        let stage = StageCost::quadratic();
        let ys = vec![v(&[100.0]); 3];
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let cost = HorizonCost::from_measurements(&model, &stage, &ys, 1, 1, smooth).unwrap();
        let prior = Ensemble::uniform(vec![v(&[0.0]), v(&[1.0])], 0, vec![]).unwrap();
        match kl_step(&prior, &cost, &ParticleFilterConfig::new(1.0, 1, 2), 0) {
            Err(Error::Degeneracy { min_cost }) => assert!((min_cost - 99.0 * 99.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resampling_resets_weights_and_ess_bounds() {
        let model = benchmark2d(0.1);
        let traj = simulate(&model, &NoiseSpec::new(0.1, 0.15).unwrap(), &v(&[1.0, 0.0]), 40, 2).unwrap();
        let prior = Ensemble::sample_box_prior(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), 50, 2).unwrap();
        let mut cfg = ParticleFilterConfig::new(2.0, 5, 50);
        cfg.roughening = 0.05;
        let run = run_kl(&model, &StageCost::quadratic(), &traj.outputs, prior, &cfg, 30, 8).unwrap();
        assert!(run.resampled.iter().any(|r| *r));
        for (k, e) in run.ensembles.iter().enumerate().skip(1) {
            let ess = run.ess[k - 1];
            assert!((1.0 - 1e-9..=50.0 + 1e-9).contains(&ess));
            if run.resampled[k - 1] {
                assert!(e.weights().iter().all(|w| (*w - 0.02).abs() < 1e-15));
            }
            assert_eq!(e.time_index(), k);
        }
    }

    #[test]
    fn noiseless_prior_at_truth_tracks_exactly() {
        let model = benchmark2d(0.1);
        let traj = simulate(&model, &NoiseSpec::zero(), &v(&[1.0, 0.0]), 30, 0).unwrap();
        let prior = Ensemble::uniform(vec![traj.states[0].clone(); 10], 0, vec![]).unwrap();
        let cfg = ParticleFilterConfig::new(5.0, 5, 10);
        let run = run_kl(&model, &StageCost::quadratic(), &traj.outputs, prior, &cfg, 25, 0).unwrap();
        for (k, m) in run.means().iter().enumerate() {
            assert!((m - &traj.states[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn run_is_deterministic_across_thread_counts() {
        let model = benchmark2d(0.1);
        let traj = simulate(&model, &NoiseSpec::new(0.1, 0.15).unwrap(), &v(&[1.0, 0.0]), 30, 6).unwrap();
        let prior = Ensemble::sample_box_prior(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]), 40, 6).unwrap();
        let mut cfg = ParticleFilterConfig::new(2.0, 5, 40);
        cfg.roughening = 0.05;
        cfg.dp = Some(DpSchedule::constant(0.7, 20, 5));
        let go = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_kl(&model, &StageCost::quadratic(), &traj.outputs, prior.clone(), &cfg, 20, 3).unwrap())
        };
        let (a, b) = (go(1), go(4));
        assert_eq!(a.ensembles, b.ensembles);
    }

    #[test]
    fn tempering_jitter_variance() {
        // Identity dynamics, zero cost: only the tempering jitter moves the particles.
        let model = scalar_linear(1.0);
        let stage = StageCost::User {
            value: Arc::new(|_, _| 0.0),
            gradient: Arc::new(|_, p: &DVector<f64>| DVector::zeros(p.len())),
        };
        let ys = vec![v(&[0.0]); 3];
        let smooth = Smoothness::new(1.0, 0.0, 0.0).unwrap();
        let cost = HorizonCost::from_measurements(&model, &stage, &ys, 1, 1, smooth).unwrap();
        let n = 20_000;
        let prior = Ensemble::uniform(vec![v(&[0.0]); n], 0, vec![]).unwrap();
        let mut cfg = ParticleFilterConfig::new(1.0, 1, n);
        cfg.jitter_bandwidth = Some(0.3);
        cfg.dp = Some(DpSchedule::constant(0.5, 1, 0));
        let step = kl_step(&prior, &cost, &cfg, 1).unwrap();
        let var = step.ensemble.samples().iter().map(|z| z[0] * z[0]).sum::<f64>() / n as f64;
        assert!((var / 0.09 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn silverman_scalar() {
        let e = Ensemble::uniform(vec![v(&[-1.0]), v(&[1.0])], 0, vec![]).unwrap();
        let h = silverman_bandwidth(&e);
        assert!((h[0] - (4.0f64 / 6.0).powf(0.2)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = ParticleFilterConfig::new(1.0, 2, 3);
        c.validate().unwrap();
        c.resample_threshold = 0.0;
        assert!(c.validate().is_err());
        c.resample_threshold = 1.0;
        c.roughening = -1.0;
        assert!(c.validate().is_err());
        assert!(ParticleFilterConfig::new(1.0, 2, 0).validate().is_err());
    }
}
