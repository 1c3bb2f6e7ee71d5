//! Experiment configuration and runners behind the `probmhe` binary.
//!
//! A run is fully determined by its [`ExperimentConfig`] (including the
//! master seed). Every output directory receives the resolved configuration,
//! with estimated constants filled in, next to the CSV results. Timings are
//! returned in reports but never written to CSV, so CSV output is
//! byte-identical across machines and thread counts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::{estimate_smoothness, HorizonCost, Smoothness, SmoothnessProbe, StageCost};
use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::io::fmt_f64;
use crate::kl::{run_kl, KlRun, ParticleFilterConfig};
use crate::model::registry::{by_name, SystemParams};
use crate::model::{simulate, NoiseSpec, State, SystemModel, Trajectory};
use crate::observability::{find_min_horizon, tensor_grid, ObservabilityReport, DEFAULT_RANK_TOL};
use crate::oracle::rmse;
use crate::privacy::{feasibility, max_s_schedule, BoundKind, PrivacyConstants, PrivacySchedule, QModulus, Verdict};
use crate::rng::derive_seed;
use crate::w2::{run_w2, DpSchedule, StepMode, W2Config, W2Run};

/// Stream tags for the sub-seeds derived from the master seed.
const PRIOR_STREAM: u64 = 2;
const DP_STREAM: u64 = 3;
const KL_STREAM: u64 = 4;
const SMOOTHNESS_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    W2,
    Kl,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "w2" => Ok(Method::W2),
            "kl" => Ok(Method::Kl),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub process_bound: f64,
    pub measurement_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Permissive,
    Certified,
}

fn default_eta_factor() -> f64 {
    0.95
}
fn default_inner_tol() -> f64 {
    crate::w2::DEFAULT_INNER_TOL
}
fn default_inner_max_iters() -> usize {
    crate::w2::DEFAULT_INNER_MAX_ITERS
}
fn default_mode() -> ModeName {
    ModeName::Permissive
}
fn default_probe_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct W2Section {
    /// Step size; defaults to `eta_factor / l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "default_eta_factor")]
    pub eta_factor: f64,
    /// Gradient-Lipschitz constant; estimated over the prior box when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub l_w: f64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_inner_max_iters")]
    pub inner_max_iters: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
}

impl Default for W2Section {
    fn default() -> Self {
        Self {
            eta: None,
            eta_factor: default_eta_factor(),
            l: None,
            drift: 0.0,
            l_w: 0.0,
            mode: default_mode(),
            alpha: None,
            inner_tol: default_inner_tol(),
            inner_max_iters: default_inner_max_iters(),
            probe_samples: default_probe_samples(),
        }
    }
}

fn default_kl_eta() -> f64 {
    10.0
}
fn default_threshold() -> f64 {
    0.5
}
fn default_roughening() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSection {
    #[serde(default = "default_kl_eta")]
    pub eta: f64,
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_bandwidth: Option<f64>,
    #[serde(default = "default_roughening")]
    pub roughening: f64,
}

impl Default for KlSection {
    fn default() -> Self {
        Self {
            eta: default_kl_eta(),
            resample_threshold: default_threshold(),
            jitter_bandwidth: None,
            roughening: default_roughening(),
        }
    }
}

fn default_kind() -> String {
    "w2_horizon".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub epsilon: f64,
    pub delta: f64,
    /// Which bound fixes the constant schedule: w2_pointwise, w2_horizon, kl_pointwise, kl_horizon.
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Diameter of the initial support; defaults to the prior ensemble's bounding box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diam: Option<f64>,
    /// Gain of a linear `q(delta)`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_gain: Option<f64>,
    /// `alpha_k` for `k = 0..=T`; all zero when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 5.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffSection {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
}

impl Default for TradeoffSection {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_true")]
    pub plot: bool,
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            plot: true,
            per_sample: false,
        }
    }
}

fn default_method() -> Method {
    Method::W2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of estimator steps `T`.
    pub horizon: usize,
    /// Window length `N`.
    pub window: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    pub system: SystemSection,
    pub noise: NoiseSection,
    pub truth: TruthSection,
    pub prior: PriorSection,
    #[serde(default)]
    pub w2: W2Section,
    #[serde(default)]
    pub kl: KlSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpSection>,
    #[serde(default)]
    pub tradeoff: TradeoffSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// The benchmark setup: oscillator with `tau = 0.1`, `W = 0.1`, `V = 0.15`,
    /// `N = 10`, `T = 100`, 30 samples drawn uniformly from `[-1, 1]^2`.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seed,
            horizon: 100,
            window: 10,
            method: Method::W2,
            system: SystemSection {
                name: "benchmark2d".into(),
                tau: Some(0.1),
                a: None,
                eps: None,
            },
            noise: NoiseSection {
                process_bound: 0.1,
                measurement_bound: 0.15,
            },
            truth: TruthSection { x0: vec![1.0, 0.0] },
            prior: PriorSection {
                lo: vec![-1.0, -1.0],
                hi: vec![1.0, 1.0],
                samples: 30,
            },
            w2: W2Section::default(),
            kl: KlSection::default(),
            dp: None,
            tradeoff: TradeoffSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> Result<SystemModel> {
        by_name(
            &self.system.name,
            &SystemParams {
                tau: self.system.tau,
                a: self.system.a,
                eps: self.system.eps,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        let n = model.dim_state();
        if self.horizon == 0 || self.window == 0 {
            return Err(Error::Config("horizon and window must be >= 1".into()));
        }
        NoiseSpec::new(self.noise.process_bound, self.noise.measurement_bound)?;
        check_dim("truth.x0", n, self.truth.x0.len())?;
        check_dim("prior.lo", n, self.prior.lo.len())?;
        check_dim("prior.hi", n, self.prior.hi.len())?;
        if self.prior.samples == 0 || self.prior.lo.iter().zip(&self.prior.hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("prior needs samples >= 1 and lo <= hi".into()));
        }
        let w2 = &self.w2;
        if w2.eta.is_some_and(|e| !(e > 0.0)) || !(w2.eta_factor > 0.0 && w2.eta_factor < 1.0) {
            return Err(Error::Config("w2.eta must be > 0 and w2.eta_factor in (0, 1)".into()));
        }
        if w2.l.is_some_and(|l| !(l > 0.0)) || !(w2.drift >= 0.0 && w2.l_w >= 0.0) {
            return Err(Error::Config("w2 smoothness constants must be positive".into()));
        }
        if w2.mode == ModeName::Certified && w2.alpha.is_none() {
            return Err(Error::Config("certified mode needs w2.alpha".into()));
        }
        if w2.probe_samples < 2 {
            return Err(Error::Config("w2.probe_samples must be >= 2".into()));
        }
        self.kl_config(1.0)?.validate()?;
        if let Some(dp) = &self.dp {
            BoundKind::parse(&dp.kind)?;
            if !(dp.epsilon > 0.0 && dp.delta >= 0.0) || dp.diam.is_some_and(|d| !(d >= 0.0)) {
                return Err(Error::Config("dp needs epsilon > 0, delta >= 0, diam >= 0".into()));
            }
        }
        if self.tradeoff.epsilons.is_empty() || self.tradeoff.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("tradeoff.epsilons must be a nonempty list of positives".into()));
        }
        Ok(())
    }

    fn kl_config(&self, s: f64) -> Result<ParticleFilterConfig> {
        let mut cfg = ParticleFilterConfig::new(self.kl.eta, self.window, self.prior.samples);
        cfg.resample_threshold = self.kl.resample_threshold;
        cfg.jitter_bandwidth = self.kl.jitter_bandwidth;
        cfg.roughening = self.kl.roughening;
        if s < 1.0 {
            cfg.dp = Some(DpSchedule::constant(s, self.horizon, derive_seed(self.seed, &[DP_STREAM])));
        }
        Ok(cfg)
    }
}

/// Truth trajectory and prior ensemble shared by every estimator run of a config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: SystemModel,
    pub trajectory: Trajectory,
    pub prior: Ensemble,
}

impl Scenario {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model()?;
        let noise = NoiseSpec::new(config.noise.process_bound, config.noise.measurement_bound)?;
        let x0 = DVector::from_vec(config.truth.x0.clone());
        let trajectory = simulate(&model, &noise, &x0, config.horizon + config.window, config.seed)?;
        let prior = Ensemble::sample_box_prior(
            &DVector::from_vec(config.prior.lo.clone()),
            &DVector::from_vec(config.prior.hi.clone()),
            config.prior.samples,
            derive_seed(config.seed, &[PRIOR_STREAM]),
        )?;
        Ok(Self {
            model,
            trajectory,
            prior,
        })
    }

    /// True states `x_0..x_T` of the estimation interval.
    pub fn truth(&self, horizon: usize) -> &[State] {
        &self.trajectory.states[..=horizon]
    }
}

/// W2 constants after estimation/defaulting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedW2 {
    pub smoothness: Smoothness,
    pub eta: f64,
}

/// Fill in `l` (sampled over the prior box on the first window) and `eta`.
pub fn resolve_w2(config: &ExperimentConfig, scenario: &Scenario) -> Result<ResolvedW2> {
    let w2 = &config.w2;
    let l = match w2.l {
        Some(l) => l,
        None => {
            let stage = StageCost::quadratic();
            let placeholder = Smoothness::new(1.0, 0.0, 0.0)?;
            let cost = HorizonCost::from_measurements(
                &scenario.model,
                &stage,
                &scenario.trajectory.outputs,
                1,
                config.window,
                placeholder,
            )?;
            let probe = SmoothnessProbe {
                lo: DVector::from_vec(config.prior.lo.clone()),
                hi: DVector::from_vec(config.prior.hi.clone()),
                samples: w2.probe_samples,
                seed: derive_seed(config.seed, &[SMOOTHNESS_STREAM]),
                disturbance_scale: config.noise.process_bound.max(config.noise.measurement_bound),
            };
            let est = estimate_smoothness(&cost, None, &probe)?;
            if !(est.l_hat > 0.0) {
                return Err(Error::Config("sampled smoothness constant is zero; set w2.l".into()));
            }
            est.l_hat
        }
    };
    let smoothness = Smoothness::new(l, w2.drift, w2.l_w)?;
    let eta = w2.eta.unwrap_or(w2.eta_factor / l);
    Ok(ResolvedW2 { smoothness, eta })
}

fn w2_config(config: &ExperimentConfig, resolved: &ResolvedW2, s: f64) -> W2Config {
    let mode = match config.w2.mode {
        ModeName::Permissive => StepMode::Permissive,
        ModeName::Certified => StepMode::Certified {
            alpha: config.w2.alpha.unwrap_or(f64::INFINITY),
        },
    };
    let mut cfg = W2Config::new(resolved.eta, config.window, mode);
    cfg.inner_tol = config.w2.inner_tol;
    cfg.inner_max_iters = config.w2.inner_max_iters;
    if s < 1.0 {
        cfg.dp = Some(DpSchedule::constant(s, config.horizon, derive_seed(config.seed, &[DP_STREAM])));
    }
    cfg
}

/// Constants of the privacy bounds for a config.
pub fn privacy_constants(config: &ExperimentConfig, scenario: &Scenario, resolved: &ResolvedW2, dp: &DpSection) -> PrivacyConstants {
    let eta = match config.method {
        Method::W2 => resolved.eta,
        Method::Kl => config.kl.eta,
    };
    PrivacyConstants {
        l: resolved.smoothness.l,
        eta,
        c_f1: scenario.model.lipschitz().c_f1,
        diam_k0: dp.diam.unwrap_or_else(|| scenario.prior.diameter()),
        alpha: dp.alpha.clone(),
        q: dp.q_gain.map_or(QModulus::Identity, QModulus::Linear),
    }
}

/// Outcome of one estimator run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: Method,
    /// RMSE of the mean estimate over `k = 1..T`.
    pub rmse: DVector<f64>,
    /// Per-sample RMSE over `k = 1..T`, averaged over samples.
    pub sample_rmse: DVector<f64>,
    pub means: Vec<State>,
    pub step_seconds: f64,
    pub eta: f64,
    pub l: f64,
    /// Constant regularization weight (1 without DP).
    pub s: f64,
    pub warnings: Vec<String>,
    pub resolved: ExperimentConfig,
}

fn sample_rmse(ensembles: &[Ensemble], truth: &[State]) -> Result<DVector<f64>> {
    let n = ensembles[0].len();
    let dim = truth[0].len();
    let mut acc = DVector::zeros(dim);
    for i in 0..n {
        let path: Vec<State> = ensembles[1..].iter().map(|e| e.samples()[i].clone()).collect();
        acc += rmse(&path, &truth[1..])?;
    }
    Ok(acc / n as f64)
}

/// Report, ensembles `mu_0..mu_T`, and the raw run of whichever estimator was used.
pub type EstimatorRun = (RunReport, Vec<Ensemble>, Option<W2Run>, Option<KlRun>);

/// Run the configured estimator on the scenario with constant regularization `s`.
pub fn run_estimator(config: &ExperimentConfig, scenario: &Scenario, s: f64) -> Result<EstimatorRun> {
    let stage = StageCost::quadratic();
    let truth = scenario.truth(config.horizon);
    let resolved = resolve_w2(config, scenario)?;
    let mut warnings = vec![];
    let mut resolved_config = config.clone();
    resolved_config.w2.l = Some(resolved.smoothness.l);
    resolved_config.w2.eta = Some(resolved.eta);
    if !resolved.smoothness.drift_condition_holds() {
        warnings.push("l L > 1/2: no certified step size exists for these constants".into());
    }
    let started = Instant::now();
    let (ensembles, w2_run, kl_run) = match config.method {
        Method::W2 => {
            let cfg = w2_config(config, &resolved, s);
            let run = run_w2(
                &scenario.model,
                &stage,
                &scenario.trajectory.outputs,
                scenario.prior.clone(),
                resolved.smoothness,
                &cfg,
                config.horizon,
            )?;
            (run.ensembles.clone(), Some(run), None)
        }
        Method::Kl => {
            let cfg = config.kl_config(s)?;
            let run = run_kl(
                &scenario.model,
                &stage,
                &scenario.trajectory.outputs,
                scenario.prior.clone(),
                &cfg,
                config.horizon,
                derive_seed(config.seed, &[KL_STREAM]),
            )?;
            (run.ensembles.clone(), None, Some(run))
        }
    };
    let step_seconds = started.elapsed().as_secs_f64() / config.horizon as f64;
    let means: Vec<State> = ensembles.iter().map(Ensemble::mean).collect();
    let report = RunReport {
        method: config.method,
        rmse: rmse(&means[1..], &truth[1..])?,
        sample_rmse: sample_rmse(&ensembles, truth)?,
        means,
        step_seconds,
        eta: match config.method {
            Method::W2 => resolved.eta,
            Method::Kl => config.kl.eta,
        },
        l: resolved.smoothness.l,
        s,
        warnings,
        resolved: resolved_config,
    };
    Ok((report, ensembles, w2_run, kl_run))
}

/// The constant `s` selected by the config's dp section (1 without one).
pub fn schedule_s(config: &ExperimentConfig, scenario: &Scenario) -> Result<f64> {
    match &config.dp {
        None => Ok(1.0),
        Some(dp) => {
            let resolved = resolve_w2(config, scenario)?;
            let constants = privacy_constants(config, scenario, &resolved, dp);
            max_s_schedule(BoundKind::parse(&dp.kind)?, dp.epsilon, dp.delta, config.horizon, &constants)
        }
    }
}

fn write_vectors_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn coord_header(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (1..=dim).map(move |i| format!("{prefix}{i}"))
}

/// Run the configured estimator and write `estimates.csv`, `truth.csv`,
/// `metrics.csv`, `config.toml` and optionally `plot.svg` / `samples.csv`.
pub fn run_benchmark(config: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let scenario = Scenario::new(config)?;
    let s = schedule_s(config, &scenario)?;
    let (report, ensembles, w2_run, kl_run) = run_estimator(config, &scenario, s)?;
    fs::create_dir_all(out)?;
    let dim = scenario.model.dim_state();

    let mut header = vec!["k".to_string()];
    header.extend(coord_header("mean_", dim));
    match config.method {
        Method::W2 => header.extend(["mean_cost".to_string(), "mean_grad_norm".to_string()]),
        Method::Kl => header.extend(["ess".to_string(), "resampled".to_string()]),
    }
    let rows = (0..=config.horizon).map(|k| {
        let mut row = vec![k.to_string()];
        row.extend(report.means[k].iter().map(|&x| fmt_f64(x)));
        match (&w2_run, &kl_run) {
            (Some(run), _) => {
                if k == 0 {
                    row.extend([String::new(), String::new()]);
                } else {
                    let t = &run.telemetry[k - 1];
                    let w = ensembles[k].weights();
                    let cost: f64 = t.costs.iter().zip(w).map(|(c, w)| c * w).sum();
                    let grad: f64 = t.gradient_norms.iter().zip(w).map(|(g, w)| g * w).sum();
                    row.extend([fmt_f64(cost), fmt_f64(grad)]);
                }
            }
            (_, Some(run)) => {
                if k == 0 {
                    row.extend([fmt_f64(ensembles[0].ess()), "0".to_string()]);
                } else {
                    row.extend([fmt_f64(run.ess[k - 1]), u8::from(run.resampled[k - 1]).to_string()]);
                }
            }
            _ => unreachable!("one estimator ran"),
        }
        row
    });
    write_vectors_csv(&out.join("estimates.csv"), &header, rows)?;

    scenario.trajectory.write_csv(fs::File::create(out.join("truth.csv"))?)?;

    let mut metrics = vec![];
    for (i, v) in report.rmse.iter().enumerate() {
        metrics.push(vec![format!("rmse_x{}", i + 1), fmt_f64(*v)]);
    }
    for (i, v) in report.sample_rmse.iter().enumerate() {
        metrics.push(vec![format!("sample_rmse_x{}", i + 1), fmt_f64(*v)]);
    }
    metrics.push(vec!["eta".into(), fmt_f64(report.eta)]);
    metrics.push(vec!["l".into(), fmt_f64(report.l)]);
    metrics.push(vec!["s".into(), fmt_f64(report.s)]);
    write_vectors_csv(&out.join("metrics.csv"), &["metric".into(), "value".into()], metrics.into_iter())?;

    if config.output.per_sample {
        let mut header = vec!["k".to_string(), "i".to_string(), "weight".to_string()];
        header.extend(coord_header("z_", dim));
        let rows = ensembles.iter().enumerate().flat_map(|(k, e)| {
            e.samples()
                .iter()
                .zip(e.weights())
                .enumerate()
                .map(move |(i, (z, w))| {
                    let mut row = vec![k.to_string(), i.to_string(), fmt_f64(*w)];
                    row.extend(z.iter().map(|&x| fmt_f64(x)));
                    row
                })
                .collect::<Vec<_>>()
        });
        write_vectors_csv(&out.join("samples.csv"), &header, rows)?;
    }

    fs::write(out.join("config.toml"), report.resolved.to_toml()?)?;
    if config.output.plot {
        let title = format!("{} ({:?})", scenario.model.name(), config.method);
        fs::write(out.join("plot.svg"), trajectory_svg(&title, scenario.truth(config.horizon), &report.means))?;
    }
    Ok(report)
}

/// One row of the privacy/accuracy sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub epsilon: f64,
    pub s: f64,
    /// False when no meaningful `s` satisfies the bound; the run is skipped.
    pub feasible: bool,
    /// Per-sample RMSE averaged over samples; NaN for skipped rows.
    pub sample_rmse: DVector<f64>,
    pub mean_rmse: DVector<f64>,
}

/// For each `eps` pick the largest feasible constant `s` and run the private estimator.
/// Rows are sorted by `eps` and written to `tradeoff.csv` when `out` is given.
pub fn run_tradeoff_sweep(config: &ExperimentConfig, epsilons: &[f64], out: Option<&Path>) -> Result<Vec<TradeoffRow>> {
    if epsilons.is_empty() {
        return Err(Error::Config("tradeoff sweep needs at least one epsilon".into()));
    }
    let dp = config
        .dp
        .clone()
        .ok_or_else(|| Error::Config("tradeoff sweep needs a [dp] section (delta, kind)".into()))?;
    let scenario = Scenario::new(config)?;
    let resolved = resolve_w2(config, &scenario)?;
    let constants = privacy_constants(config, &scenario, &resolved, &dp);
    let kind = BoundKind::parse(&dp.kind)?;
    let mut sorted = epsilons.to_vec();
    sorted.sort_by(f64::total_cmp);
    let dim = scenario.model.dim_state();
    let mut rows = vec![];
    for eps in sorted {
        let s = max_s_schedule(kind, eps, dp.delta, config.horizon, &constants)?;
        if s < 1e-9 {
            log::warn!("eps = {eps}: no usable regularization weight, row flagged");
            rows.push(TradeoffRow {
                epsilon: eps,
                s,
                feasible: false,
                sample_rmse: DVector::from_element(dim, f64::NAN),
                mean_rmse: DVector::from_element(dim, f64::NAN),
            });
            continue;
        }
        let (report, ..) = run_estimator(config, &scenario, s)?;
        rows.push(TradeoffRow {
            epsilon: eps,
            s,
            feasible: true,
            sample_rmse: report.sample_rmse,
            mean_rmse: report.rmse,
        });
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut header = vec!["epsilon".to_string(), "s".to_string(), "feasible".to_string()];
        header.extend(coord_header("sample_rmse_x", dim));
        header.extend(coord_header("mean_rmse_x", dim));
        let csv_rows = rows.iter().map(|r| {
            let mut row = vec![fmt_f64(r.epsilon), fmt_f64(r.s), u8::from(r.feasible).to_string()];
            row.extend(r.sample_rmse.iter().map(|&x| fmt_f64(x)));
            row.extend(r.mean_rmse.iter().map(|&x| fmt_f64(x)));
            row
        });
        write_vectors_csv(&out.join("tradeoff.csv"), &header, csv_rows)?;
        let mut resolved_config = config.clone();
        resolved_config.w2.l = Some(resolved.smoothness.l);
        resolved_config.w2.eta = Some(resolved.eta);
        resolved_config.tradeoff.epsilons = epsilons.to_vec();
        fs::write(out.join("config.toml"), resolved_config.to_toml()?)?;
    }
    Ok(rows)
}

/// Feasibility of the config's dp section under each bound.
#[derive(Debug, Clone)]
pub struct BudgetRow {
    pub kind: BoundKind,
    pub s_star: f64,
    /// Verdict for the constant schedule `s = s_star`.
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct BudgetReport {
    pub epsilon: f64,
    pub delta: f64,
    pub horizon: usize,
    pub constants: PrivacyConstants,
    pub rows: Vec<BudgetRow>,
    /// Verdict for an explicit schedule `s`, when one was requested.
    pub requested: Option<(f64, Vec<(BoundKind, Verdict)>)>,
}

impl BudgetReport {
    pub fn render(&self) -> String {
        let mut text = String::new();
        let c = &self.constants;
        let _ = writeln!(
            text,
            "privacy budget: eps = {}, delta = {}, T = {}\nconstants: l = {}, eta = {}, c_f1 = {}, diam(K0) = {}, q = {:?}, alpha = {}",
            self.epsilon,
            self.delta,
            self.horizon,
            c.l,
            c.eta,
            c.c_f1,
            c.diam_k0,
            c.q,
            if c.alpha.is_empty() { "0".to_string() } else { format!("{:?}", c.alpha) }
        );
        for row in &self.rows {
            let _ = writeln!(
                text,
                "{:<13} s* = {:.10}  lhs = {:.6e}  rhs = {:.6e}  slack = {:.6e}{}",
                row.kind.name(),
                row.s_star,
                row.verdict.lhs,
                row.verdict.rhs,
                row.verdict.slack,
                if row.verdict.trivial { "  (trivially feasible)" } else { "" }
            );
            for note in &row.verdict.assumptions {
                let _ = writeln!(text, "{:<13} assumption: {note}", "");
            }
        }
        if let Some((s, verdicts)) = &self.requested {
            let _ = writeln!(text, "requested constant schedule s = {s}:");
            for (kind, v) in verdicts {
                let _ = writeln!(
                    text,
                    "{:<13} {}  slack = {:.6e}",
                    kind.name(),
                    if v.feasible { "feasible" } else { "INFEASIBLE" },
                    v.slack
                );
            }
        }
        text
    }

    /// True when an explicitly requested schedule violates some bound.
    pub fn any_infeasible(&self) -> bool {
        self.requested
            .as_ref()
            .is_some_and(|(_, v)| v.iter().any(|(_, v)| !v.feasible))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = ["kind", "s", "lhs", "rhs", "slack", "feasible", "trivial"].map(String::from);
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| budget_csv_row(r.kind, r.s_star, &r.verdict))
            .collect();
        if let Some((s, verdicts)) = &self.requested {
            rows.extend(verdicts.iter().map(|(k, v)| budget_csv_row(*k, *s, v)));
        }
        write_vectors_csv(path, &header, rows.into_iter())
    }
}

fn budget_csv_row(kind: BoundKind, s: f64, v: &Verdict) -> Vec<String> {
    vec![
        kind.name().to_string(),
        fmt_f64(s),
        fmt_f64(v.lhs),
        fmt_f64(v.rhs),
        fmt_f64(v.slack),
        u8::from(v.feasible).to_string(),
        u8::from(v.trivial).to_string(),
    ]
}

/// Evaluate all four bounds for the config's dp section; optionally check an explicit constant `s`.
pub fn dp_budget(config: &ExperimentConfig, requested_s: Option<f64>) -> Result<BudgetReport> {
    let dp = config
        .dp
        .clone()
        .ok_or_else(|| Error::Config("dp-budget needs a [dp] section".into()))?;
    let scenario = Scenario::new(config)?;
    let resolved = resolve_w2(config, &scenario)?;
    let constants = privacy_constants(config, &scenario, &resolved, &dp);
    let schedule = |s: f64| PrivacySchedule::constant(dp.epsilon, dp.delta, s, config.horizon, constants.clone());
    let mut rows = vec![];
    for kind in BoundKind::ALL {
        let s_star = max_s_schedule(kind, dp.epsilon, dp.delta, config.horizon, &constants)?;
        let verdict = feasibility(kind, &schedule(s_star.max(f64::MIN_POSITIVE)))?;
        rows.push(BudgetRow { kind, s_star, verdict });
    }
    let requested = match requested_s {
        Some(s) => Some((
            s,
            BoundKind::ALL
                .into_iter()
                .map(|k| feasibility(k, &schedule(s)).map(|v| (k, v)))
                .collect::<Result<Vec<_>>>()?,
        )),
        None => None,
    };
    Ok(BudgetReport {
        epsilon: dp.epsilon,
        delta: dp.delta,
        horizon: config.horizon,
        constants,
        rows,
        requested,
    })
}

/// Rank scan on a tensor grid over the prior box; writes `observability.csv` when `out` is given.
pub fn observability_scan(config: &ExperimentConfig, t_max: usize, points_per_axis: usize, out: Option<&Path>) -> Result<ObservabilityReport> {
    config.validate()?;
    if points_per_axis == 0 {
        return Err(Error::Config("need at least one grid point per axis".into()));
    }
    let model = config.model()?;
    let grid = tensor_grid(
        &DVector::from_vec(config.prior.lo.clone()),
        &DVector::from_vec(config.prior.hi.clone()),
        points_per_axis,
    );
    let report = find_min_horizon(&model, &grid, t_max, DEFAULT_RANK_TOL)?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        report.write_csv(fs::File::create(out.join("observability.csv"))?)?;
    }
    Ok(report)
}

/// Truth (solid) and mean estimate (dashed), one panel per coordinate, 800×600.
pub fn trajectory_svg(title: &str, truth: &[State], estimate: &[State]) -> String {
    let (width, height) = (800.0, 600.0);
    let dim = truth.first().map_or(0, |x| x.len()).max(1);
    let margin = 50.0;
    let panel_h = (height - 2.0 * margin) / dim as f64;
    let steps = truth.len().max(2) - 1;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\">\n\
         <rect width=\"800\" height=\"600\" fill=\"white\"/>\n\
         <text x=\"400\" y=\"25\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    for d in 0..dim {
        let top = margin + d as f64 * panel_h;
        let values = truth.iter().chain(estimate).map(|x| x[d]);
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |k: usize| margin + (width - 2.0 * margin) * k as f64 / steps as f64;
        let py = |v: f64| top + panel_h - 10.0 - (panel_h - 20.0) * (v - lo) / span;
        let _ = writeln!(
            svg,
            "<rect x=\"{margin}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{panel_h:.1}\" fill=\"none\" stroke=\"#999\"/>\n\
             <text x=\"10\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\">x{}</text>",
            width - 2.0 * margin,
            top + panel_h / 2.0,
            d + 1
        );
        for (series, style) in [(truth, "stroke=\"black\""), (estimate, "stroke=\"#d62728\" stroke-dasharray=\"6 3\"")] {
            let points: Vec<String> = series
                .iter()
                .enumerate()
                .map(|(k, x)| format!("{:.2},{:.2}", px(k), py(x[d])))
                .collect();
            let _ = writeln!(svg, "<polyline fill=\"none\" {style} stroke-width=\"1.5\" points=\"{}\"/>", points.join(" "));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
