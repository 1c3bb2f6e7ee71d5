//! Discrete-time autonomous systems `x_{k+1} = f(x_k, w_k)`, `y_k = h(x_k) + v_k`.
//!
//! A [`SystemModel`] bundles the dynamics, the output map, optional analytic
//! Jacobians and user-declared Lipschitz constants. Wherever a Jacobian is
//! needed and none was supplied, central finite differences are used with
//! step `1e-6 * max(1, |x|)`.
//!
//! Built-in systems live in [`registry`].

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::io::{fmt_f64, parse_f64};
use crate::rng::{stream, StreamRng};

pub type State = DVector<f64>;

pub type DynamicsFn = Arc<dyn Fn(&State, &DVector<f64>) -> State + Send + Sync>;
pub type OutputFn = Arc<dyn Fn(&State) -> DVector<f64> + Send + Sync>;
/// Jacobian of `f(., w)` with respect to the state, evaluated at `(x, w)`.
pub type DynamicsJacobianFn = Arc<dyn Fn(&State, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type OutputJacobianFn = Arc<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>;

/// User-declared Lipschitz constants of the dynamics and output map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Lipschitz {
    /// State constant of `f`.
    pub c_f1: f64,
    /// Disturbance constant of `f`.
    pub c_f2: f64,
    /// Constant of `h`.
    pub c_h: f64,
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dim_state: usize,
    dim_output: usize,
    dim_disturbance: usize,
    f: DynamicsFn,
    h: OutputFn,
    jac_f: Option<DynamicsJacobianFn>,
    jac_h: Option<OutputJacobianFn>,
    lipschitz: Lipschitz,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_output", &self.dim_output)
            .field("dim_disturbance", &self.dim_disturbance)
            .field("analytic_jac_f", &self.jac_f.is_some())
            .field("analytic_jac_h", &self.jac_h.is_some())
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        dim_state: usize,
        dim_output: usize,
        dim_disturbance: usize,
        f: DynamicsFn,
        h: OutputFn,
    ) -> Result<Self> {
        if dim_state == 0 || dim_output == 0 {
            return Err(Error::Config(
                "state and output dimensions must be at least 1".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            dim_state,
            dim_output,
            dim_disturbance,
            f,
            h,
            jac_f: None,
            jac_h: None,
            lipschitz: Lipschitz::default(),
        })
    }

    pub fn with_jacobians(
        mut self,
        jac_f: Option<DynamicsJacobianFn>,
        jac_h: Option<OutputJacobianFn>,
    ) -> Self {
        self.jac_f = jac_f;
        self.jac_h = jac_h;
        self
    }

    pub fn with_lipschitz(mut self, lipschitz: Lipschitz) -> Result<Self> {
        let Lipschitz { c_f1, c_f2, c_h } = lipschitz;
        if !(c_f1 >= 0.0 && c_f2 >= 0.0 && c_h >= 0.0) {
            return Err(Error::Config("Lipschitz constants must be >= 0".into()));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    /// Drop the analytic Jacobians, forcing the finite-difference path.
    pub fn without_jacobians(mut self) -> Self {
        self.jac_f = None;
        self.jac_h = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim_state(&self) -> usize {
        self.dim_state
    }
    pub fn dim_output(&self) -> usize {
        self.dim_output
    }
    pub fn dim_disturbance(&self) -> usize {
        self.dim_disturbance
    }
    pub fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }
    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_f.is_some() && self.jac_h.is_some()
    }

    pub fn zero_disturbance(&self) -> DVector<f64> {
        DVector::zeros(self.dim_disturbance)
    }

    pub fn step(&self, x: &State, w: &DVector<f64>) -> State {
        (self.f)(x, w)
    }

    /// Noise-free dynamics `f_0(x) = f(x, 0)`.
    pub fn f0(&self, x: &State) -> State {
        (self.f)(x, &self.zero_disturbance())
    }

    pub fn output(&self, x: &State) -> DVector<f64> {
        (self.h)(x)
    }

    pub fn jacobian_f(&self, x: &State, w: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_f {
            Some(j) => j(x, w),
            None => numerical_jacobian(|z| (self.f)(z, w), x),
        }
    }

    pub fn jacobian_f0(&self, x: &State) -> DMatrix<f64> {
        self.jacobian_f(x, &self.zero_disturbance())
    }

    pub fn jacobian_h(&self, x: &State) -> DMatrix<f64> {
        match &self.jac_h {
            Some(j) => j(x),
            None => numerical_jacobian(|z| (self.h)(z), x),
        }
    }

    pub fn check_state(&self, x: &State) -> Result<()> {
        check_dim("state", self.dim_state, x.len())
    }

    /// `f_0^k(x)`; `k = 0` returns `x`.
    pub fn iterate_f0(&self, x: &State, k: usize) -> State {
        let mut z = x.clone();
        for _ in 0..k {
            z = self.f0(&z);
        }
        z
    }

    /// `Σ_T(x) = (h(x), h(f_0(x)), ..., h(f_0^T(x)))`, length `T + 1`.
    pub fn output_sequence(&self, x: &State, horizon: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(horizon + 1);
        let mut z = x.clone();
        out.push(self.output(&z));
        for _ in 0..horizon {
            z = self.f0(&z);
            out.push(self.output(&z));
        }
        out
    }

    /// Sampled lower bounds on the Lipschitz constants over a box.
    ///
    /// Never overrides the declared constants; a warning is logged for every
    /// declared constant that a sampled pair exceeds.
    pub fn probe_lipschitz(
        &self,
        lo: &State,
        hi: &State,
        samples: usize,
        seed: u64,
    ) -> Result<LipschitzProbe> {
        self.check_state(lo)?;
        self.check_state(hi)?;
        let mut rng = stream(seed, &[0x11f]);
        let mut probe = LipschitzProbe::default();
        let zero = self.zero_disturbance();
        for _ in 0..samples {
            let x = sample_box(&mut rng, lo, hi);
            let y = sample_box(&mut rng, lo, hi);
            let dx = (&x - &y).norm();
            if dx <= f64::EPSILON {
                continue;
            }
            let rf = (self.f0(&x) - self.f0(&y)).norm() / dx;
            let rh = (self.output(&x) - self.output(&y)).norm() / dx;
            probe.c_f1 = probe.c_f1.max(rf);
            probe.c_h = probe.c_h.max(rh);
            if self.dim_disturbance > 0 {
                let w = DVector::from_fn(self.dim_disturbance, |_, _| rng.gen_range(-1.0..1.0));
                let dw = w.norm();
                if dw > f64::EPSILON {
                    let rw = (self.step(&x, &w) - self.step(&x, &zero)).norm() / dw;
                    probe.c_f2 = probe.c_f2.max(rw);
                }
            }
        }
        let declared = self.lipschitz;
        let slack = 1.0 + 1e-9;
        for (label, sampled, declared) in [
            ("c_f1", probe.c_f1, declared.c_f1),
            ("c_f2", probe.c_f2, declared.c_f2),
            ("c_h", probe.c_h, declared.c_h),
        ] {
            if sampled > declared * slack {
                log::warn!(
                    "{}: declared {label} = {declared} but a sampled ratio reached {sampled}",
                    self.name
                );
                probe.violations.push(label);
            }
        }
        Ok(probe)
    }
}

/// Result of [`SystemModel::probe_lipschitz`].
#[derive(Debug, Clone, Default)]
pub struct LipschitzProbe {
    pub c_f1: f64,
    pub c_f2: f64,
    pub c_h: f64,
    /// Declared constants that a sampled ratio exceeded.
    pub violations: Vec<&'static str>,
}

pub(crate) fn sample_box(rng: &mut StreamRng, lo: &State, hi: &State) -> State {
    DVector::from_fn(lo.len(), |i, _| {
        if hi[i] > lo[i] {
            rng.gen_range(lo[i]..hi[i])
        } else {
            lo[i]
        }
    })
}

/// Central-difference Jacobian with step `1e-6 * max(1, |x|)`.
pub fn numerical_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let step = 1e-6 * x.norm().max(1.0);
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + step;
        let fp = f(&xp);
        xp[j] = orig - step;
        let fm = f(&xp);
        xp[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Bounded, zero-mean noise: uniform per coordinate on `[-b/sqrt(d), b/sqrt(d)]`,
/// so every draw satisfies `|w| <= b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub process_bound: f64,
    pub measurement_bound: f64,
}

impl NoiseSpec {
    pub fn new(process_bound: f64, measurement_bound: f64) -> Result<Self> {
        if !(process_bound >= 0.0 && measurement_bound >= 0.0) {
            return Err(Error::Config("noise bounds must be >= 0".into()));
        }
        Ok(Self {
            process_bound,
            measurement_bound,
        })
    }

    pub fn zero() -> Self {
        Self {
            process_bound: 0.0,
            measurement_bound: 0.0,
        }
    }

    fn draw(rng: &mut StreamRng, dim: usize, bound: f64) -> DVector<f64> {
        if dim == 0 {
            return DVector::zeros(0);
        }
        let half = bound / (dim as f64).sqrt();
        let v = DVector::from_fn(dim, |_, _| {
            if half > 0.0 {
                rng.gen_range(-half..=half)
            } else {
                0.0
            }
        });
        assert!(v.norm() <= bound * (1.0 + 1e-12), "noise draw exceeds its bound");
        v
    }

    pub fn sample_process(&self, rng: &mut StreamRng, dim: usize) -> DVector<f64> {
        Self::draw(rng, dim, self.process_bound)
    }

    pub fn sample_measurement(&self, rng: &mut StreamRng, dim: usize) -> DVector<f64> {
        Self::draw(rng, dim, self.measurement_bound)
    }
}

/// A simulated run: states `x_0..x_T`, outputs `y_0..y_T`, and the disturbances
/// `w_0..w_{T-1}`, `v_0..v_T` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub outputs: Vec<DVector<f64>>,
    pub process_noise: Vec<DVector<f64>>,
    pub measurement_noise: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dx = self.states[0].len();
        let dy = self.outputs[0].len();
        let dw = self.process_noise.first().map_or(0, |w| w.len());
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=dx).map(|i| format!("x_{i}")));
        header.extend((1..=dy).map(|i| format!("y_{i}")));
        header.extend((1..=dw).map(|i| format!("w_{i}")));
        header.extend((1..=dy).map(|i| format!("v_{i}")));
        wtr.write_record(&header)?;
        for k in 0..self.states.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.states[k].iter().map(|&x| fmt_f64(x)));
            row.extend(self.outputs[k].iter().map(|&x| fmt_f64(x)));
            match self.process_noise.get(k) {
                Some(w) => row.extend(w.iter().map(|&x| fmt_f64(x))),
                None => row.extend(std::iter::repeat_n(String::new(), dw)),
            }
            row.extend(self.measurement_noise[k].iter().map(|&x| fmt_f64(x)));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Inverse of [`Trajectory::write_csv`]. The seed is not stored in the CSV.
    pub fn read_csv<R: Read>(input: R, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let (dx, dy, dw) = (count("x_"), count("y_"), count("w_"));
        let mut traj = Trajectory {
            states: vec![],
            outputs: vec![],
            process_noise: vec![],
            measurement_noise: vec![],
            seed,
        };
        fn take(record: &csv::StringRecord, col: &mut usize, n: usize) -> Result<DVector<f64>> {
            let v = (*col..*col + n)
                .map(|i| parse_f64(&record[i]))
                .collect::<Result<Vec<_>>>()?;
            *col += n;
            Ok(DVector::from_vec(v))
        }
        for record in rdr.records() {
            let record = record?;
            let mut col = 1;
            traj.states.push(take(&record, &mut col, dx)?);
            traj.outputs.push(take(&record, &mut col, dy)?);
            if dw > 0 && !record[col].trim().is_empty() {
                traj.process_noise.push(take(&record, &mut col, dw)?);
            } else {
                col += dw;
                if dw == 0 && traj.states.len() > 1 {
                    traj.process_noise.push(DVector::zeros(0));
                }
            }
            traj.measurement_noise.push(take(&record, &mut col, dy)?);
        }
        if traj.states.is_empty() {
            return Err(Error::Parse("trajectory csv has no rows".into()));
        }
        Ok(traj)
    }
}

/// Simulate `T` transitions from `x0`, drawing `w_k` then `v_k` from a stream seeded by `seed`.
pub fn simulate(
    model: &SystemModel,
    noise: &NoiseSpec,
    x0: &State,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    model.check_state(x0)?;
    if horizon == 0 {
        return Err(Error::Config("simulation horizon must be >= 1".into()));
    }
    let mut rng = stream(seed, &[0x5eed]);
    let (dw, dy) = (model.dim_disturbance(), model.dim_output());
    let mut states = Vec::with_capacity(horizon + 1);
    let mut outputs = Vec::with_capacity(horizon + 1);
    let mut process_noise = Vec::with_capacity(horizon);
    let mut measurement_noise = Vec::with_capacity(horizon + 1);
    let mut x = x0.clone();
    for k in 0..=horizon {
        let v = noise.sample_measurement(&mut rng, dy);
        outputs.push(model.output(&x) + &v);
        measurement_noise.push(v);
        states.push(x.clone());
        if k < horizon {
            let w = noise.sample_process(&mut rng, dw);
            x = model.step(&x, &w);
            process_noise.push(w);
        }
    }
    Ok(Trajectory {
        states,
        outputs,
        process_noise,
        measurement_noise,
        seed,
    })
}

/// Named systems available to the harness.
pub mod registry {
    use super::*;

    /// Damped nonlinear oscillator with scalar process noise on the velocity:
    /// `x1' = x1 + tau x2`, `x2' = x2 - tau x1 / (1 + x1^2 + x2^2) + w`, `y = x1 + v`.
    pub fn benchmark2d(tau: f64) -> SystemModel {
        let f: DynamicsFn = Arc::new(move |x: &State, w: &DVector<f64>| {
            let r2 = 1.0 + x[0] * x[0] + x[1] * x[1];
            DVector::from_vec(vec![x[0] + tau * x[1], x[1] - tau * x[0] / r2 + w[0]])
        });
        let h: OutputFn = Arc::new(|x: &State| DVector::from_element(1, x[0]));
        let jac_f: DynamicsJacobianFn = Arc::new(move |x: &State, _w: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let r2 = 1.0 + a * a + b * b;
            let dg_da = (1.0 + b * b - a * a) / (r2 * r2);
            let dg_db = -2.0 * a * b / (r2 * r2);
            DMatrix::from_row_slice(2, 2, &[1.0, tau, -tau * dg_da, 1.0 - tau * dg_db])
        });
        let jac_h: OutputJacobianFn = Arc::new(|_x: &State| DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        // |grad g| <= 1 for g = x1 / (1 + |x|^2), so |I + tau [[0,1],[-g1,-g2]]| <= 1 + tau sqrt(2).
        SystemModel::new(format!("benchmark2d(tau={tau})"), 2, 1, 1, f, h)
            .expect("static dimensions")
            .with_jacobians(Some(jac_f), Some(jac_h))
            .with_lipschitz(Lipschitz {
                c_f1: 1.0 + tau * std::f64::consts::SQRT_2,
                c_f2: 1.0,
                c_h: 1.0,
            })
            .expect("nonnegative constants")
    }

    /// Piecewise expanding map on `(0, inf)` observed through `sin`:
    /// `3x` below `a pi - eps`, `2x + a pi` above `a pi + eps`, joined by a
    /// cubic Hermite segment. Additive process noise.
    pub fn sine1d(a: f64, eps: f64) -> SystemModel {
        let x_lo = a * PI - eps;
        let x_hi = a * PI + eps;
        let (p0, p1) = (3.0 * x_lo, 2.0 * x_hi + a * PI);
        let width = x_hi - x_lo;
        let (m0, m1) = (3.0 * width, 2.0 * width);
        let map = move |x: f64| -> (f64, f64) {
            if x <= x_lo {
                (3.0 * x, 3.0)
            } else if x > x_hi {
                (2.0 * x + a * PI, 2.0)
            } else {
                let t = (x - x_lo) / width;
                let (t2, t3) = (t * t, t * t * t);
                let value = (2.0 * t3 - 3.0 * t2 + 1.0) * p0
                    + (t3 - 2.0 * t2 + t) * m0
                    + (-2.0 * t3 + 3.0 * t2) * p1
                    + (t3 - t2) * m1;
                let dvalue = (6.0 * t2 - 6.0 * t) * p0
                    + (3.0 * t2 - 4.0 * t + 1.0) * m0
                    + (-6.0 * t2 + 6.0 * t) * p1
                    + (3.0 * t2 - 2.0 * t) * m1;
                (value, dvalue / width)
            }
        };
        let f: DynamicsFn =
            Arc::new(move |x: &State, w: &DVector<f64>| DVector::from_element(1, map(x[0]).0 + w[0]));
        let jac_f: DynamicsJacobianFn =
            Arc::new(move |x: &State, _w: &DVector<f64>| DMatrix::from_element(1, 1, map(x[0]).1));
        let h: OutputFn = Arc::new(|x: &State| DVector::from_element(1, x[0].sin()));
        let jac_h: OutputJacobianFn = Arc::new(|x: &State| DMatrix::from_element(1, 1, x[0].cos()));
        SystemModel::new(format!("sine1d(a={a},eps={eps})"), 1, 1, 1, f, h)
            .expect("static dimensions")
            .with_jacobians(Some(jac_f), Some(jac_h))
            .with_lipschitz(Lipschitz {
                c_f1: 3.0,
                c_f2: 1.0,
                c_h: 1.0,
            })
            .expect("nonnegative constants")
    }

    /// Linear system `x' = A x + B w`, `y = C x`, with exact spectral-norm constants.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<SystemModel> {
        let n = a.nrows();
        check_dim("linear A columns", n, a.ncols())?;
        check_dim("linear B rows", n, b.nrows())?;
        check_dim("linear C columns", n, c.ncols())?;
        let lipschitz = Lipschitz {
            c_f1: a.clone().svd(false, false).singular_values.max(),
            c_f2: if b.ncols() > 0 {
                b.clone().svd(false, false).singular_values.max()
            } else {
                0.0
            },
            c_h: c.clone().svd(false, false).singular_values.max(),
        };
        let (fa, fb) = (a.clone(), b.clone());
        let f: DynamicsFn = Arc::new(move |x: &State, w: &DVector<f64>| &fa * x + &fb * w);
        let hc = c.clone();
        let h: OutputFn = Arc::new(move |x: &State| &hc * x);
        let ja = a.clone();
        let jac_f: DynamicsJacobianFn = Arc::new(move |_x: &State, _w: &DVector<f64>| ja.clone());
        let jc = c.clone();
        let jac_h: OutputJacobianFn = Arc::new(move |_x: &State| jc.clone());
        SystemModel::new("linear", n, c.nrows(), b.ncols(), f, h)?
            .with_jacobians(Some(jac_f), Some(jac_h))
            .with_lipschitz(lipschitz)
    }

    /// Scalar linear system `x' = a x + w`, `y = x`.
    pub fn scalar_linear(a: f64) -> SystemModel {
        linear(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .expect("scalar dimensions agree")
    }

    /// Look up a named system. Parameters not used by the system are ignored.
    pub fn by_name(name: &str, params: &SystemParams) -> Result<SystemModel> {
        match name {
            "benchmark2d" => Ok(benchmark2d(params.tau.unwrap_or(0.1))),
            "sine1d" => Ok(sine1d(params.a.unwrap_or(2.0), params.eps.unwrap_or(0.01))),
            "scalar_linear" => Ok(scalar_linear(params.a.unwrap_or(0.95))),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }

    /// Optional parameters for [`by_name`].
    #[derive(Debug, Clone, Copy, Default, PartialEq)]
    pub struct SystemParams {
        pub tau: Option<f64>,
        pub a: Option<f64>,
        pub eps: Option<f64>,
    }
}
