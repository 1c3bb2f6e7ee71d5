//! Weighted sample sets representing the estimate measure `mu_k`.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::io::fmt_f64;
use crate::model::{sample_box, State};
use crate::rng::stream;

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    samples: Vec<State>,
    weights: Vec<f64>,
    time_index: usize,
    /// Master seed followed by the stream path that produced the samples.
    seed_lineage: Vec<u64>,
}

impl Ensemble {
    pub fn new(
        samples: Vec<State>,
        weights: Vec<f64>,
        time_index: usize,
        seed_lineage: Vec<u64>,
    ) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Config("ensemble needs at least one sample".into()));
        };
        let dim = first.len();
        for s in &samples {
            check_dim("ensemble sample", dim, s.len())?;
        }
        check_dim("ensemble weights", samples.len(), weights.len())?;
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("ensemble weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!("ensemble weights sum to {sum}, not 1")));
        }
        Ok(Self {
            samples,
            weights,
            time_index,
            seed_lineage,
        })
    }

    pub fn uniform(samples: Vec<State>, time_index: usize, seed_lineage: Vec<u64>) -> Result<Self> {
        let n = samples.len().max(1);
        Self::new(samples, vec![1.0 / n as f64; n], time_index, seed_lineage)
    }

    /// `n` uniform draws from the box `[lo, hi]` at time 0.
    pub fn sample_box_prior(lo: &State, hi: &State, n: usize, seed: u64) -> Result<Self> {
        check_dim("prior box", lo.len(), hi.len())?;
        if lo.iter().zip(hi.iter()).any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("prior box requires lo <= hi".into()));
        }
        if n == 0 {
            return Err(Error::Config("prior ensemble size must be >= 1".into()));
        }
        let mut rng = stream(seed, &[0x9a10]);
        let samples = (0..n).map(|_| sample_box(&mut rng, lo, hi)).collect();
        Self::uniform(samples, 0, vec![seed])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }
    pub fn samples(&self) -> &[State] {
        &self.samples
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn time_index(&self) -> usize {
        self.time_index
    }
    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    /// Same weights, new samples, time advanced by one.
    pub(crate) fn advanced(&self, samples: Vec<State>, lineage_step: u64) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        let mut seed_lineage = self.seed_lineage.clone();
        seed_lineage.push(lineage_step);
        Self {
            samples,
            weights: self.weights.clone(),
            time_index: self.time_index + 1,
            seed_lineage,
        }
    }

    /// Weighted mean.
    pub fn mean(&self) -> State {
        self.samples
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim()), |acc, (s, w)| acc + s * *w)
    }

    /// Effective sample size `1 / sum w_i^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Diagonal of the bounding box of the weighted support; an upper bound on its diameter.
    pub fn diameter(&self) -> f64 {
        let support = self
            .samples
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, _)| s);
        let mut lo = DVector::from_element(self.dim(), f64::INFINITY);
        let mut hi = DVector::from_element(self.dim(), f64::NEG_INFINITY);
        for s in support {
            lo = lo.inf(s);
            hi = hi.sup(s);
        }
        (hi - lo).norm()
    }

    /// Rows `i, weight, z_1..z_d`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["i".to_string(), "weight".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("z_{j}")));
        wtr.write_record(&header)?;
        for (i, (s, w)) in self.samples.iter().zip(&self.weights).enumerate() {
            let mut row = vec![i.to_string(), fmt_f64(*w)];
            row.extend(s.iter().map(|&x| fmt_f64(x)));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
