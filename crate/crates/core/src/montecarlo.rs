//! Sampling-based verification of steering laws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments;
use crate::types::{AffineFeedbackLaw, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene};

/// Trials per independent random stream.
const CHUNK: usize = 1024;

/// Sampled trajectories: `states[k]` is `n × trials` for `k = 0..=L`,
/// `controls[k]` is `m × trials` for `k = 0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub states: Vec<DMatrix<f64>>,
    pub controls: Vec<DMatrix<f64>>,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    State,
    Control,
}

impl SampleSet {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn samples(&self, signal: Signal, k: usize) -> &DMatrix<f64> {
        match signal {
            Signal::State => &self.states[k],
            Signal::Control => &self.controls[k],
        }
    }

    pub fn mean(&self, signal: Signal, k: usize) -> DVector<f64> {
        let s = self.samples(signal, k);
        if self.trials == 0 {
            return DVector::zeros(s.nrows());
        }
        s.column_sum() / self.trials as f64
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self, signal: Signal, k: usize) -> DMatrix<f64> {
        let s = self.samples(signal, k);
        if self.trials < 2 {
            return DMatrix::zeros(s.nrows(), s.nrows());
        }
        let mu = self.mean(signal, k);
        let mut centered = s.clone();
        for mut c in centered.column_iter_mut() {
            c -= &mu;
        }
        (&centered * centered.transpose()) / (self.trials - 1) as f64
    }

    /// Sample skewness of `αᵀz_k`.
    pub fn skewness(&self, signal: Signal, alpha: &DVector<f64>, k: usize) -> f64 {
        let proj = alpha.transpose() * self.samples(signal, k);
        let t = self.trials as f64;
        let mean = proj.sum() / t;
        let (m2, m3) = proj.iter().fold((0.0, 0.0), |(a, b), x| {
            let d = x - mean;
            (a + d * d, b + d * d * d)
        });
        let (m2, m3) = (m2 / t, m3 / t);
        if m2 == 0.0 {
            0.0
        } else {
            m3 / m2.powf(1.5)
        }
    }
}

/// Simulates `x' = A x + B u + D w` under `u_k = K_k(x_k − μ_k) + v_k`, with
/// `μ_k` the analytically propagated mean. Trial `i` draws from stream
/// `i / 1024` of `seed`, so results do not depend on thread scheduling.
pub fn rollout(
    system: &LinearGaussianSystem,
    initial: &GaussianBelief,
    law: &AffineFeedbackLaw,
    trials: usize,
    seed: u64,
) -> Result<SampleSet> {
    let nominal = moments::propagate(system, initial, law)?;
    let (n, m, len) = (system.n(), system.m(), law.len());
    let root = match initial.covariance().clone().cholesky() {
        Some(ch) => ch.l(),
        None => linalg::psd_factor(initial.covariance()),
    };
    let w_dim = system.d().ncols();

    let chunks: Vec<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(trials - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut states = Vec::with_capacity(len + 1);
            let mut controls = Vec::with_capacity(len);
            let z = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut x = &root * z;
            for mut col in x.column_iter_mut() {
                col += initial.mean();
            }
            for (k, step) in law.steps().iter().enumerate() {
                let mut dev = x.clone();
                for mut col in dev.column_iter_mut() {
                    col -= &nominal.means[k];
                }
                let mut u = &step.k * dev;
                for mut col in u.column_iter_mut() {
                    col += &step.v;
                }
                let w = DMatrix::from_fn(w_dim, count, |_, _| rng.sample::<f64, _>(StandardNormal));
                let next = system.a() * &x + system.b() * &u + system.d() * w;
                states.push(std::mem::replace(&mut x, next));
                controls.push(u);
            }
            states.push(x);
            (states, controls)
        })
        .collect();

    let stitch = |rows: usize, pick: &dyn Fn(&(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)) -> &DMatrix<f64>| {
        let mut out = DMatrix::zeros(rows, trials);
        let mut col = 0;
        for c in &chunks {
            let block = pick(c);
            out.columns_mut(col, block.ncols()).copy_from(block);
            col += block.ncols();
        }
        out
    };
    let states = (0..=len).map(|k| stitch(n, &|c| &c.0[k])).collect();
    let controls = (0..len).map(|k| stitch(m, &|c| &c.1[k])).collect();
    Ok(SampleSet { states, controls, trials })
}

/// Fraction of samples with `αᵀz_k > β`.
pub fn empirical_violation_rate(
    samples: &SampleSet,
    c: &HalfspaceChanceConstraint,
    signal: Signal,
    k: usize,
) -> Result<f64> {
    let s = samples.samples(signal, k);
    if c.dim() != s.nrows() {
        return Err(Error::invalid("constraint dimension does not match samples"));
    }
    if samples.trials == 0 {
        return Ok(0.0);
    }
    let violations = s.column_iter().filter(|z| c.alpha().dot(z) > c.beta()).count();
    Ok(violations as f64 / samples.trials as f64)
}

/// `ε + 3·√(ε(1 − ε)/trials)`: the CLT bound on an empirical violation rate.
pub fn violation_bound(epsilon: f64, trials: usize) -> f64 {
    epsilon + 3.0 * (epsilon * (1.0 - epsilon) / trials.max(1) as f64).sqrt()
}

/// Worst empirical violation rate over all scene constraints and steps,
/// paired with its CLT bound, as `(rate, bound)` with the largest `rate − bound`.
pub fn worst_violation(samples: &SampleSet, scene: &PlanningScene) -> Result<Option<(f64, f64)>> {
    let mut worst: Option<(f64, f64)> = None;
    for k in 0..samples.steps() {
        for (signal, cs) in [(Signal::State, scene.state_constraints()), (Signal::Control, scene.control_constraints())]
        {
            for c in cs {
                let rate = empirical_violation_rate(samples, c, signal, k)?;
                let bound = violation_bound(c.epsilon(), samples.trials);
                if worst.is_none_or(|(r, b)| rate - bound > r - b) {
                    worst = Some((rate, bound));
                }
            }
        }
    }
    Ok(worst)
}

/// Per-step CSV: `step, mean_0.., cov_fro, state_viol_0.., control_viol_0..`.
pub fn summary_csv(samples: &SampleSet, scene: &PlanningScene) -> Result<String> {
    let n = samples.states.first().map_or(0, |s| s.nrows());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|i| format!("mean_{i}")));
    header.push("cov_fro".into());
    header.extend((0..scene.state_constraints().len()).map(|i| format!("state_viol_{i}")));
    header.extend((0..scene.control_constraints().len()).map(|i| format!("control_viol_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..samples.states.len() {
        let mut row = vec![k.to_string()];
        row.extend(samples.mean(Signal::State, k).iter().map(|x| x.to_string()));
        row.push(samples.covariance(Signal::State, k).norm().to_string());
        for c in scene.state_constraints() {
            row.push(empirical_violation_rate(samples, c, Signal::State, k)?.to_string());
        }
        for c in scene.control_constraints() {
            let cell = if k < samples.steps() {
                empirical_violation_rate(samples, c, Signal::Control, k)?.to_string()
            } else {
                String::new()
            };
            row.push(cell);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}
