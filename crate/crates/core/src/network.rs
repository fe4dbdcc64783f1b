//! Probe-delay network simulator.
//!
//! A [`NetworkModel`] pairs a binary path-link matrix with per-link delay
//! distributions and Gaussian measurement noise. A [`TraceGenerator`] draws
//! probes from it: fresh link delays for every probe, a path chosen by a
//! [`RowSelector`], and the noisy path delay as the observation.
//!
//! Randomness comes from ChaCha20 seeded with `seed_from_u64(seed)`, split
//! into three independent streams (delays, path selection, noise) so that
//! changing one component never perturbs the others.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::ProbeObservation;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::lifting::enumerate_multi_indices;
use crate::linalg::{normalize_rows, MeasurementSystem, WeightVector};

/// Identifier written to trace headers.
pub const RNG_ID: &str = "chacha20;seed_from_u64;streams=delay:1,select:2,noise:3";

const DELAY_STREAM: u64 = 1;
const SELECT_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

const ROW_SUM_TOL: f64 = 1e-9;

/// The six-path, thirteen-link reference network (rows are paths).
pub const PATH_LINK_6X13: [[f64; 13]; 6] = [
    [1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
    [1., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0., 0., 0.],
    [1., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 1., 1.],
    [0., 0., 1., 0., 1., 1., 0., 0., 0., 1., 0., 0., 0.],
    [0., 0., 0., 0., 0., 1., 1., 1., 1., 0., 0., 0., 0.],
    [0., 0., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 1.],
];

/// Mean link delays (ms) of the reference network.
pub const REFERENCE_MEAN_DELAYS: [f64; 13] = [
    50.25, 26.32, 41.84, 9.10, 23.04, 48.08, 41.49, 49.75, 34.72, 3.78, 44.05, 48.54, 29.07,
];

/// Starting point used with the reference network.
pub const REFERENCE_INITIAL_GUESS: [f64; 13] = [
    0.0, 0.0, 12.15, 0.0, 25.34, 0.0, 0.0, 0.0, 0.0, 0.0, 28.86, 39.90, 0.0,
];

/// Published end-of-run mean estimates for the reference network (10⁶ probes).
pub const REFERENCE_FINAL_ESTIMATES: [f64; 13] = [
    45.09, 33.17, 39.96, 11.92, 19.98, 46.87, 39.05, 50.97, 37.34, 7.82, 42.06, 53.54, 26.82,
];

/// A published second-moment row: 1-based link factors, initial guess,
/// true value and final estimate.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceMoment {
    pub factors: [usize; 2],
    pub initial: f64,
    pub truth: f64,
    pub estimate: f64,
}

/// Published second moments. Their delay distributions are unknown, so these
/// are only comparable in order of magnitude with the simulator's.
pub const REFERENCE_SECOND_MOMENTS: [ReferenceMoment; 4] = [
    ReferenceMoment {
        factors: [1, 1],
        initial: 17388.0,
        truth: 20539.0,
        estimate: 20570.0,
    },
    ReferenceMoment {
        factors: [4, 4],
        initial: 0.0,
        truth: 277.85,
        estimate: 286.29,
    },
    ReferenceMoment {
        factors: [3, 10],
        initial: 15985.0,
        truth: 158.83,
        estimate: 164.34,
    },
    ReferenceMoment {
        factors: [8, 12],
        initial: -126.0,
        truth: 2427.8,
        estimate: 2390.5,
    },
];

pub fn path_link_matrix() -> DMatrix<f64> {
    DMatrix::from_fn(6, 13, |i, j| PATH_LINK_6X13[i][j])
}

/// Nonnegative link delay law with closed-form first two moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DelayDistribution {
    Deterministic { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl DelayDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DelayDistribution::Deterministic { value } => value.is_finite() && value >= 0.0,
            DelayDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low >= 0.0 && high >= low
            }
            DelayDistribution::Exponential { mean } => mean.is_finite() && mean > 0.0,
            DelayDistribution::Gamma { shape, scale } => {
                shape.is_finite() && scale.is_finite() && shape > 0.0 && scale > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!(
                "invalid delay distribution {self:?}"
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DelayDistribution::Deterministic { value } => value,
            DelayDistribution::Uniform { low, high } => 0.5 * (low + high),
            DelayDistribution::Exponential { mean } => mean,
            DelayDistribution::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            DelayDistribution::Deterministic { value } => value * value,
            DelayDistribution::Uniform { low, high } => {
                (low * low + low * high + high * high) / 3.0
            }
            DelayDistribution::Exponential { mean } => 2.0 * mean * mean,
            DelayDistribution::Gamma { shape, scale } => shape * (shape + 1.0) * scale * scale,
        }
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.second_moment() - m * m
    }
}

/// Draws the full link-delay vector for one probe. Implement this to feed
/// correlated delays into a [`TraceGenerator`].
pub trait JointDelaySampler: Send {
    fn sample_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Mutually independent links, each with its own [`DelayDistribution`].
pub struct IndependentLinks {
    laws: Vec<LinkLaw>,
}

enum LinkLaw {
    Fixed(f64),
    Uniform { low: f64, width: f64 },
    Exponential(f64),
    Gamma(Gamma<f64>),
}

impl IndependentLinks {
    pub fn new(delays: &[DelayDistribution]) -> Result<Self> {
        let laws = delays
            .iter()
            .map(|d| {
                d.validate()?;
                Ok(match *d {
                    DelayDistribution::Deterministic { value } => LinkLaw::Fixed(value),
                    DelayDistribution::Uniform { low, high } => LinkLaw::Uniform {
                        low,
                        width: high - low,
                    },
                    DelayDistribution::Exponential { mean } => LinkLaw::Exponential(mean),
                    DelayDistribution::Gamma { shape, scale } => LinkLaw::Gamma(
                        Gamma::new(shape, scale)
                            .map_err(|e| Error::InvalidModel(format!("gamma: {e}")))?,
                    ),
                })
            })
            .collect::<Result<_>>()?;
        Ok(IndependentLinks { laws })
    }
}

impl JointDelaySampler for IndependentLinks {
    fn sample_into(&mut self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for (slot, law) in out.iter_mut().zip(&self.laws) {
            *slot = match law {
                LinkLaw::Fixed(v) => *v,
                LinkLaw::Uniform { low, width } => low + width * rng.random::<f64>(),
                LinkLaw::Exponential(mean) => {
                    let e: f64 = Exp1.sample(rng);
                    mean * e
                }
                LinkLaw::Gamma(g) => g.sample(rng),
            };
        }
    }
}

/// Path-link matrix, link delay laws and measurement noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    path_link: DMatrix<f64>,
    link_delays: Vec<DelayDistribution>,
    noise_sigma: f64,
}

impl NetworkModel {
    pub fn new(
        path_link: DMatrix<f64>,
        link_delays: Vec<DelayDistribution>,
        noise_sigma: f64,
    ) -> Result<Self> {
        if path_link.iter().any(|&a| a != 0.0 && a != 1.0) {
            return Err(Error::InvalidModel(
                "path-link entries must be 0 or 1".into(),
            ));
        }
        if let Some(i) =
            (0..path_link.nrows()).find(|&i| path_link.row(i).iter().all(|&a| a == 0.0))
        {
            return Err(Error::InvalidModel(format!(
                "path {} traverses no link",
                i + 1
            )));
        }
        if link_delays.len() != path_link.ncols() {
            return Err(Error::DimensionMismatch {
                expected: path_link.ncols(),
                got: link_delays.len(),
            });
        }
        for d in &link_delays {
            d.validate()?;
        }
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::InvalidModel(format!("noise_sigma = {noise_sigma}")));
        }
        // same shape rules as the estimator's system
        MeasurementSystem::new(path_link.clone())?;
        Ok(NetworkModel {
            path_link,
            link_delays,
            noise_sigma,
        })
    }

    /// Reference network with `Uniform(0, 2·mean)` link delays.
    pub fn reference(noise_sigma: f64) -> Result<Self> {
        let delays = REFERENCE_MEAN_DELAYS
            .iter()
            .map(|&m| DelayDistribution::Uniform {
                low: 0.0,
                high: 2.0 * m,
            })
            .collect();
        Self::new(path_link_matrix(), delays, noise_sigma)
    }

    pub fn paths(&self) -> usize {
        self.path_link.nrows()
    }

    pub fn links(&self) -> usize {
        self.path_link.ncols()
    }

    pub fn path_link(&self) -> &DMatrix<f64> {
        &self.path_link
    }

    pub fn link_delays(&self) -> &[DelayDistribution] {
        &self.link_delays
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Unit-row measurement system for the estimator.
    pub fn system(&self) -> Result<MeasurementSystem> {
        normalize_rows(self.path_link.clone())
    }

    /// `v* = E[X]`.
    pub fn mean_delays(&self) -> DVector<f64> {
        DVector::from_iterator(self.links(), self.link_delays.iter().map(|d| d.mean()))
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            means: self.link_delays.iter().map(|d| d.mean()).collect(),
            second_moments: self.link_delays.iter().map(|d| d.second_moment()).collect(),
        }
    }

    /// Variance of the raw delay on 1-based path `z`, independent links assumed.
    pub fn path_variance(&self, z: usize) -> f64 {
        let links: f64 = self
            .path_link
            .row(z - 1)
            .iter()
            .zip(&self.link_delays)
            .map(|(a, d)| a * a * d.variance())
            .sum();
        links + self.noise_sigma * self.noise_sigma
    }
}

/// Closed-form moments over `Δ_{N,q}` in canonical column order.
pub fn true_moments(model: &NetworkModel, q: u32) -> Result<DVector<f64>> {
    model.ground_truth().moments(q)
}

/// Per-link first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub means: Vec<f64>,
    pub second_moments: Vec<f64>,
}

impl GroundTruth {
    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.means.clone())
    }

    /// Moments of order 1 or 2 over `Δ_{N,q}`, treating links as independent:
    /// `E[X_i X_j] = E[X_i] E[X_j]` for `i ≠ j`.
    pub fn moments(&self, q: u32) -> Result<DVector<f64>> {
        match q {
            1 => Ok(self.mean_vector()),
            2 => {
                let idx = enumerate_multi_indices(self.means.len(), 2)?;
                Ok(DVector::from_iterator(
                    idx.len(),
                    idx.iter().map(|r| {
                        let e = r.exponents();
                        let mut support = r.support();
                        let i = support.next().expect("nonempty support");
                        match support.next() {
                            Some(j) => self.means[i] * self.means[j],
                            None if e[i] == 2 => self.second_moments[i],
                            None => unreachable!("order-2 index"),
                        }
                    }),
                ))
            }
            q => Err(Error::UnsupportedOrder(q)),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "link,mean,second_moment")?;
        for (l, (m, s)) in self.means.iter().zip(&self.second_moments).enumerate() {
            writeln!(w, "{},{},{}", l + 1, sig9(*m), sig9(*s))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut means = Vec::new();
        let mut second_moments = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("link") {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let link: usize = fields[0].parse().map_err(|e| err(format!("link: {e}")))?;
            if link != means.len() + 1 {
                return Err(err(format!(
                    "expected link {}, found {link}",
                    means.len() + 1
                )));
            }
            means.push(fields[1].parse().map_err(|e| err(format!("mean: {e}")))?);
            second_moments.push(
                fields[2]
                    .parse()
                    .map_err(|e| err(format!("second_moment: {e}")))?,
            );
        }
        Ok(GroundTruth {
            means,
            second_moments,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// How the observed path index is chosen at each step.
#[derive(Clone, Debug, PartialEq)]
pub enum RowSelector {
    Iid(WeightVector),
    /// Transition matrix and 1-based initial state.
    Markov {
        transition: DMatrix<f64>,
        initial: usize,
    },
}

impl RowSelector {
    pub fn uniform(m: usize) -> Self {
        RowSelector::Iid(WeightVector::uniform(m))
    }

    pub fn markov(transition: DMatrix<f64>, initial: usize) -> Result<Self> {
        validate_stochastic(&transition)?;
        if initial == 0 || initial > transition.nrows() {
            return Err(Error::InvalidTransition(format!(
                "initial state {initial} outside 1..={}",
                transition.nrows()
            )));
        }
        if !is_primitive(&transition) {
            return Err(Error::NotErgodic("chain is reducible or periodic".into()));
        }
        Ok(RowSelector::Markov {
            transition,
            initial,
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            RowSelector::Iid(w) => w.len(),
            RowSelector::Markov { transition, .. } => transition.nrows(),
        }
    }

    /// Long-run selection frequencies `λ`.
    pub fn stationary_weights(&self) -> Result<WeightVector> {
        match self {
            RowSelector::Iid(w) => Ok(w.clone()),
            RowSelector::Markov { transition, .. } => stationary_distribution(transition),
        }
    }
}

fn validate_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() == 0 || p.nrows() != p.ncols() {
        return Err(Error::InvalidTransition(format!(
            "transition matrix must be square, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidTransition(
            "entries must be finite and nonnegative".into(),
        ));
    }
    for (i, row) in p.row_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidTransition(format!(
                "row {} sums to {s}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Some power `P^k`, `k <= (m-1)^2 + 1`, is entrywise positive; equivalent to
/// the chain being irreducible and aperiodic.
pub fn is_primitive(p: &DMatrix<f64>) -> bool {
    let m = p.nrows();
    let pattern: Vec<Vec<bool>> = (0..m)
        .map(|i| (0..m).map(|j| p[(i, j)] > 0.0).collect())
        .collect();
    let mut power = pattern.clone();
    let bound = (m - 1) * (m - 1) + 1;
    for _ in 0..bound {
        if power.iter().all(|r| r.iter().all(|&b| b)) {
            return true;
        }
        power = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| (0..m).any(|l| power[i][l] && pattern[l][j]))
                    .collect()
            })
            .collect();
    }
    power.iter().all(|r| r.iter().all(|&b| b))
}

/// Solves `λ P = λ`, `Σ λ = 1` for an ergodic chain.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<WeightVector> {
    validate_stochastic(p)?;
    if !is_primitive(p) {
        return Err(Error::NotErgodic("chain is reducible or periodic".into()));
    }
    let m = p.nrows();
    // (P' - I) λ = 0 with the last equation replaced by Σ λ = 1
    let mut system = p.transpose() - DMatrix::identity(m, m);
    system.row_mut(m - 1).fill(1.0);
    let mut rhs = DVector::zeros(m);
    rhs[m - 1] = 1.0;
    let mut lambda = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotErgodic("singular stationary system".into()))?;
    // polish with a few power steps; ergodicity keeps this contractive
    for _ in 0..4 {
        lambda = p.transpose() * &lambda;
        lambda /= lambda.sum();
    }
    if lambda.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotErgodic(format!(
            "non-positive stationary mass {lambda}"
        )));
    }
    WeightVector::new(lambda.iter().copied().collect())
}

/// Stateful sampler of path indices.
enum SelectorState {
    Iid(WeightedIndex<f64>),
    Markov {
        rows: Vec<WeightedIndex<f64>>,
        current: usize,
    },
}

impl SelectorState {
    fn new(selector: &RowSelector) -> Result<Self> {
        let weighted =
            |w: Vec<f64>| WeightedIndex::new(w).map_err(|e| Error::InvalidWeights(e.to_string()));
        Ok(match selector {
            RowSelector::Iid(w) => SelectorState::Iid(weighted(w.as_slice().to_vec())?),
            RowSelector::Markov {
                transition,
                initial,
            } => SelectorState::Markov {
                rows: transition
                    .row_iter()
                    .map(|r| weighted(r.iter().copied().collect()))
                    .collect::<Result<_>>()?,
                current: initial - 1,
            },
        })
    }

    /// Returns the 1-based path for this step and advances.
    fn next(&mut self, rng: &mut ChaCha20Rng) -> usize {
        match self {
            SelectorState::Iid(w) => w.sample(rng) + 1,
            SelectorState::Markov { rows, current } => {
                let z = *current + 1;
                *current = rows[*current].sample(rng);
                z
            }
        }
    }
}

/// Deterministic, seeded source of probe observations.
pub struct TraceGenerator {
    model: NetworkModel,
    sampler: Box<dyn JointDelaySampler>,
    selector: SelectorState,
    delay_rng: ChaCha20Rng,
    select_rng: ChaCha20Rng,
    noise_rng: ChaCha20Rng,
    delays: Vec<f64>,
    k: u64,
}

impl TraceGenerator {
    pub fn new(model: NetworkModel, selector: &RowSelector, seed: u64) -> Result<Self> {
        if selector.rows() != model.paths() {
            return Err(Error::DimensionMismatch {
                expected: model.paths(),
                got: selector.rows(),
            });
        }
        let stream = |id| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Ok(TraceGenerator {
            sampler: Box::new(IndependentLinks::new(model.link_delays())?),
            selector: SelectorState::new(selector)?,
            delays: vec![0.0; model.links()],
            model,
            delay_rng: stream(DELAY_STREAM),
            select_rng: stream(SELECT_STREAM),
            noise_rng: stream(NOISE_STREAM),
            k: 0,
        })
    }

    /// Replaces the independent-link delay sampler, e.g. with a correlated one.
    pub fn with_joint_sampler(mut self, sampler: Box<dyn JointDelaySampler>) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    /// Measures 1-based path `z` with freshly drawn delays and noise.
    pub fn probe_path(&mut self, z: usize) -> ProbeObservation {
        self.sampler
            .sample_into(&mut self.delay_rng, &mut self.delays);
        let g: f64 = StandardNormal.sample(&mut self.noise_rng);
        let path = self.model.path_link.row(z - 1);
        let y = path
            .iter()
            .zip(&self.delays)
            .map(|(a, x)| a * x)
            .sum::<f64>()
            + self.model.noise_sigma * g;
        let obs = ProbeObservation::new(self.k, z, y);
        self.k += 1;
        obs
    }

    /// Selects a path and measures it.
    pub fn sample_probe(&mut self) -> ProbeObservation {
        let z = self.selector.next(&mut self.select_rng);
        self.probe_path(z)
    }
}

impl Iterator for TraceGenerator {
    type Item = ProbeObservation;

    fn next(&mut self) -> Option<ProbeObservation> {
        Some(self.sample_probe())
    }
}

/// Header lines of a trace file. Fields are optional so that foreign
/// observation streams without headers can be replayed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceHeader {
    pub seed: Option<u64>,
    pub rng: Option<String>,
    pub paths: Option<usize>,
    pub links: Option<usize>,
    pub noise_sigma: Option<f64>,
}

/// A recorded observation stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub observations: Vec<ProbeObservation>,
}

/// Simulates `n` probes; returns the stream and the closed-form ground truth.
pub fn generate_trace(
    model: &NetworkModel,
    selector: &RowSelector,
    n: usize,
    seed: u64,
) -> Result<(Trace, GroundTruth)> {
    if n == 0 {
        return Err(Error::Shape("trace length must be at least 1".into()));
    }
    let generator = TraceGenerator::new(model.clone(), selector, seed)?;
    let trace = Trace {
        header: TraceHeader {
            seed: Some(seed),
            rng: Some(RNG_ID.to_string()),
            paths: Some(model.paths()),
            links: Some(model.links()),
            noise_sigma: Some(model.noise_sigma()),
        },
        observations: generator.take(n).collect(),
    };
    Ok((trace, model.ground_truth()))
}

impl Trace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let h = &self.header;
        if let Some(seed) = h.seed {
            writeln!(w, "# seed={seed}")?;
        }
        if let Some(rng) = &h.rng {
            writeln!(w, "# rng={rng}")?;
        }
        if let (Some(m), Some(n)) = (h.paths, h.links) {
            writeln!(w, "# m={m} N={n}")?;
        }
        if let Some(s) = h.noise_sigma {
            writeln!(w, "# noise_sigma={}", sig9(s))?;
        }
        writeln!(w, "k,z,y")?;
        for o in &self.observations {
            writeln!(w, "{},{},{}", o.k, o.z, sig9(o.y))?;
        }
        Ok(())
    }

    pub fn parse<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut trace = Trace::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {source}"), e))?;
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                parse_header_line(meta, &mut trace.header).map_err(err)?;
                continue;
            }
            if line == "k,z,y" {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let (Some(k), Some(z), Some(y), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err(format!("expected `k,z,y`, found {line:?}")));
            };
            let k = k.parse().map_err(|e| err(format!("k: {e}")))?;
            let z: usize = z.parse().map_err(|e| err(format!("z: {e}")))?;
            let y: f64 = y.parse().map_err(|e| err(format!("y: {e}")))?;
            if z == 0 {
                return Err(err("z is 1-based".into()));
            }
            if let Some(m) = trace.header.paths {
                if z > m {
                    return Err(err(format!("z = {z} outside 1..={m}")));
                }
            }
            if !y.is_finite() {
                return Err(err(format!("non-finite y = {y}")));
            }
            trace.observations.push(ProbeObservation::new(k, z, y));
        }
        Ok(trace)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::parse(std::io::BufReader::new(file), &path.display().to_string())
    }

    /// Errors on the first observation whose row is outside `1..=m`, naming
    /// its 1-based position in the stream.
    pub fn check_rows(&self, m: usize, source: &str) -> Result<()> {
        let offset = self.header_lines();
        for (i, o) in self.observations.iter().enumerate() {
            if o.z == 0 || o.z > m {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: offset + i + 1,
                    msg: format!("z = {} outside 1..={m}", o.z),
                });
            }
        }
        Ok(())
    }

    fn header_lines(&self) -> usize {
        let h = &self.header;
        // comment lines plus the `k,z,y` header as written by write_csv
        h.seed.is_some() as usize
            + h.rng.is_some() as usize
            + (h.paths.is_some() && h.links.is_some()) as usize
            + h.noise_sigma.is_some() as usize
            + 1
    }
}

fn parse_header_line(meta: &str, header: &mut TraceHeader) -> std::result::Result<(), String> {
    for token in meta.split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        match key {
            "seed" => header.seed = Some(value.parse().map_err(|e| format!("seed: {e}"))?),
            "rng" => header.rng = Some(value.to_string()),
            "m" => header.paths = Some(value.parse().map_err(|e| format!("m: {e}"))?),
            "N" => header.links = Some(value.parse().map_err(|e| format!("N: {e}"))?),
            "noise_sigma" => {
                header.noise_sigma = Some(value.parse().map_err(|e| format!("noise_sigma: {e}"))?)
            }
            _ => {}
        }
    }
    Ok(())
}
