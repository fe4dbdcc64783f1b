//! Row-action estimators: the cyclic Kaczmarz sweep and its stochastic
//! approximation counterpart driven by single-row noisy observations.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, MeasurementSystem};

/// Step size sequence `η_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StepSchedule {
    /// `η_k = κ`, with `0 < κ < 2`.
    Constant { kappa: f64 },
    /// `η_k = c / (1 + k/τ)`: divergent sum, summable squares.
    Harmonic { c: f64, tau: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Harmonic { c: 1.0, tau: 50.0 }
    }
}

impl StepSchedule {
    pub fn constant(kappa: f64) -> Result<Self> {
        let s = StepSchedule::Constant { kappa };
        s.validate()?;
        Ok(s)
    }

    pub fn harmonic(c: f64, tau: f64) -> Result<Self> {
        let s = StepSchedule::Harmonic { c, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant { kappa } => {
                if !(kappa > 0.0 && kappa < 2.0) {
                    return Err(Error::StepOutOfRange(kappa));
                }
            }
            StepSchedule::Harmonic { c, tau } => {
                if !(c.is_finite() && c > 0.0 && tau.is_finite() && tau > 0.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "harmonic needs c > 0 and tau > 0, got c = {c}, tau = {tau}"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eta(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Constant { kappa } => kappa,
            StepSchedule::Harmonic { c, tau } => c / (1.0 + k as f64 / tau),
        }
    }

    /// Whether the schedule meets the conditions for almost-sure convergence.
    /// A constant step only settles into a noise-sized neighborhood of the limit.
    pub fn is_square_summable(&self) -> bool {
        matches!(self, StepSchedule::Harmonic { .. })
    }
}

/// One probe: 1-based row `z` and the scalar measurement `y` on that row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeObservation {
    pub k: u64,
    pub z: usize,
    pub y: f64,
}

impl ProbeObservation {
    pub fn new(k: u64, z: usize, y: f64) -> Self {
        ProbeObservation { k, z, y }
    }
}

/// Running mean of the iterates after an optional burn-in.
#[derive(Clone, Debug, PartialEq)]
struct RunningAverage {
    burn_in: u64,
    count: u64,
    mean: DVector<f64>,
}

impl RunningAverage {
    fn push(&mut self, k: u64, x: &DVector<f64>) {
        if k <= self.burn_in {
            return;
        }
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (m, xi) in self.mean.iter_mut().zip(x.iter()) {
            *m += (xi - *m) * w;
        }
    }
}

/// Mutable estimator state: current iterate, step count, schedule and
/// optional iterate average.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    x: DVector<f64>,
    x0: DVector<f64>,
    k: u64,
    schedule: StepSchedule,
    average: Option<RunningAverage>,
}

impl EstimatorState {
    pub fn new(x0: DVector<f64>, schedule: StepSchedule) -> Result<Self> {
        schedule.validate()?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial point"));
        }
        Ok(EstimatorState {
            x: x0.clone(),
            x0,
            k: 0,
            schedule,
            average: None,
        })
    }

    /// Enables iterate averaging over steps `burn_in + 1, burn_in + 2, ...`.
    pub fn with_averaging(mut self, burn_in: u64) -> Self {
        self.average = Some(RunningAverage {
            burn_in,
            count: 0,
            mean: DVector::zeros(self.x.len()),
        });
        self
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn steps(&self) -> u64 {
        self.k
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule
    }

    pub fn averaging_enabled(&self) -> bool {
        self.average.is_some()
    }

    fn check_system(&self, system: &MeasurementSystem) -> Result<()> {
        if !system.is_normalized() {
            return Err(Error::NotNormalized);
        }
        check_len(&self.x, system.cols())
    }

    /// `x <- x + η (target - <a_i, x>) a_i` on 0-based row `i`.
    #[inline]
    fn project_row(&mut self, system: &MeasurementSystem, i: usize, target: f64, eta: f64) {
        let gain = eta * (target - system.row_dot(i, &self.x));
        if gain != 0.0 {
            let row = system.matrix().row(i);
            for (xj, aj) in self.x.iter_mut().zip(row.iter()) {
                *xj += gain * aj;
            }
        }
        self.k += 1;
        if let Some(avg) = self.average.as_mut() {
            avg.push(self.k, &self.x);
        }
    }

    /// One deterministic Kaczmarz step on row `(k mod m) + 1`, where `b_i`
    /// stands for `<a_i, v*>`. Requires a constant schedule.
    pub fn cyclic_step(&mut self, system: &MeasurementSystem, b: &DVector<f64>) -> Result<()> {
        self.check_system(system)?;
        check_len(b, system.rows())?;
        let StepSchedule::Constant { kappa } = self.schedule else {
            return Err(Error::InvalidSchedule(
                "cyclic Kaczmarz uses a constant relaxation".into(),
            ));
        };
        let i = (self.k % system.rows() as u64) as usize;
        self.project_row(system, i, b[i], kappa);
        Ok(())
    }

    /// One stochastic-approximation step on the observed row. The
    /// observation must already be in the system's row scaling.
    pub fn sak_step(&mut self, system: &MeasurementSystem, obs: &ProbeObservation) -> Result<()> {
        self.check_system(system)?;
        if obs.z == 0 || obs.z > system.rows() {
            return Err(Error::RowIndexOutOfRange {
                z: obs.z,
                m: system.rows(),
            });
        }
        if !obs.y.is_finite() {
            return Err(Error::NonFiniteObservation(obs.y));
        }
        let eta = self.schedule.eta(self.k);
        self.project_row(system, obs.z - 1, obs.y, eta);
        Ok(())
    }

    /// Mean of the iterates recorded so far; the current iterate before any
    /// step has been averaged.
    pub fn averaged_estimate(&self) -> Result<DVector<f64>> {
        let avg = self.average.as_ref().ok_or(Error::AveragingDisabled)?;
        if avg.count == 0 {
            return Ok(self.x.clone());
        }
        Ok(avg.mean.clone())
    }

    /// `α_k = (AA')^{-1} A (x_k - x0)`, the row-space coordinates of the
    /// displacement from the initial point.
    pub fn alpha_coordinates(&self, system: &MeasurementSystem) -> Result<DVector<f64>> {
        check_len(&self.x, system.cols())?;
        let factor = system.factor()?;
        Ok(factor.solve(&(system.matrix() * (&self.x - &self.x0))))
    }

    /// `‖x0 + A'α_k - x_k‖`; zero up to rounding while the iterate stays in
    /// `x0 + rowspace(A)`.
    pub fn affine_residual(&self, system: &MeasurementSystem) -> Result<f64> {
        let alpha = self.alpha_coordinates(system)?;
        Ok((&self.x0 + system.matrix().transpose() * alpha - &self.x).norm())
    }
}

/// Runs `sweeps` full cycles of deterministic Kaczmarz with relaxation `kappa`.
pub fn run_cyclic(
    system: &MeasurementSystem,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    kappa: f64,
    sweeps: usize,
) -> Result<DVector<f64>> {
    let mut state = EstimatorState::new(x0.clone(), StepSchedule::constant(kappa)?)?;
    for _ in 0..sweeps * system.rows() {
        state.cyclic_step(system, b)?;
    }
    Ok(state.x)
}

/// Which step indices get written to a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordingPolicy {
    /// Every step up to and including this one is recorded.
    pub dense_until: u64,
    /// After `dense_until`, every `stride`-th step is recorded.
    pub stride: u64,
}

impl Default for RecordingPolicy {
    fn default() -> Self {
        RecordingPolicy {
            dense_until: 1000,
            stride: 100,
        }
    }
}

impl RecordingPolicy {
    pub fn with_stride(stride: u64) -> Self {
        RecordingPolicy {
            stride: stride.max(1),
            ..Default::default()
        }
    }

    pub fn should_record(&self, k: u64) -> bool {
        k <= self.dense_until || k.is_multiple_of(self.stride)
    }
}

/// Recorded `(k, x_k)` pairs, `k` strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<(u64, DVector<f64>)>,
}

impl Trajectory {
    pub fn push(&mut self, k: u64, x: &DVector<f64>) {
        if self.points.last().is_some_and(|(last, _)| *last >= k) {
            return;
        }
        self.points.push((k, x.clone()));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<&(u64, DVector<f64>)> {
        self.points.last()
    }

    /// Iterate recorded at step `k`, if any.
    pub fn at(&self, k: u64) -> Option<&DVector<f64>> {
        self.points
            .binary_search_by_key(&k, |(kk, _)| *kk)
            .ok()
            .map(|i| &self.points[i].1)
    }
}

/// Output of [`run_sak`]: the final state plus raw and averaged trajectories.
#[derive(Clone, Debug)]
pub struct SakRun {
    pub state: EstimatorState,
    pub trajectory: Trajectory,
    pub averaged: Option<Trajectory>,
}

/// Drives an estimator over raw observations, rescaling each `y` by the
/// system's row scale and recording at `policy`. The initial point is
/// recorded as step 0 and the final step is always recorded.
pub fn run_sak<I>(
    system: &MeasurementSystem,
    mut state: EstimatorState,
    observations: I,
    policy: RecordingPolicy,
) -> Result<SakRun>
where
    I: IntoIterator<Item = ProbeObservation>,
{
    let mut trajectory = Trajectory::default();
    let mut averaged = state.averaging_enabled().then(Trajectory::default);
    trajectory.push(state.steps(), state.x());
    if let Some(avg) = averaged.as_mut() {
        avg.push(state.steps(), &state.averaged_estimate()?);
    }
    for raw in observations {
        let y = system.scale_observation(raw.z, raw.y)?;
        state.sak_step(system, &ProbeObservation { y, ..raw })?;
        if policy.should_record(state.steps()) {
            trajectory.push(state.steps(), state.x());
            if let Some(avg) = averaged.as_mut() {
                avg.push(state.steps(), &state.averaged_estimate()?);
            }
        }
    }
    trajectory.push(state.steps(), state.x());
    if let Some(avg) = averaged.as_mut() {
        avg.push(state.steps(), &state.averaged_estimate()?);
    }
    Ok(SakRun {
        state,
        trajectory,
        averaged,
    })
}
