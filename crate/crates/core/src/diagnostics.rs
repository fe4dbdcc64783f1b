//! Run health checks: error trajectories against an oracle, the initial-point
//! bias bound, the weighted-norm contraction bound and convergence detection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::engine::{StepSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::linalg::{
    dist_to_solution_affine, min_eig_weighted_gram, MeasurementSystem, WeightVector,
};

/// Slack on the contraction inequality.
pub const CONTRACTION_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPoint {
    pub k: u64,
    pub norm: f64,
    pub coords: DVector<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTrajectory {
    pub steps: Vec<ErrorPoint>,
}

impl ErrorTrajectory {
    pub fn at(&self, k: u64) -> Option<&ErrorPoint> {
        self.steps
            .binary_search_by_key(&k, |p| p.k)
            .ok()
            .map(|i| &self.steps[i])
    }

    /// Same layout as the engine trajectory: `k,x1,...,xN` holding signed
    /// per-coordinate errors.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[String]) -> std::io::Result<()> {
        write!(w, "k")?;
        for l in labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for p in &self.steps {
            write!(w, "{}", p.k)?;
            for c in p.coords.iter() {
                write!(w, ",{}", sig9(*c))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Distance of each recorded iterate from `oracle`.
pub fn error_trajectory(trajectory: &Trajectory, oracle: &DVector<f64>) -> Result<ErrorTrajectory> {
    let steps = trajectory
        .points
        .iter()
        .map(|(k, x)| {
            if x.len() != oracle.len() {
                return Err(Error::DimensionMismatch {
                    expected: oracle.len(),
                    got: x.len(),
                });
            }
            let coords = x - oracle;
            Ok(ErrorPoint {
                k: *k,
                norm: coords.norm(),
                coords,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ErrorTrajectory { steps })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma2Report {
    /// `dist(x0, v* + rowspace(A))`, the bias no run from `x0` can remove.
    pub distance: f64,
    pub delta: f64,
    pub pass: bool,
}

/// Checks whether the estimator's limit from `x0` is within `delta` of `v*`.
pub fn lemma2_bound(
    system: &MeasurementSystem,
    x0: &DVector<f64>,
    v_star: &DVector<f64>,
    delta: f64,
) -> Result<Lemma2Report> {
    let distance = dist_to_solution_affine(system, x0, v_star)?;
    Ok(Lemma2Report {
        distance,
        delta,
        pass: distance < delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionReport {
    /// `‖D_k ⋯ D_j‖_λ`, `D_m = I - η_m Λ A A'`.
    pub lhs: f64,
    /// `∏ (1 - η_m ζ)`.
    pub product_bound: f64,
    /// `exp(-ζ Σ η_m)`.
    pub rhs: f64,
    pub zeta: f64,
    /// Some `η_m ζ >= 1` in the range; the bound is not guaranteed there.
    pub step_too_large: bool,
    pub pass: bool,
}

/// Evaluates the weighted-norm contraction of the mean dynamics over steps
/// `j..=k`. An empty range (`j > k`) is the identity.
pub fn contraction_check(
    system: &MeasurementSystem,
    lambda: &WeightVector,
    schedule: &StepSchedule,
    j: u64,
    k: u64,
) -> Result<ContractionReport> {
    let zeta = min_eig_weighted_gram(system, lambda)?;
    let m = system.rows();
    let drift = DMatrix::from_diagonal(&DVector::from_row_slice(lambda.as_slice())) * system.gram();
    let mut product = DMatrix::<f64>::identity(m, m);
    let mut eta_sum = 0.0;
    let mut product_bound = 1.0;
    let mut step_too_large = false;
    for step in j..=k {
        let eta = schedule.eta(step);
        step_too_large |= eta * zeta >= 1.0;
        let d = DMatrix::identity(m, m) - &drift * eta;
        product = d * product;
        eta_sum += eta;
        product_bound *= 1.0 - eta * zeta;
    }
    // ‖M‖_λ = ‖Λ^{-1/2} M Λ^{1/2}‖_2
    let sqrt_l = lambda.sqrt_diag();
    let inv_sqrt_l = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        lambda.as_slice().iter().map(|l| 1.0 / l.sqrt()),
    ));
    let similar = inv_sqrt_l * product * sqrt_l;
    let lhs = similar.singular_values().max();
    let rhs = (-zeta * eta_sum).exp();
    Ok(ContractionReport {
        lhs,
        product_bound,
        rhs,
        zeta,
        step_too_large,
        pass: lhs <= rhs + CONTRACTION_SLACK,
    })
}

/// First recorded step at which every relative change
/// `‖x_{i+1} - x_i‖ / max(1, ‖x_i‖)` across the last `window` recorded
/// iterates is below `tol`.
pub fn convergence_detector(trajectory: &Trajectory, window: usize, tol: f64) -> Option<u64> {
    let window = window.max(2);
    let pts = &trajectory.points;
    if pts.len() < window {
        return None;
    }
    let changes: Vec<f64> = pts
        .windows(2)
        .map(|w| (&w[1].1 - &w[0].1).norm() / w[0].1.norm().max(1.0))
        .collect();
    // changes[i] sits between pts[i] and pts[i + 1]; a window ending at
    // pts[e] covers changes[e + 1 - window .. e]
    let mut run = 0usize;
    for (i, c) in changes.iter().enumerate() {
        if *c < tol {
            run += 1;
        } else {
            run = 0;
        }
        if run >= window - 1 {
            return Some(pts[i + 1].0);
        }
    }
    None
}

/// One line of the diagnostic report.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: String,
    pub threshold: String,
    /// `None` for informational metrics.
    pub pass: Option<bool>,
}

impl Metric {
    pub fn check(name: &str, value: f64, threshold: f64, pass: bool) -> Self {
        Metric {
            name: name.into(),
            value: sig9(value),
            threshold: sig9(threshold),
            pass: Some(pass),
        }
    }

    pub fn info(name: &str, value: impl Into<String>) -> Self {
        Metric {
            name: name.into(),
            value: value.into(),
            threshold: String::new(),
            pass: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticReport {
    pub metrics: Vec<Metric>,
}

impl DiagnosticReport {
    pub fn push(&mut self, m: Metric) {
        self.metrics.push(m);
    }

    pub fn all_pass(&self) -> bool {
        self.metrics.iter().all(|m| m.pass != Some(false))
    }

    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,value,threshold,pass")?;
        for m in &self.metrics {
            let pass = match m.pass {
                Some(true) => "true",
                Some(false) => "false",
                None => "na",
            };
            writeln!(w, "{},{},{},{pass}", m.name, m.value, m.threshold)?;
        }
        Ok(())
    }
}
