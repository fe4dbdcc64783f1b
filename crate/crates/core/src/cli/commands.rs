//! The four pipelines behind the `sak` subcommands. Each one is a pure
//! function of the resolved config (and input trace) down to the bytes it
//! writes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::config::ExperimentConfig;
use crate::diagnostics::{
    contraction_check, convergence_detector, error_trajectory, lemma2_bound, DiagnosticReport,
    Metric,
};
use crate::engine::{
    run_sak, EstimatorState, ProbeObservation, RecordingPolicy, SakRun, Trajectory,
};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::lifting::{estimable, generic_rank_check, lift_matrix, lift_observation, LiftedSystem};
use crate::linalg::{normalize_rows, projection_solution, MeasurementSystem};
use crate::network::{generate_trace, GroundTruth, Trace};

/// Affine-confinement tolerance used by `replay`.
pub const AFFINE_RESIDUAL_TOL: f64 = 1e-8;

pub const TRACE_FILE: &str = "trace.csv";
pub const TRUTH_FILE: &str = "truth.csv";

/// Per-invocation inputs that are not part of the experiment config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub trace: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Truncate the input trace to this many probes.
    pub max_steps: Option<usize>,
    /// Requested bias bound for the initial-point check in `replay`.
    pub delta: Option<f64>,
}

/// Observation stream plus optional ground truth.
#[derive(Clone, Debug)]
pub struct Input {
    pub trace: Trace,
    pub truth: Option<GroundTruth>,
    pub source: String,
}

/// Reads `--trace` (and its `truth.csv` sidecar when present), or simulates
/// the configured model in memory when no trace is given.
pub fn load_input(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Input> {
    let mut input = match &opts.trace {
        Some(path) => {
            let trace = Trace::read(path)?;
            let truth_path = opts.truth.clone().or_else(|| {
                let sibling = path.parent().unwrap_or(Path::new(".")).join(TRUTH_FILE);
                sibling.exists().then_some(sibling)
            });
            let truth = truth_path.map(|p| GroundTruth::read(&p)).transpose()?;
            Input {
                trace,
                truth,
                source: path.display().to_string(),
            }
        }
        None => {
            let (trace, truth) = generate_trace(&cfg.model()?, &cfg.selector, cfg.steps, cfg.seed)?;
            let truth = match &opts.truth {
                Some(p) => GroundTruth::read(p)?,
                None => truth,
            };
            Input {
                trace,
                truth: Some(truth),
                source: format!("<simulated seed={}>", cfg.seed),
            }
        }
    };
    if let Some(n) = opts.max_steps {
        input.trace.observations.truncate(n);
    }
    Ok(input)
}

fn check_trace_dims(input: &Input, m: usize, n: usize) -> Result<()> {
    let h = &input.trace.header;
    if h.paths.is_some_and(|p| p != m) || h.links.is_some_and(|l| l != n) {
        return Err(Error::config(
            "matrix",
            format!(
                "trace {} has m={:?} N={:?} but the matrix is {m}x{n}",
                input.source, h.paths, h.links
            ),
        ));
    }
    input.trace.check_rows(m, &input.source)?;
    if let Some(truth) = &input.truth {
        if truth.means.len() != n {
            return Err(Error::config(
                "matrix",
                format!(
                    "ground truth has {} links, matrix has {n}",
                    truth.means.len()
                ),
            ));
        }
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

fn write_trajectory<W: Write>(w: &mut W, t: &Trajectory, labels: &[String]) -> std::io::Result<()> {
    write!(w, "k")?;
    for l in labels {
        write!(w, ",{l}")?;
    }
    writeln!(w)?;
    for (k, x) in &t.points {
        write!(w, "{k}")?;
        for v in x.iter() {
            write!(w, ",{}", sig9(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// One row of a final-estimate report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub initial: f64,
    pub oracle: Option<f64>,
    pub estimate: f64,
    pub status: Option<&'static str>,
}

fn report_rows(
    ids: Vec<String>,
    initial: &DVector<f64>,
    oracle: Option<&DVector<f64>>,
    estimate: &DVector<f64>,
) -> Vec<ReportRow> {
    ids.into_iter()
        .enumerate()
        .map(|(j, id)| ReportRow {
            id,
            initial: initial[j],
            oracle: oracle.map(|o| o[j]),
            estimate: estimate[j],
            status: None,
        })
        .collect()
}

/// `id,initial,oracle_xstar,final,abs_err[,status]`; oracle columns are
/// dropped when no ground truth is available. Values use shortest
/// round-trip formatting so `abs_err` recomputes exactly from the file.
fn write_report<W: Write>(w: &mut W, rows: &[ReportRow]) -> std::io::Result<()> {
    let with_oracle = rows.first().is_some_and(|r| r.oracle.is_some());
    let with_status = rows.first().is_some_and(|r| r.status.is_some());
    write!(w, "id,initial")?;
    if with_oracle {
        write!(w, ",oracle_xstar")?;
    }
    write!(w, ",final")?;
    if with_oracle {
        write!(w, ",abs_err")?;
    }
    if with_status {
        write!(w, ",status")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(w, "{},{}", r.id, r.initial)?;
        if let Some(o) = r.oracle {
            write!(w, ",{o}")?;
        }
        write!(w, ",{}", r.estimate)?;
        if let Some(o) = r.oracle {
            write!(w, ",{}", (r.estimate - o).abs())?;
        }
        if let Some(s) = r.status {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Output of `simulate`.
#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub trace: Trace,
    pub truth: GroundTruth,
    pub trace_path: PathBuf,
    pub truth_path: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutput> {
    let model = cfg.model()?;
    let (trace, truth) = generate_trace(&model, &cfg.selector, cfg.steps, cfg.seed)?;
    create_out(&cfg.out)?;
    let trace_path = cfg.out.join(TRACE_FILE);
    let truth_path = cfg.out.join(TRUTH_FILE);
    write_file(&trace_path, |w| trace.write_csv(w))?;
    write_file(&truth_path, |w| truth.write_csv(w))?;
    Ok(SimulateOutput {
        trace,
        truth,
        trace_path,
        truth_path,
    })
}

/// Result of running the estimator over a stream.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub labels: Vec<String>,
    pub x0: DVector<f64>,
    pub run: SakRun,
    /// Closed-form limit from `x0`, when ground truth is known.
    pub oracle: Option<DVector<f64>>,
}

impl Estimate {
    pub fn final_estimate(&self) -> &DVector<f64> {
        self.run.state.x()
    }

    pub fn averaged_estimate(&self) -> Option<DVector<f64>> {
        self.run.state.averaged_estimate().ok()
    }

    /// `‖x_n - x*‖ / ‖x*‖`.
    pub fn relative_error(&self) -> Option<f64> {
        self.oracle
            .as_ref()
            .map(|o| (self.final_estimate() - o).norm() / o.norm())
    }
}

fn new_state(
    cfg: &ExperimentConfig,
    x0: DVector<f64>,
    force_average: bool,
) -> Result<EstimatorState> {
    let state = EstimatorState::new(x0, cfg.schedule)?;
    Ok(if cfg.average || force_average {
        state.with_averaging(cfg.burn_in)
    } else {
        state
    })
}

/// SAK over the raw measurement matrix; rows are normalized internally.
pub fn estimate_means(cfg: &ExperimentConfig, input: &Input) -> Result<Estimate> {
    estimate_means_with(cfg, input, false)
}

fn estimate_means_with(
    cfg: &ExperimentConfig,
    input: &Input,
    force_average: bool,
) -> Result<Estimate> {
    let system =
        normalize_rows(cfg.matrix.clone()).map_err(|e| Error::config("matrix", e.to_string()))?;
    check_trace_dims(input, system.rows(), system.cols())?;
    let oracle = match &input.truth {
        Some(t) => Some(projection_solution(
            &system,
            &cfg.x0,
            &(system.matrix() * t.mean_vector()),
        )?),
        None => None,
    };
    let state = new_state(cfg, cfg.x0.clone(), force_average)?;
    let run = run_sak(
        &system,
        state,
        input.trace.observations.iter().copied(),
        RecordingPolicy::with_stride(cfg.stride),
    )?;
    Ok(Estimate {
        labels: (1..=system.cols()).map(|j| format!("x{j}")).collect(),
        x0: cfg.x0.clone(),
        run,
        oracle,
    })
}

pub fn cmd_estimate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Estimate> {
    let input = load_input(cfg, opts)?;
    let est = estimate_means(cfg, &input)?;
    create_out(&cfg.out)?;
    write_file(&cfg.out.join("trajectory.csv"), |w| {
        write_trajectory(w, &est.run.trajectory, &est.labels)
    })?;
    let ids: Vec<String> = (1..=est.labels.len()).map(|j| j.to_string()).collect();
    let rows = report_rows(
        ids.clone(),
        &est.x0,
        est.oracle.as_ref(),
        est.final_estimate(),
    );
    write_file(&cfg.out.join("report.csv"), |w| write_report(w, &rows))?;
    if let (Some(avg_traj), Some(avg)) = (&est.run.averaged, est.averaged_estimate()) {
        write_file(&cfg.out.join("trajectory_avg.csv"), |w| {
            write_trajectory(w, avg_traj, &est.labels)
        })?;
        let rows = report_rows(ids, &est.x0, est.oracle.as_ref(), &avg);
        write_file(&cfg.out.join("report_avg.csv"), |w| write_report(w, &rows))?;
    }
    Ok(est)
}

/// Result of the lifted moment pipeline.
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    pub lifted: LiftedSystem,
    pub system: MeasurementSystem,
    pub estimable: Vec<bool>,
    pub estimate: Estimate,
}

/// SAK on `y^q` against the normalized lifted matrix, starting from the
/// monomials of the configured `x0`.
pub fn estimate_moments(cfg: &ExperimentConfig, input: &Input) -> Result<MomentEstimate> {
    let q = cfg.q;
    let raw = MeasurementSystem::new(cfg.matrix.clone())
        .map_err(|e| Error::config("matrix", e.to_string()))?;
    check_trace_dims(input, raw.rows(), raw.cols())?;
    match input.trace.header.noise_sigma {
        Some(0.0) => {}
        Some(s) if cfg.strict_noise => return Err(Error::NoiseInStrictMode(s)),
        None if cfg.strict_noise => {
            return Err(Error::config(
                "strict_noise",
                format!("trace {} does not record noise_sigma", input.source),
            ))
        }
        noise => {
            if q >= 2 {
                eprintln!(
                    "warning: lifting a trace with noise_sigma = {noise:?}; order-{q} estimates are biased \
                     (for q = 2 by +Var(W) on each path's squared delay)"
                );
            }
        }
    }
    let lifted = lift_matrix(&raw, q)?;
    if !generic_rank_check(&lifted) {
        return Err(Error::RankDeficient(format!(
            "lifted matrix at q = {q} is not full row rank"
        )));
    }
    let system = lifted.normalized()?;
    let x0 = lifted.lift_point(&cfg.x0)?;
    let oracle = match &input.truth {
        Some(t) => match t.moments(q) {
            Ok(m) => Some(projection_solution(&system, &x0, &(system.matrix() * m))?),
            Err(Error::UnsupportedOrder(_)) => {
                eprintln!("warning: no closed-form ground truth at q = {q}; oracle omitted");
                None
            }
            Err(e) => return Err(e),
        },
        None => None,
    };
    let observations = input
        .trace
        .observations
        .iter()
        .map(|o| {
            Ok(ProbeObservation {
                y: lift_observation(o.y, q)?,
                ..*o
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let run = run_sak(
        &system,
        new_state(cfg, x0.clone(), false)?,
        observations,
        RecordingPolicy::with_stride(cfg.stride),
    )?;
    let estimable = lifted
        .index_map()
        .iter()
        .map(|r| estimable(r, &raw))
        .collect::<Result<_>>()?;
    Ok(MomentEstimate {
        estimate: Estimate {
            labels: lifted.index_map().iter().map(ToString::to_string).collect(),
            x0,
            run,
            oracle,
        },
        lifted,
        system,
        estimable,
    })
}

pub fn cmd_moments(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<MomentEstimate> {
    let input = load_input(cfg, opts)?;
    let me = estimate_moments(cfg, &input)?;
    let est = &me.estimate;
    create_out(&cfg.out)?;
    write_file(&cfg.out.join("index_map.csv"), |w| {
        me.lifted.write_index_map_csv(w)
    })?;
    write_file(&cfg.out.join("moments_trajectory.csv"), |w| {
        write_trajectory(w, &est.run.trajectory, &est.labels)
    })?;
    let status = |rows: Vec<ReportRow>| -> Vec<ReportRow> {
        rows.into_iter()
            .zip(&me.estimable)
            .map(|(r, ok)| ReportRow {
                status: Some(if *ok { "ok" } else { "not-estimable" }),
                ..r
            })
            .collect()
    };
    let rows = status(report_rows(
        est.labels.clone(),
        &est.x0,
        est.oracle.as_ref(),
        est.final_estimate(),
    ));
    write_file(&cfg.out.join("moments_report.csv"), |w| {
        write_report(w, &rows)
    })?;
    if let (Some(avg_traj), Some(avg)) = (&est.run.averaged, est.averaged_estimate()) {
        write_file(&cfg.out.join("moments_trajectory_avg.csv"), |w| {
            write_trajectory(w, avg_traj, &est.labels)
        })?;
        let rows = status(report_rows(
            est.labels.clone(),
            &est.x0,
            est.oracle.as_ref(),
            &avg,
        ));
        write_file(&cfg.out.join("moments_report_avg.csv"), |w| {
            write_report(w, &rows)
        })?;
    }
    Ok(me)
}

/// Runs the estimator over the input and evaluates every diagnostic that
/// the available data supports.
pub fn replay(
    cfg: &ExperimentConfig,
    input: &Input,
    delta: Option<f64>,
) -> Result<(DiagnosticReport, Estimate)> {
    let est = estimate_means_with(cfg, input, true)?;
    let system = normalize_rows(cfg.matrix.clone())?;
    let mut report = DiagnosticReport::default();
    let n = est.run.state.steps();
    report.push(Metric::info("steps", n.to_string()));

    match (&input.truth, &est.oracle) {
        (Some(truth), Some(oracle)) => {
            let v_star = truth.mean_vector();
            let errors = error_trajectory(&est.run.trajectory, oracle)?;
            let first = errors.steps.first().map_or(0.0, |p| p.norm);
            let last = errors.steps.last().map_or(0.0, |p| p.norm);
            report.push(Metric::info("initial_error", sig9(first)));
            report.push(Metric::info("final_error", sig9(last)));
            report.push(Metric::info("final_rel_error", sig9(last / oracle.norm())));
            if let Some(avg) = est.averaged_estimate() {
                report.push(Metric::info(
                    "final_rel_error_avg",
                    sig9((avg - oracle).norm() / oracle.norm()),
                ));
            }
            let delta = delta.or(cfg.diagnostics.lemma2_delta);
            let l2 = lemma2_bound(&system, &cfg.x0, &v_star, delta.unwrap_or(f64::INFINITY))?;
            match delta {
                Some(d) => report.push(Metric::check("lemma2_distance", l2.distance, d, l2.pass)),
                None => report.push(Metric::info("lemma2_distance", sig9(l2.distance))),
            }
        }
        _ => {
            eprintln!(
                "warning: no ground truth for {}; skipping truth-dependent metrics",
                input.source
            );
        }
    }

    let residual = est.run.state.affine_residual(&system)?;
    report.push(Metric::check(
        "affine_residual",
        residual,
        AFFINE_RESIDUAL_TOL,
        residual <= AFFINE_RESIDUAL_TOL,
    ));

    let lambda = cfg.selector.stationary_weights()?;
    let last_step = n.clamp(1, cfg.diagnostics.contraction_steps) - 1;
    let c = contraction_check(&system, &lambda, &cfg.schedule, 0, last_step)?;
    report.push(Metric::info("zeta", sig9(c.zeta)));
    report.push(Metric::check("contraction", c.lhs, c.rhs, c.pass));
    if c.step_too_large {
        eprintln!("warning: eta * zeta >= 1 inside the contraction range");
    }

    let window = cfg.diagnostics.window;
    let tol = cfg.diagnostics.tol;
    let detect = |t: &Trajectory| {
        convergence_detector(t, window, tol).map_or_else(|| "none".to_string(), |k| k.to_string())
    };
    report.push(Metric::info(
        "convergence_step",
        detect(&est.run.trajectory),
    ));
    if let Some(avg) = &est.run.averaged {
        report.push(Metric::info("convergence_step_avg", detect(avg)));
    }
    Ok((report, est))
}

pub fn cmd_replay(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<DiagnosticReport> {
    let input = load_input(cfg, opts)?;
    let (report, est) = replay(cfg, &input, opts.delta)?;
    create_out(&cfg.out)?;
    write_file(&cfg.out.join("diagnostics.csv"), |w| report.write_csv(w))?;
    if let Some(oracle) = &est.oracle {
        let errors = error_trajectory(&est.run.trajectory, oracle)?;
        write_file(&cfg.out.join("error_trajectory.csv"), |w| {
            errors.write_csv(w, &est.labels)
        })?;
    }
    Ok(report)
}
