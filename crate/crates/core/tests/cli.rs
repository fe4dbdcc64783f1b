use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sak(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sak"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn sak")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Parses a report into (header, rows of string cells).
fn csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

#[test]
fn simulate_writes_seeded_trace() {
    let t = TempDir::new().unwrap();
    let o = sak(
        &["simulate", "--steps", "1000", "--seed", "7", "--out", "s"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = read(t.path(), "s/trace.csv");
    assert!(trace.starts_with("# seed=7\n"));
    let data: Vec<&str> = trace
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(data.len(), 1000);
    assert!(data[999].starts_with("999,"));
    assert!(read(t.path(), "s/truth.csv").starts_with("link,mean,second_moment\n"));
}

#[test]
fn invalid_markov_matrix_exits_2_naming_key() {
    let t = TempDir::new().unwrap();
    write_config(
        t.path(),
        "bad.toml",
        "preset = \"paper-6x13\"\n[selector]\nkind = \"markov\"\nmarkov = [[0.5, 0.6, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0], [0, 0, 0, 1, 0, 0], [0, 0, 0, 0, 1, 0], [0, 0, 0, 0, 0, 1], [1, 0, 0, 0, 0, 0]]\n",
    );
    let o = sak(
        &["simulate", "--config", "bad.toml", "--steps", "10"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("selector.markov"), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let t = TempDir::new().unwrap();
    for out in ["a", "b"] {
        for cmd in ["simulate", "estimate", "moments"] {
            let o = sak(
                &[
                    cmd,
                    "--steps",
                    "3000",
                    "--seed",
                    "11",
                    "--q",
                    "2",
                    "--average",
                    "--out",
                    out,
                ],
                t.path(),
            );
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        }
    }
    let mut files: Vec<_> = fs::read_dir(t.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert!(files.len() >= 10, "{files:?}");
    for f in files {
        assert_eq!(
            fs::read(t.path().join("a").join(&f)).unwrap(),
            fs::read(t.path().join("b").join(&f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn trace_round_trips_through_estimate() {
    let t = TempDir::new().unwrap();
    assert_eq!(
        sak(
            &["simulate", "--steps", "2000", "--seed", "5", "--out", "s"],
            t.path()
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        sak(
            &["estimate", "--steps", "2000", "--seed", "5", "--out", "direct"],
            t.path()
        )
        .status
        .code(),
        Some(0)
    );
    let o = sak(
        &["estimate", "--trace", "s/trace.csv", "--out", "replayed"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // in-memory run and file round trip differ only by 9-digit rounding of y
    let (_, direct) = csv(&read(t.path(), "direct/report.csv"));
    let (_, replayed) = csv(&read(t.path(), "replayed/report.csv"));
    for (d, r) in direct.iter().zip(&replayed) {
        let a: f64 = d[3].parse().unwrap();
        let b: f64 = r[3].parse().unwrap();
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        assert_eq!(d[2], r[2]);
    }
}

#[test]
fn report_abs_err_recomputes() {
    let t = TempDir::new().unwrap();
    let o = sak(
        &["estimate", "--steps", "5000", "--seed", "2", "--out", "e"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv(&read(t.path(), "e/report.csv"));
    assert_eq!(
        header,
        ["id", "initial", "oracle_xstar", "final", "abs_err"]
    );
    assert_eq!(rows.len(), 13);
    for r in rows {
        let v: Vec<f64> = r[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(((v[2] - v[1]).abs() - v[3]).abs() <= 1e-9);
    }
}

#[test]
fn report_omits_oracle_without_sidecar() {
    let t = TempDir::new().unwrap();
    sak(&["simulate", "--steps", "500", "--out", "s"], t.path());
    fs::remove_file(t.path().join("s/truth.csv")).unwrap();
    let o = sak(
        &["estimate", "--trace", "s/trace.csv", "--out", "e"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(read(t.path(), "e/report.csv").starts_with("id,initial,final\n"));
}

#[test]
fn zero_noise_run_recovers_reachable_truth() {
    // x0 = 0 puts v* in x0 + rowspace(A) whenever v* is itself in the row space
    let t = TempDir::new().unwrap();
    write_config(
        t.path(),
        "c.toml",
        "matrix = { inline = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]] }\n\
         noise_sigma = 0.0\n\
         steps = 200000\n\
         schedule = { kind = \"constant\", kappa = 1.0 }\n\
         [[links]]\nkind = \"deterministic\"\nvalue = 3.0\n\
         [[links]]\nkind = \"deterministic\"\nvalue = 5.0\n\
         [[links]]\nkind = \"deterministic\"\nvalue = 4.0\n\
         [[links]]\nkind = \"deterministic\"\nvalue = 2.0\n",
    );
    let o = sak(&["estimate", "--config", "c.toml", "--out", "e"], t.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = csv(&read(t.path(), "e/report.csv"));
    // v* = (3, 5, 4, 2) has v*_1 - v*_2 + v*_3 - v*_4 = 0, so it lies in rowspace(A)
    for (r, truth) in rows.iter().zip([3.0, 5.0, 4.0, 2.0]) {
        let fin: f64 = r[3].parse().unwrap();
        assert!((fin - truth).abs() < 1e-3, "{fin} vs {truth}");
    }
}

#[test]
fn out_of_range_row_names_the_line() {
    let t = TempDir::new().unwrap();
    fs::write(
        t.path().join("bad.csv"),
        "# m=6 N=13\nk,z,y\n0,1,10\n1,9,1.5\n",
    )
    .unwrap();
    let o = sak(&["estimate", "--trace", "bad.csv", "--out", "e"], t.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("bad.csv:4"), "{}", stderr(&o));
}

#[test]
fn trace_dimension_mismatch_is_a_config_error() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("t.csv"), "# m=3 N=4\nk,z,y\n0,1,10\n").unwrap();
    let o = sak(&["estimate", "--trace", "t.csv", "--out", "e"], t.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("matrix"));
}

#[test]
fn moments_report_flags_non_estimable_columns() {
    let t = TempDir::new().unwrap();
    let o = sak(
        &["moments", "--q", "2", "--steps", "2000", "--out", "m"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert_eq!(read(t.path(), "m/index_map.csv").lines().count(), 92);
    let (header, rows) = csv(&read(t.path(), "m/moments_report.csv"));
    assert_eq!(header.last().unwrap(), "status");
    assert_eq!(rows.len(), 91);
    let status = |id: &str| {
        rows.iter()
            .find(|r| r[0] == id)
            .unwrap()
            .last()
            .unwrap()
            .clone()
    };
    assert_eq!(status("X1*X7"), "not-estimable");
    for id in ["X1^2", "X4^2", "X3*X10", "X8*X12"] {
        assert_eq!(status(id), "ok");
    }
}

#[test]
fn strict_noise_rejects_noisy_trace() {
    let t = TempDir::new().unwrap();
    let o = sak(
        &[
            "moments",
            "--q",
            "2",
            "--steps",
            "100",
            "--strict-noise",
            "--out",
            "m",
        ],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise"));
}

#[test]
fn first_order_moments_match_estimate() {
    let t = TempDir::new().unwrap();
    sak(
        &["estimate", "--steps", "4000", "--seed", "3", "--out", "e"],
        t.path(),
    );
    sak(
        &[
            "moments", "--q", "1", "--steps", "4000", "--seed", "3", "--out", "m",
        ],
        t.path(),
    );
    let (_, e) = csv(&read(t.path(), "e/report.csv"));
    let (_, m) = csv(&read(t.path(), "m/moments_report.csv"));
    assert_eq!(e.len(), m.len());
    for (j, (a, b)) in e.iter().zip(&m).enumerate() {
        assert_eq!(b[0], format!("X{}", j + 1));
        assert_eq!(a[1..], b[1..5]);
    }
    let te = read(t.path(), "e/trajectory.csv");
    let tm = read(t.path(), "m/moments_trajectory.csv");
    assert_eq!(
        te.lines().skip(1).collect::<Vec<_>>(),
        tm.lines().skip(1).collect::<Vec<_>>()
    );
}

#[test]
fn replay_healthy_run_passes() {
    let t = TempDir::new().unwrap();
    sak(
        &["simulate", "--steps", "100000", "--seed", "4", "--out", "s"],
        t.path(),
    );
    let o = sak(
        &[
            "replay",
            "--trace",
            "s/trace.csv",
            "--delta",
            "20",
            "--out",
            "r",
        ],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read(t.path(), "r/diagnostics.csv");
    assert!(!report.contains(",false"), "{report}");
    for name in [
        "lemma2_distance",
        "affine_residual",
        "contraction",
        "convergence_step_avg",
    ] {
        assert!(report.contains(name), "{name}");
    }
    assert!(read(t.path(), "r/error_trajectory.csv").starts_with("k,x1,x2,"));
}

#[test]
fn replay_tight_delta_exits_3() {
    let t = TempDir::new().unwrap();
    sak(&["simulate", "--steps", "500", "--out", "s"], t.path());
    let o = sak(
        &[
            "replay",
            "--trace",
            "s/trace.csv",
            "--delta",
            "1",
            "--out",
            "r",
        ],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(read(t.path(), "r/diagnostics.csv").contains("lemma2_distance,12.5948256,1,false"));
}

#[test]
fn replay_single_probe_reports_no_convergence() {
    let t = TempDir::new().unwrap();
    sak(&["simulate", "--steps", "1", "--out", "s"], t.path());
    let o = sak(
        &["replay", "--trace", "s/trace.csv", "--out", "r"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(read(t.path(), "r/diagnostics.csv").contains("convergence_step,none,,na"));
}

#[test]
fn replay_without_sidecar_warns_and_skips() {
    let t = TempDir::new().unwrap();
    sak(&["simulate", "--steps", "300", "--out", "s"], t.path());
    fs::remove_file(t.path().join("s/truth.csv")).unwrap();
    let o = sak(
        &["replay", "--trace", "s/trace.csv", "--out", "r"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    let report = read(t.path(), "r/diagnostics.csv");
    assert!(!report.contains("lemma2"));
    assert!(report.contains("affine_residual"));
}

#[test]
fn seed_batch_writes_one_directory_per_seed() {
    let t = TempDir::new().unwrap();
    let o = sak(
        &[
            "estimate", "--seeds", "3..5", "--steps", "1000", "--out", "b",
        ],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = read(t.path(), "b/batch_summary.csv");
    assert_eq!(summary.lines().count(), 4);
    for s in 3..=5 {
        assert!(t.path().join(format!("b/seed-{s}/report.csv")).exists());
        assert!(summary.contains(&format!("\n{s},")));
    }
    // each replicate equals the single-seed run
    sak(
        &[
            "estimate", "--seed", "4", "--steps", "1000", "--out", "single",
        ],
        t.path(),
    );
    assert_eq!(
        read(t.path(), "b/seed-4/report.csv"),
        read(t.path(), "single/report.csv")
    );
}

#[test]
fn missing_config_is_io_error() {
    let t = TempDir::new().unwrap();
    let o = sak(&["estimate", "--config", "absent.toml"], t.path());
    assert_eq!(o.status.code(), Some(4));
}
