//! Experiment configuration.
//!
//! Configs are TOML. A file may start from a bundled preset with
//! `preset = "<name>"` and override any key; tables merge key by key, every
//! other value replaces the preset's. Relative paths resolve against the
//! config file's directory.
//!
//! Keys: `matrix.{path|inline}`, `selector.{kind, weights, markov, initial}`,
//! `links` (array of delay laws), `noise_sigma`, `schedule`, `x0.{kind, path,
//! values}`, `steps`, `seed`, `q`, `out`, `stride`, `average`, `burn_in`,
//! `strict_noise`, `diagnostics.{lemma2_delta, window, tol, contraction_steps}`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use toml::{Table, Value};

use crate::engine::StepSchedule;
use crate::error::{Error, Result};
use crate::linalg::{load_matrix_csv, matrix_from_rows, parse_matrix_csv, WeightVector};
use crate::network::{DelayDistribution, NetworkModel, RowSelector};

pub const REFERENCE_PRESET: &str = "paper-6x13";

const PRESETS: &[(&str, &str)] = &[(
    REFERENCE_PRESET,
    include_str!("../../presets/paper-6x13.toml"),
)];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[allow(dead_code)]
    preset: Option<String>,
    matrix: Option<RawMatrix>,
    selector: Option<RawSelector>,
    links: Option<Vec<DelayDistribution>>,
    noise_sigma: Option<f64>,
    schedule: Option<StepSchedule>,
    x0: Option<RawX0>,
    steps: Option<usize>,
    seed: Option<u64>,
    q: Option<u32>,
    out: Option<PathBuf>,
    stride: Option<u64>,
    average: Option<bool>,
    burn_in: Option<u64>,
    strict_noise: Option<bool>,
    diagnostics: Option<RawDiagnostics>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    path: Option<PathBuf>,
    inline: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSelector {
    kind: String,
    weights: Option<Vec<f64>>,
    markov: Option<Vec<Vec<f64>>>,
    initial: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawX0 {
    kind: String,
    path: Option<PathBuf>,
    values: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiagnostics {
    lemma2_delta: Option<f64>,
    window: Option<usize>,
    tol: Option<f64>,
    contraction_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsConfig {
    pub lemma2_delta: Option<f64>,
    pub window: usize,
    pub tol: f64,
    pub contraction_steps: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            lemma2_delta: None,
            window: 100,
            tol: 1e-3,
            contraction_steps: 200,
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub matrix: DMatrix<f64>,
    pub selector: RowSelector,
    pub links: Option<Vec<DelayDistribution>>,
    pub noise_sigma: f64,
    pub schedule: StepSchedule,
    pub x0: DVector<f64>,
    pub steps: usize,
    pub seed: u64,
    pub q: u32,
    pub out: PathBuf,
    pub stride: u64,
    pub average: bool,
    pub burn_in: u64,
    pub strict_noise: bool,
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    /// Loads a config file, or a bundled preset when `spec` names one and no
    /// such file exists.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if let Some(src) = preset_source(spec) {
                return Self::from_toml_str(src, Path::new("."));
            }
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name)
            .ok_or_else(|| Error::config("preset", format!("unknown preset {name:?}")))?;
        Self::from_toml_str(src, Path::new("."))
    }

    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(error_key(&e), e.message()))?;
        if let Some(name) = table.get("preset").cloned() {
            let name = name
                .as_str()
                .ok_or_else(|| Error::config("preset", "must be a string"))?
                .to_string();
            let src = preset_source(&name)
                .ok_or_else(|| Error::config("preset", format!("unknown preset {name:?}")))?;
            let mut merged: Table = src.parse().expect("bundled preset parses");
            merge(&mut merged, table);
            table = merged;
        }
        let raw: RawConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_key(&e), e.message()))?;
        Self::resolve(raw, base)
    }

    fn resolve(raw: RawConfig, base: &Path) -> Result<Self> {
        let matrix = match raw.matrix {
            Some(RawMatrix {
                path: Some(p),
                inline: None,
            }) => load_matrix_csv(&base.join(p)).map_err(|e| rekey("matrix.path", e))?,
            Some(RawMatrix {
                path: None,
                inline: Some(rows),
            }) => matrix_from_rows(&rows).map_err(|e| rekey("matrix.inline", e))?,
            Some(_) => {
                return Err(Error::config(
                    "matrix",
                    "give exactly one of `path` or `inline`",
                ))
            }
            None => return Err(Error::config("matrix", "missing")),
        };
        let (m, n) = matrix.shape();

        let selector = match raw.selector {
            None => RowSelector::uniform(m),
            Some(s) => resolve_selector(s, m)?,
        };

        if let Some(links) = &raw.links {
            if links.len() != n {
                return Err(Error::config(
                    "links",
                    format!("{} link delay laws for {n} matrix columns", links.len()),
                ));
            }
            for (i, d) in links.iter().enumerate() {
                d.validate().map_err(|e| rekey(&format!("links[{i}]"), e))?;
            }
        }

        let noise_sigma = raw.noise_sigma.unwrap_or(1.0);
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }

        let schedule = raw.schedule.unwrap_or_default();
        schedule.validate().map_err(|e| rekey("schedule", e))?;

        let x0 = match raw.x0 {
            None => DVector::zeros(n),
            Some(x) => resolve_x0(x, n, base)?,
        };

        let q = raw.q.unwrap_or(1);
        if q == 0 {
            return Err(Error::config("q", "moment order must be >= 1"));
        }
        let steps = raw.steps.unwrap_or(100_000);
        if steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        let stride = raw.stride.unwrap_or(100);
        if stride == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }

        let d = raw.diagnostics.unwrap_or_default();
        let defaults = DiagnosticsConfig::default();
        let diagnostics = DiagnosticsConfig {
            lemma2_delta: d.lemma2_delta,
            window: d.window.unwrap_or(defaults.window),
            tol: d.tol.unwrap_or(defaults.tol),
            contraction_steps: d.contraction_steps.unwrap_or(defaults.contraction_steps),
        };
        if diagnostics.window < 2 {
            return Err(Error::config("diagnostics.window", "must be >= 2"));
        }

        Ok(ExperimentConfig {
            matrix,
            selector,
            links: raw.links,
            noise_sigma,
            schedule,
            x0,
            steps,
            seed: raw.seed.unwrap_or(0),
            q,
            out: raw.out.unwrap_or_else(|| PathBuf::from("out")),
            stride,
            average: raw.average.unwrap_or(false),
            burn_in: raw.burn_in.unwrap_or(0),
            strict_noise: raw.strict_noise.unwrap_or(false),
            diagnostics,
        })
    }

    /// The simulated network; needs `links`.
    pub fn model(&self) -> Result<NetworkModel> {
        let links = self
            .links
            .clone()
            .ok_or_else(|| Error::config("links", "simulation needs one delay law per link"))?;
        NetworkModel::new(self.matrix.clone(), links, self.noise_sigma)
            .map_err(|e| rekey("matrix", e))
    }
}

fn resolve_selector(s: RawSelector, m: usize) -> Result<RowSelector> {
    match s.kind.as_str() {
        "uniform" => Ok(RowSelector::uniform(m)),
        "weights" => {
            let w = s
                .weights
                .ok_or_else(|| Error::config("selector.weights", "missing"))?;
            if w.len() != m {
                return Err(Error::config(
                    "selector.weights",
                    format!("{} weights for {m} rows", w.len()),
                ));
            }
            WeightVector::from_unnormalized(w)
                .map(RowSelector::Iid)
                .map_err(|e| rekey("selector.weights", e))
        }
        "markov" => {
            let rows = s
                .markov
                .ok_or_else(|| Error::config("selector.markov", "missing transition matrix"))?;
            let p = matrix_from_rows(&rows).map_err(|e| rekey("selector.markov", e))?;
            if p.nrows() != m {
                return Err(Error::config(
                    "selector.markov",
                    format!("{}x{} transition matrix for {m} rows", p.nrows(), p.ncols()),
                ));
            }
            RowSelector::markov(p, s.initial.unwrap_or(1)).map_err(|e| rekey("selector.markov", e))
        }
        other => Err(Error::config(
            "selector.kind",
            format!("unknown selector {other:?}; expected uniform, weights or markov"),
        )),
    }
}

fn resolve_x0(x: RawX0, n: usize, base: &Path) -> Result<DVector<f64>> {
    let values = match x.kind.as_str() {
        "zeros" => vec![0.0; n],
        "inline" => x
            .values
            .ok_or_else(|| Error::config("x0.values", "missing"))?,
        "file" => {
            let p = x.path.ok_or_else(|| Error::config("x0.path", "missing"))?;
            let full = base.join(&p);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| Error::io(format!("reading {}", full.display()), e))?;
            let mat = parse_matrix_csv(&text, &full.display().to_string())
                .map_err(|e| rekey("x0.path", e))?;
            mat.iter().copied().collect()
        }
        other => {
            return Err(Error::config(
                "x0.kind",
                format!("unknown kind {other:?}; expected zeros, inline or file"),
            ))
        }
    };
    if values.len() != n {
        return Err(Error::config(
            "x0",
            format!("{} entries for {n} columns", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("x0", "entries must be finite"));
    }
    Ok(DVector::from_vec(values))
}

fn rekey(key: &str, e: Error) -> Error {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

fn error_key(e: &toml::de::Error) -> String {
    e.span()
        .map(|s| format!("config (bytes {}..{})", s.start, s.end))
        .unwrap_or_else(|| "config".to_string())
}

/// Deep merge; a table whose `kind` changes is replaced rather than merged.
fn merge(base: &mut Table, overrides: Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o))
                if o.get("kind").is_none_or(|kind| b.get("kind") == Some(kind)) =>
            {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
