//! Experiment specification: JSON config file, command-line overlay and
//! validation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use repeater_core::metrics::DEFAULT_BURN_IN_FRACTION;
use repeater_core::model::{validate_config, RawConfig};
use repeater_core::{Protocol, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_SAMPLE_EVERY: u64 = 1000;
pub const DEFAULT_OUTPUT_DIR: &str = "out";
pub const OUTPUT_DIR_ENV: &str = "REPEATER_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub const ALL: [Format; 2] = [Format::Csv, Format::Json];
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

/// Whether the spec describes a single configuration or an M-sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Sweep,
}

/// A validated experiment. Everything except the output directory is echoed
/// into each output file, so moving the output does not change its bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub base: SimConfig,
    pub sweep: Option<Vec<usize>>,
    pub protocols: Vec<Protocol>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub formats: Vec<Format>,
    pub sample_every: u64,
    pub burn_in_fraction: f64,
}

impl ExperimentSpec {
    /// The M values to run: the sweep if present, otherwise the base M.
    pub fn m_values(&self) -> Vec<usize> {
        match &self.sweep {
            Some(ms) => ms.clone(),
            None => vec![self.base.m_per_node],
        }
    }

    pub fn cell_config(&self, protocol: Protocol, m: usize) -> SimConfig {
        SimConfig {
            protocol,
            m_per_node: m,
            ..self.base.clone()
        }
    }

    pub fn wants(&self, format: Format) -> bool {
        self.formats.contains(&format)
    }

    /// Single-line JSON used for provenance headers.
    pub fn provenance(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError {
    pub path: String,
    pub message: String,
}

impl SpecError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}", join_errors(.0))]
    Invalid(Vec<SpecError>),
}

fn join_errors(errors: &[SpecError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Every settable field, unset by default. Files and flags each produce one
/// and the flag layer is applied on top of the file layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecLayer {
    pub protocols: Option<Vec<Protocol>>,
    pub n_repeaters: Option<i64>,
    pub m_per_node: Option<i64>,
    pub p_success: Option<f64>,
    pub t0_seconds: Option<f64>,
    pub l0_meters: Option<f64>,
    pub max_slots: Option<i64>,
    pub target_completions: Option<i64>,
    pub seed: Option<u64>,
    pub replications: Option<i64>,
    pub sweep: Option<Vec<i64>>,
    pub output_dir: Option<PathBuf>,
    pub formats: Option<Vec<Format>>,
    pub sample_every: Option<i64>,
    pub burn_in_fraction: Option<f64>,
}

macro_rules! overlay_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl SpecLayer {
    /// Applies `top` over `self`. A stop condition given in `top` replaces
    /// both stop fields of `self`, so a flag can switch a file's stop kind.
    pub fn overlay(mut self, top: &SpecLayer) -> SpecLayer {
        if top.max_slots.is_some() || top.target_completions.is_some() {
            self.max_slots = None;
            self.target_completions = None;
        }
        overlay_fields!(self, top; protocols, n_repeaters, m_per_node, p_success, t0_seconds,
            l0_meters, max_slots, target_completions, seed, replications, sweep, output_dir,
            formats, sample_every, burn_in_fraction);
        self
    }

    pub fn from_file(path: &Path) -> Result<SpecLayer, ParseError> {
        let text = fs::read_to_string(path).map_err(|source| ParseError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|source| ParseError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        SpecLayer::from_json(&value).map_err(ParseError::Invalid)
    }

    /// Reads a flat JSON object. Errors carry the offending key path.
    pub fn from_json(value: &Value) -> Result<SpecLayer, Vec<SpecError>> {
        let obj = value
            .as_object()
            .ok_or_else(|| vec![SpecError::new("$", "expected a JSON object")])?;
        let mut layer = SpecLayer::default();
        let mut errors = Vec::new();
        for (key, v) in obj {
            if let Err(e) = layer.set_json(key, v) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(layer)
        } else {
            Err(errors)
        }
    }

    fn set_json(&mut self, key: &str, v: &Value) -> Result<(), SpecError> {
        match key {
            "protocol" | "protocols" => self.protocols = Some(json_protocols(key, v)?),
            "n_repeaters" => self.n_repeaters = Some(json_int(key, v)?),
            "m_per_node" => self.m_per_node = Some(json_int(key, v)?),
            "p_success" => self.p_success = Some(json_number(key, v)?),
            "t0_seconds" => self.t0_seconds = Some(json_number(key, v)?),
            "l0_meters" => self.l0_meters = Some(json_number(key, v)?),
            "max_slots" => self.max_slots = Some(json_int(key, v)?),
            "target_completions" => self.target_completions = Some(json_int(key, v)?),
            "seed" => {
                self.seed = Some(
                    v.as_u64()
                        .ok_or_else(|| SpecError::new(key, "expected a non-negative integer"))?,
                )
            }
            "replications" => self.replications = Some(json_int(key, v)?),
            "sweep" => {
                let items = v
                    .as_array()
                    .ok_or_else(|| SpecError::new(key, "expected an array"))?;
                let ms = items
                    .iter()
                    .enumerate()
                    .map(|(i, x)| json_int(&format!("{key}[{i}]"), x))
                    .collect::<Result<_, _>>()?;
                self.sweep = Some(ms);
            }
            "output_dir" => {
                let s = v
                    .as_str()
                    .ok_or_else(|| SpecError::new(key, "expected a string"))?;
                self.output_dir = Some(PathBuf::from(s));
            }
            "formats" => {
                let items = v
                    .as_array()
                    .ok_or_else(|| SpecError::new(key, "expected an array"))?;
                let fs = items
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let path = format!("{key}[{i}]");
                        x.as_str()
                            .ok_or_else(|| SpecError::new(&path, "expected a string"))?
                            .parse::<Format>()
                            .map_err(|m| SpecError::new(&path, m))
                    })
                    .collect::<Result<_, _>>()?;
                self.formats = Some(fs);
            }
            "sample_every" => self.sample_every = Some(json_int(key, v)?),
            "burn_in_fraction" => self.burn_in_fraction = Some(json_number(key, v)?),
            _ => return Err(SpecError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Validates the merged layer into a spec for the given mode.
    pub fn build(&self, mode: Mode) -> Result<ExperimentSpec, ParseError> {
        let mut errors = Vec::new();

        let mut protocols = self
            .protocols
            .clone()
            .unwrap_or_else(|| Protocol::ALL.to_vec());
        dedup_sorted(&mut protocols);
        if protocols.is_empty() {
            errors.push(SpecError::new(
                "protocol",
                "at least one protocol is required",
            ));
        }
        let mut formats = self.formats.clone().unwrap_or_else(|| Format::ALL.to_vec());
        dedup_sorted(&mut formats);
        if formats.is_empty() {
            errors.push(SpecError::new("formats", "at least one format is required"));
        }

        let sweep = match (mode, &self.sweep) {
            (Mode::Run, Some(_)) => {
                errors.push(SpecError::new(
                    "sweep",
                    "a sweep requires the sweep subcommand",
                ));
                None
            }
            (Mode::Sweep, None) => {
                errors.push(SpecError::new(
                    "sweep",
                    "the sweep subcommand requires a list of M values",
                ));
                None
            }
            (_, Some(ms)) => check_sweep(ms, &mut errors),
            (Mode::Run, None) => None,
        };

        // In a sweep the base M is irrelevant; borrow the first sweep value
        // so that validation does not demand it.
        let m_per_node = match (&sweep, self.m_per_node) {
            (_, Some(m)) => Some(m),
            (Some(ms), None) => ms.first().map(|&m| m as i64),
            (None, None) => None,
        };
        let raw = RawConfig {
            protocol: protocols.first().copied(),
            n_repeaters: self.n_repeaters,
            m_per_node,
            p_success: self.p_success,
            t0_seconds: self.t0_seconds,
            l0_meters: self.l0_meters,
            max_slots: self.max_slots,
            target_completions: self.target_completions,
            seed: self.seed,
            replications: self.replications,
        };
        let base = match validate_config(&raw) {
            Ok(c) => Some(c),
            Err(es) => {
                errors.extend(es.into_iter().map(|e| SpecError::new(e.field, e.message)));
                None
            }
        };

        let sample_every = match self.sample_every {
            None => DEFAULT_SAMPLE_EVERY,
            Some(s) if s >= 1 => s as u64,
            Some(_) => {
                errors.push(SpecError::new("sample_every", "must be a positive integer"));
                0
            }
        };
        let burn_in_fraction = self.burn_in_fraction.unwrap_or(DEFAULT_BURN_IN_FRACTION);
        if !(0.0..1.0).contains(&burn_in_fraction) {
            errors.push(SpecError::new("burn_in_fraction", "must be in [0,1)"));
        }

        match base {
            Some(base) if errors.is_empty() => Ok(ExperimentSpec {
                base,
                sweep,
                protocols,
                output_dir: self
                    .output_dir
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
                formats,
                sample_every,
                burn_in_fraction,
            }),
            _ => Err(ParseError::Invalid(errors)),
        }
    }
}

fn dedup_sorted<T: Ord>(xs: &mut Vec<T>) {
    xs.sort();
    xs.dedup();
}

fn check_sweep(ms: &[i64], errors: &mut Vec<SpecError>) -> Option<Vec<usize>> {
    if ms.is_empty() {
        errors.push(SpecError::new("sweep", "must contain at least one M value"));
        return None;
    }
    let mut seen = BTreeSet::new();
    let mut ok = true;
    for (i, &m) in ms.iter().enumerate() {
        if m < 1 {
            errors.push(SpecError::new(
                format!("sweep[{i}]"),
                "M values must be positive",
            ));
            ok = false;
        } else if !seen.insert(m) {
            errors.push(SpecError::new(
                format!("sweep[{i}]"),
                format!("duplicate M value {m}"),
            ));
            ok = false;
        }
    }
    ok.then(|| seen.into_iter().map(|m| m as usize).collect())
}

fn json_int(path: &str, v: &Value) -> Result<i64, SpecError> {
    v.as_i64()
        .ok_or_else(|| SpecError::new(path, format!("expected an integer, found {v}")))
}

fn json_number(path: &str, v: &Value) -> Result<f64, SpecError> {
    v.as_f64()
        .ok_or_else(|| SpecError::new(path, format!("expected a number, found {v}")))
}

fn json_protocols(path: &str, v: &Value) -> Result<Vec<Protocol>, SpecError> {
    let one = |p: &str, x: &Value| -> Result<Protocol, SpecError> {
        x.as_str()
            .ok_or_else(|| SpecError::new(p, "expected a string"))?
            .parse::<Protocol>()
            .map_err(|e| SpecError::new(p, e.to_string()))
    };
    match v {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, x)| one(&format!("{path}[{i}]"), x))
            .collect(),
        other => Ok(vec![one(path, other)?]),
    }
}

/// Builds the JSON object form of a layer; handy for writing config files.
pub fn layer_to_json(layer: &SpecLayer) -> Value {
    let mut m = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    put(
        "protocol",
        layer
            .protocols
            .as_ref()
            .map(|ps| Value::from(ps.iter().map(|p| p.as_str()).collect::<Vec<_>>())),
    );
    put("n_repeaters", layer.n_repeaters.map(Value::from));
    put("m_per_node", layer.m_per_node.map(Value::from));
    put("p_success", layer.p_success.map(Value::from));
    put("t0_seconds", layer.t0_seconds.map(Value::from));
    put("l0_meters", layer.l0_meters.map(Value::from));
    put("max_slots", layer.max_slots.map(Value::from));
    put(
        "target_completions",
        layer.target_completions.map(Value::from),
    );
    put("seed", layer.seed.map(Value::from));
    put("replications", layer.replications.map(Value::from));
    put("sweep", layer.sweep.clone().map(Value::from));
    put(
        "output_dir",
        layer
            .output_dir
            .as_ref()
            .map(|p| Value::from(p.to_string_lossy().into_owned())),
    );
    put(
        "formats",
        layer
            .formats
            .as_ref()
            .map(|fs| serde_json::to_value(fs).expect("formats serialize")),
    );
    put("sample_every", layer.sample_every.map(Value::from));
    put("burn_in_fraction", layer.burn_in_fraction.map(Value::from));
    Value::Object(m)
}
