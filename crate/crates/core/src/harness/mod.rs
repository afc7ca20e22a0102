//! Configuration-driven experiment runs that write one CSV table and a JSON
//! manifest per run.
//!
//! A config file looks like
//!
//! ```json
//! {"experiment": "mc_validate", "seed": 7, "output": "mc.csv", "threads": 4,
//!  "params": {"n": 10000, "trials": 50}}
//! ```
//!
//! `params` fields are optional and fall back to the runner defaults. The
//! seed is mandatory, either in the file or from the command line. Tables
//! depend only on the config and seed, never on the thread count.

mod experiments;
mod spec;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use experiments::{
    run_audit, run_efficiency_curve, run_geometry, run_mc_validate, run_private_regression, run_region_count,
    sub_seed, AuditCase, AuditParams, EfficiencyCurveParams, GeometryParams, McValidateParams,
    PrivateRegressionParams, RegionCountParams, RegressionData,
};
pub use spec::{ChannelSpec, ModelSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EfficiencyCurve,
    McValidate,
    Geometry,
    RegionCount,
    PrivateRegression,
    Audit,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::EfficiencyCurve,
        ExperimentKind::McValidate,
        ExperimentKind::Geometry,
        ExperimentKind::RegionCount,
        ExperimentKind::PrivateRegression,
        ExperimentKind::Audit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::EfficiencyCurve => "efficiency_curve",
            ExperimentKind::McValidate => "mc_validate",
            ExperimentKind::Geometry => "geometry",
            ExperimentKind::RegionCount => "region_count",
            ExperimentKind::PrivateRegression => "private_regression",
            ExperimentKind::Audit => "audit",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    /// Accepts `snake_case` or `kebab-case`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExperimentParams {
    EfficiencyCurve(EfficiencyCurveParams),
    McValidate(McValidateParams),
    Geometry(GeometryParams),
    RegionCount(RegionCountParams),
    PrivateRegression(PrivateRegressionParams),
    Audit(AuditParams),
}

impl ExperimentParams {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentParams::EfficiencyCurve(_) => ExperimentKind::EfficiencyCurve,
            ExperimentParams::McValidate(_) => ExperimentKind::McValidate,
            ExperimentParams::Geometry(_) => ExperimentKind::Geometry,
            ExperimentParams::RegionCount(_) => ExperimentKind::RegionCount,
            ExperimentParams::PrivateRegression(_) => ExperimentKind::PrivateRegression,
            ExperimentParams::Audit(_) => ExperimentKind::Audit,
        }
    }

    /// Parses `params` for `kind`; `null` gives the defaults.
    pub fn from_value(kind: ExperimentKind, v: Value) -> Result<Self> {
        let v = if v.is_null() { Value::Object(Default::default()) } else { v };
        Ok(match kind {
            ExperimentKind::EfficiencyCurve => ExperimentParams::EfficiencyCurve(serde_json::from_value(v)?),
            ExperimentKind::McValidate => ExperimentParams::McValidate(serde_json::from_value(v)?),
            ExperimentKind::Geometry => ExperimentParams::Geometry(serde_json::from_value(v)?),
            ExperimentKind::RegionCount => ExperimentParams::RegionCount(serde_json::from_value(v)?),
            ExperimentKind::PrivateRegression => ExperimentParams::PrivateRegression(serde_json::from_value(v)?),
            ExperimentKind::Audit => ExperimentParams::Audit(serde_json::from_value(v)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub params: ExperimentParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<ExperimentKind>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    threads: Option<usize>,
    #[serde(default)]
    params: Value,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(params: ExperimentParams, seed: u64) -> Self {
        Self {
            experiment: params.kind(),
            seed,
            output: None,
            threads: None,
            params,
        }
    }

    /// Builds a config for `kind` from an optional JSON document. A document
    /// naming a different experiment is rejected.
    pub fn from_json(kind: ExperimentKind, doc: Option<&str>, o: &Overrides) -> Result<Self> {
        let raw: RawConfig = match doc {
            Some(s) => serde_json::from_str(s)?,
            None => RawConfig {
                experiment: None,
                seed: None,
                output: None,
                threads: None,
                params: Value::Null,
            },
        };
        if let Some(k) = raw.experiment {
            if k != kind {
                return Err(Error::InvalidInput(format!("config is for {k}, not {kind}")));
            }
        }
        let seed = o
            .seed
            .or(raw.seed)
            .ok_or_else(|| Error::InvalidInput("a seed is required (config `seed` or --seed)".into()))?;
        let threads = o.threads.or(raw.threads);
        if threads == Some(0) {
            return Err(Error::InvalidInput("threads must be at least 1".into()));
        }
        Ok(Self {
            experiment: kind,
            seed,
            output: o.output.clone().or(raw.output),
            threads,
            params: ExperimentParams::from_value(kind, raw.params)?,
        })
    }

    pub fn from_file(kind: ExperimentKind, path: &Path, o: &Overrides) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(kind, Some(&s), o)
    }
}

/// A CSV table held as formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub row: usize,
    pub context: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: Table,
    pub errors: Vec<RowError>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub output: Option<PathBuf>,
    pub rows: usize,
    pub wall_clock_seconds: f64,
    pub errors: Vec<RowError>,
    pub config: ExperimentConfig,
}

/// Shortest round-trip `Display` form, switching to exponent notation for
/// very small or very large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Runs on the current rayon pool.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let seed = config.seed;
    match &config.params {
        ExperimentParams::EfficiencyCurve(p) => run_efficiency_curve(p),
        ExperimentParams::McValidate(p) => run_mc_validate(p, seed),
        ExperimentParams::Geometry(p) => run_geometry(p, seed),
        ExperimentParams::RegionCount(p) => run_region_count(p, seed),
        ExperimentParams::PrivateRegression(p) => run_private_regression(p, seed),
        ExperimentParams::Audit(p) => run_audit(p),
    }
}

/// Runs on a dedicated pool of `config.threads` workers (all cores when
/// unset) and times the run.
pub fn execute(config: &ExperimentConfig) -> Result<(RunOutput, Manifest)> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::InvalidInput(e.to_string()))?;
    let start = Instant::now();
    let out = pool.install(|| run(config))?;
    let manifest = Manifest {
        experiment: config.experiment,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        threads: pool.current_num_threads(),
        output: config.output.clone(),
        rows: out.table.rows.len(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        errors: out.errors.clone(),
        config: config.clone(),
    };
    Ok((out, manifest))
}

pub fn manifest_json(manifest: &Manifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(manifest)?)
}

/// `out.csv` → `out.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

/// Writes the table to `csv` and the manifest next to it.
pub fn write_outputs(out: &RunOutput, manifest: &Manifest, csv: &Path) -> Result<PathBuf> {
    let f = std::fs::File::create(csv).map_err(|e| Error::Io(format!("{}: {e}", csv.display())))?;
    out.table.write_csv(std::io::BufWriter::new(f))?;
    let mpath = manifest_path(csv);
    std::fs::write(&mpath, manifest_json(manifest)? + "\n").map_err(|e| Error::Io(format!("{}: {e}", mpath.display())))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format() {
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(1e-7), "1e-7");
        assert_eq!(fmt_f64(-2.5e20), "-2.5e20");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn config_requires_seed_and_matching_kind() {
        let o = Overrides::default();
        assert!(ExperimentConfig::from_json(ExperimentKind::Audit, None, &o).is_err());
        let doc = r#"{"experiment": "geometry", "seed": 3}"#;
        assert!(ExperimentConfig::from_json(ExperimentKind::Audit, Some(doc), &o).is_err());
        let c = ExperimentConfig::from_json(ExperimentKind::Geometry, Some(doc), &o).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.params, ExperimentParams::Geometry(GeometryParams::default()));
    }

    #[test]
    fn overrides_win_and_unknown_fields_fail() {
        let doc = r#"{"seed": 3, "threads": 2, "params": {"trials": 4}}"#;
        let o = Overrides {
            seed: Some(9),
            threads: Some(1),
            output: None,
        };
        let c = ExperimentConfig::from_json(ExperimentKind::Geometry, Some(doc), &o).unwrap();
        assert_eq!((c.seed, c.threads), (9, Some(1)));
        match c.params {
            ExperimentParams::Geometry(p) => assert_eq!(p.trials, 4),
            _ => unreachable!(),
        }
        let bad = r#"{"seed": 3, "params": {"trails": 4}}"#;
        assert!(ExperimentConfig::from_json(ExperimentKind::Geometry, Some(bad), &o).is_err());
        assert!(ExperimentConfig::from_json(ExperimentKind::Geometry, Some(r#"{"sed": 1}"#), &o).is_err());
    }

    #[test]
    fn kind_parses_both_spellings() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
            assert_eq!(k.as_str().replace('_', "-").parse::<ExperimentKind>().unwrap(), k);
        }
    }

    #[test]
    fn audit_defaults_stay_within_bounds() {
        let out = run_audit(&AuditParams::default()).unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        let c = out.table.column("within_bound").unwrap();
        assert!(out.table.rows.iter().all(|r| r[c] == "true"));
    }

    #[test]
    fn small_runs_are_thread_independent() {
        let mut configs = [
            ExperimentConfig::new(
                ExperimentParams::McValidate(McValidateParams {
                    n: 500,
                    trials: 8,
                    ..Default::default()
                }),
                5,
            ),
            ExperimentConfig::new(ExperimentParams::Geometry(GeometryParams::default()), 5),
            ExperimentConfig::new(
                ExperimentParams::EfficiencyCurve(EfficiencyCurveParams {
                    epsilons: vec![1.0, 0.1],
                    ..Default::default()
                }),
                5,
            ),
        ];
        for c in configs.iter_mut() {
            c.threads = Some(1);
            let (a, _) = execute(c).unwrap();
            c.threads = Some(4);
            let (b, _) = execute(c).unwrap();
            assert_eq!(a.table, b.table, "{}", c.experiment);
        }
    }
}
