use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::channels::{Channel, ClassicRR, CoordReleaseChannel, PerValueChannel};
use crate::error::{Error, Result};
use crate::expfam::FeatureMap;
use crate::privreg::{statistics_feature_map, MixedCoordChannel};

/// An enumerable feature map.
///
/// JSON: `{"binary_cube": {"d": 2}}`, `{"outcomes": {"phi": [[0,0],[1,0]]}}`,
/// `{"file": {"path": "phi.csv"}}` (header row, one outcome per row) or
/// `{"regression_stats": {"d": 2, "levels": [0, 1]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    BinaryCube { d: usize },
    Outcomes { phi: Vec<Vec<f64>> },
    File { path: PathBuf },
    RegressionStats { d: usize, levels: Vec<f64> },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::BinaryCube { d: 2 }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<FeatureMap> {
        let fm = match self {
            ModelSpec::BinaryCube { d } => {
                if *d == 0 || *d > 20 {
                    return Err(Error::InvalidInput(format!("binary cube dimension {d} outside 1..=20")));
                }
                FeatureMap::binary_cube(*d)
            }
            ModelSpec::Outcomes { phi } => FeatureMap::from_outcomes(phi)?,
            ModelSpec::File { path } => FeatureMap::from_outcomes(&read_outcomes(path)?)?,
            ModelSpec::RegressionStats { d, levels } => return statistics_feature_map(*d, levels),
        };
        // the structured channels need c; use the tightest bound when valid
        let max = fm.matrix().max();
        if fm.matrix().min() >= 0.0 && max > 0.0 {
            fm.with_bound(max)
        } else {
            Ok(fm)
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::BinaryCube { d } => format!("binary_cube(d={d})"),
            ModelSpec::Outcomes { phi } => format!("outcomes(m={})", phi.len()),
            ModelSpec::File { path } => format!("file({})", path.display()),
            ModelSpec::RegressionStats { d, levels } => format!("regression_stats(d={d},levels={})", levels.len()),
        }
    }
}

fn read_outcomes(path: &std::path::Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let row = rec?
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        out.push(row);
    }
    Ok(out)
}

/// A supervision channel, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// Reveals the outcome itself.
    Identity,
    /// Base distribution uniform unless given.
    ClassicRr { epsilon: f64, base: Option<Vec<f64>> },
    /// Uniform coordinate choice; `c` defaults to the model's bound.
    CoordRelease { alpha: f64, c: Option<f64> },
    /// `delta_bar` defaults to the enumerated support bound.
    PerValue { alpha: f64, delta_bar: Option<f64> },
    /// The regression mixed scheme; needs a `regression_stats` model.
    MixedCoord { d: usize, alpha: f64 },
}

impl ChannelSpec {
    pub fn build(&self, fm: &FeatureMap) -> Result<Box<dyn Channel>> {
        let bound = || {
            fm.bound()
                .ok_or_else(|| Error::InvalidInput("model has negative features; no bound c".into()))
        };
        Ok(match self {
            ChannelSpec::Identity => Box::new(ClassicRR::uniform(1.0, fm.outcomes())?),
            ChannelSpec::ClassicRr { epsilon, base } => match base {
                Some(u) => Box::new(ClassicRR::new(*epsilon, u.clone())?),
                None => Box::new(ClassicRR::uniform(*epsilon, fm.outcomes())?),
            },
            ChannelSpec::CoordRelease { alpha, c } => {
                let c = match c {
                    Some(c) => *c,
                    None => bound()?,
                };
                Box::new(CoordReleaseChannel::uniform(fm.dim(), *alpha, c)?)
            }
            ChannelSpec::PerValue { alpha, delta_bar } => match delta_bar {
                Some(db) => Box::new(PerValueChannel::new(*alpha, *db, bound()?)?),
                None => Box::new(PerValueChannel::with_enumerated_bound(fm, *alpha)?),
            },
            ChannelSpec::MixedCoord { d, alpha } => Box::new(MixedCoordChannel::new(*d, *alpha)?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            ChannelSpec::Identity => "identity".into(),
            ChannelSpec::ClassicRr { epsilon, .. } => format!("classic_rr(epsilon={epsilon})"),
            ChannelSpec::CoordRelease { alpha, .. } => format!("coord_release(alpha={alpha})"),
            ChannelSpec::PerValue { alpha, delta_bar } => match delta_bar {
                Some(db) => format!("per_value(alpha={alpha},delta_bar={db})"),
                None => format!("per_value(alpha={alpha})"),
            },
            ChannelSpec::MixedCoord { alpha, .. } => format!("mixed_coord(alpha={alpha})"),
        }
    }

    /// The bound on the log likelihood ratio the mechanism claims, if any.
    pub fn log_ratio_bound(&self, fm: &FeatureMap) -> Option<f64> {
        match self {
            ChannelSpec::Identity => None,
            ChannelSpec::ClassicRr { epsilon, base } => {
                let ch = match base {
                    Some(u) => ClassicRR::new(*epsilon, u.clone()).ok()?,
                    None => ClassicRR::uniform(*epsilon, fm.outcomes()).ok()?,
                };
                ch.dp_level().ok().map(f64::ln_1p)
            }
            ChannelSpec::CoordRelease { alpha, .. }
            | ChannelSpec::PerValue { alpha, .. }
            | ChannelSpec::MixedCoord { alpha, .. } => Some(*alpha),
        }
    }
}
