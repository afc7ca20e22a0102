use rayon::prelude::*;

use super::Channel;
use crate::error::{Error, Result};
use crate::expfam::FeatureMap;

/// Default cap on the number of terms an exhaustive enumeration may touch.
pub const DEFAULT_AUDIT_BUDGET: u128 = 10_000_000;

/// Worst-case privacy loss found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// `max_{o,y,y'} log S(o|y) − log S(o|y')`.
    pub max_log_ratio: f64,
    /// `(o, y, y')` attaining the maximum.
    pub argmax: (usize, usize, usize),
}

/// Exhaustive privacy audit of a channel over every pair of private values.
///
/// Channels that binarize first report the end-to-end matrix with the
/// intermediate `õ` marginalized out, so the audit covers the binarization
/// randomness as well.
pub fn dp_audit(ch: &dyn Channel, fm: &FeatureMap, budget: u128) -> Result<AuditReport> {
    let s = ch.audit_matrix(fm, budget)?;
    let (k, m) = s.shape();
    let terms = k as u128 * m as u128 * m as u128;
    if terms > budget {
        return Err(Error::TooLarge { terms, budget });
    }
    let best = (0..k)
        .into_par_iter()
        .map(|o| {
            let row: Vec<f64> = s.row(o).iter().copied().collect();
            let mut best = (f64::NEG_INFINITY, (o, 0, 0));
            for (y, &num) in row.iter().enumerate() {
                for (y2, &den) in row.iter().enumerate() {
                    let r = match (num > 0.0, den > 0.0) {
                        (false, _) => continue,
                        (true, false) => f64::INFINITY,
                        (true, true) => num.ln() - den.ln(),
                    };
                    if r > best.0 {
                        best = (r, (o, y, y2));
                    }
                }
            }
            best
        })
        // lowest (o, y, y') wins ties so the report is order independent
        .reduce(
            || (f64::NEG_INFINITY, (usize::MAX, 0, 0)),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    Ok(AuditReport {
        max_log_ratio: best.0,
        argmax: best.1,
    })
}
