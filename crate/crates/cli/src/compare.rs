//! Side-by-side efficiency table from several run summaries.

use crate::data::fmt_real;
use crate::error::CliError;
use crate::experiment::Summary;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    /// Sampling-phase seconds.
    pub time: f64,
    pub ess_min: f64,
    pub ess_median: f64,
    pub ess_max: f64,
    /// Absent when the minimum ESS is zero.
    pub seconds_per_min_ess: Option<f64>,
    /// Speed relative to the slowest sampler (which gets 1).
    pub relative_speed: Option<f64>,
}

/// One row per summary, in input order.
pub fn compare_experiments(summaries: &[Summary]) -> Result<Vec<ComparisonRow>, CliError> {
    let Some(first) = summaries.first() else {
        return Err(CliError::Compare("no summaries given".into()));
    };
    for s in &summaries[1..] {
        if s.model != first.model {
            return Err(CliError::Compare(format!(
                "summaries mix models `{}` and `{}`",
                first.model, s.model
            )));
        }
        if s.data_hash != first.data_hash {
            return Err(CliError::Compare(format!(
                "summaries were run on different data (`{}` vs `{}`)",
                first.dataset, s.dataset
            )));
        }
    }
    let slowest = summaries
        .iter()
        .filter_map(|s| s.ess.seconds_per_min_ess)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(summaries
        .iter()
        .map(|s| ComparisonRow {
            method: s.sampler.clone(),
            time: s.timings.sampling_seconds,
            ess_min: s.ess.min,
            ess_median: s.ess.median,
            ess_max: s.ess.max,
            seconds_per_min_ess: s.ess.seconds_per_min_ess,
            relative_speed: match (slowest, s.ess.seconds_per_min_ess) {
                (Some(slow), Some(own)) if own > 0.0 => Some(slow / own),
                _ => None,
            },
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_real)
}

pub fn to_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("Method,Time,ESS min,ESS median,ESS max,s/Min ESS,Rel. Speed\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            fmt_real(r.time),
            fmt_real(r.ess_min),
            fmt_real(r.ess_median),
            fmt_real(r.ess_max),
            opt(r.seconds_per_min_ess),
            opt(r.relative_speed)
        );
    }
    out
}
