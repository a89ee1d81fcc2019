//! Plot data, sweep summaries and speedups, computed from CSV traces alone.
//!
//! Incumbents are in maximization convention, as in the traces: a minimized
//! objective appears negated.

use std::path::Path;

use anyhow::{anyhow, Context, Result};

/// The columns of a trace the reports need.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub iteration: Vec<usize>,
    pub incumbent: Vec<Option<f64>>,
}

impl Trace {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| anyhow!("{}: no {name:?} column", path.display()))
        };
        let (ci, cb) = (col("iteration")?, col("incumbent")?);
        let mut t = Trace {
            iteration: Vec::new(),
            incumbent: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            t.iteration.push(rec[ci].parse().with_context(|| format!("{}: bad iteration", path.display()))?);
            let b = &rec[cb];
            t.incumbent.push(if b.is_empty() {
                None
            } else {
                Some(b.parse().with_context(|| format!("{}: bad incumbent", path.display()))?)
            });
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.iteration.len()
    }

    pub fn best(&self) -> Option<f64> {
        self.incumbent.iter().rev().find_map(|v| *v)
    }

    /// 1-based number of evaluations until the incumbent first reaches `level`.
    pub fn evaluations_to_reach(&self, level: f64) -> Option<usize> {
        self.incumbent.iter().position(|v| v.is_some_and(|v| v >= level)).map(|i| i + 1)
    }

    /// `(iteration, evaluations so far, incumbent)` at the end of each iteration.
    pub fn per_iteration(&self) -> Vec<(usize, usize, Option<f64>)> {
        let mut out: Vec<(usize, usize, Option<f64>)> = Vec::new();
        for (i, (&it, &inc)) in self.iteration.iter().zip(&self.incumbent).enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == it => *last = (it, i + 1, inc),
                _ => out.push((it, i + 1, inc)),
            }
        }
        out
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per evaluation: `evaluations,iteration,incumbent`.
pub fn write_plot(path: &Path, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["evaluations", "iteration", "incumbent"])?;
    for (i, (it, inc)) in trace.iteration.iter().zip(&trace.incumbent).enumerate() {
        w.write_record([(i + 1).to_string(), it.to_string(), fmt(*inc)])?;
    }
    w.flush()?;
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-iteration median, minimum and maximum incumbent across traces.
/// Runs without a feasible point yet are left out of that iteration's row.
pub fn write_summary(path: &Path, traces: &[Trace]) -> Result<()> {
    let per: Vec<_> = traces.iter().map(Trace::per_iteration).collect();
    let n_iter = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "evaluations", "runs", "median", "min", "max"])?;
    for k in 0..n_iter {
        let rows: Vec<_> = per.iter().filter_map(|p| p.get(k)).collect();
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
        let (med, lo, hi) = if vals.is_empty() {
            (None, None, None)
        } else {
            (
                Some(median(vals.clone())),
                vals.iter().copied().reduce(f64::min),
                vals.iter().copied().reduce(f64::max),
            )
        };
        w.write_record([
            rows[0].0.to_string(),
            rows[0].1.to_string(),
            vals.len().to_string(),
            fmt(med),
            fmt(lo),
            fmt(hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluations the baseline needs to reach its own final best, divided by
/// the evaluations the transfer run needs to reach the same value.
#[derive(Clone, Debug, PartialEq)]
pub struct Speedup {
    pub label: String,
    pub baseline_best: Option<f64>,
    pub baseline_evaluations: Option<usize>,
    pub transfer_evaluations: Option<usize>,
    pub speedup: Option<f64>,
}

pub fn speedup(label: impl Into<String>, baseline: &Trace, transfer: &Trace) -> Speedup {
    let best = baseline.best();
    let eb = best.and_then(|b| baseline.evaluations_to_reach(b));
    let et = best.and_then(|b| transfer.evaluations_to_reach(b));
    Speedup {
        label: label.into(),
        baseline_best: best,
        baseline_evaluations: eb,
        transfer_evaluations: et,
        speedup: match (eb, et) {
            (Some(b), Some(t)) => Some(b as f64 / t as f64),
            _ => None,
        },
    }
}

/// One row per pair plus a `median` row over the pairs with a defined speedup.
pub fn write_speedups(path: &Path, rows: &[Speedup]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "baseline_best", "baseline_evaluations", "transfer_evaluations", "speedup"])?;
    for s in rows {
        w.write_record([
            s.label.clone(),
            fmt(s.baseline_best),
            s.baseline_evaluations.map(|v| v.to_string()).unwrap_or_default(),
            s.transfer_evaluations.map(|v| v.to_string()).unwrap_or_default(),
            fmt(s.speedup),
        ])?;
    }
    let defined: Vec<f64> = rows.iter().filter_map(|s| s.speedup).collect();
    let med = (!defined.is_empty()).then(|| median(defined));
    w.write_record(["median".into(), String::new(), String::new(), String::new(), fmt(med)])?;
    w.flush()?;
    Ok(())
}
