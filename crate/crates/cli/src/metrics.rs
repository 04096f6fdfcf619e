//! Metric rows, CSV output and averaging across repetitions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One row per (snapshot, update, exchange, agent). Column order is fixed by
/// the field order. Unavailable values are written as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub snapshot: usize,
    pub update: usize,
    /// Cumulative gossip exchanges since the start of the run.
    pub exchange: usize,
    pub agent: usize,
    /// `||z_i - f_i(x_i)||^2`.
    pub val: f64,
    /// `||G_i^T g_i||` at `x_i`.
    pub grad: f64,
    pub mse_v: f64,
    pub mse_theta: f64,
    /// Largest `||x_i - x_j||` over agents at this point.
    pub disagreement: f64,
    /// `||d_i(l) - d_i||` of the update leaving this point.
    pub discrepancy: Option<f64>,
    /// `||x_i - x_star||` against the centralized solution of the snapshot.
    pub error_to_reference: f64,
}

pub type RowKey = (usize, usize, usize, usize);

impl MetricsRow {
    pub fn key(&self) -> RowKey {
        (self.snapshot, self.update, self.exchange, self.agent)
    }
}

pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let csv_err = |e| CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let csv_err = |e| CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

#[derive(Default)]
struct Acc {
    n: usize,
    val: f64,
    grad: f64,
    mse_v: f64,
    mse_theta: f64,
    disagreement: f64,
    discrepancy: f64,
    n_discrepancy: usize,
    error: f64,
}

/// Per-key arithmetic mean over repetitions. A key present in only some
/// repetitions (early stopping) is averaged over those that have it.
pub fn average_rows(reps: &[Vec<MetricsRow>]) -> Vec<MetricsRow> {
    let mut acc: BTreeMap<RowKey, Acc> = BTreeMap::new();
    for rows in reps {
        for r in rows {
            let a = acc.entry(r.key()).or_default();
            a.n += 1;
            a.val += r.val;
            a.grad += r.grad;
            a.mse_v += r.mse_v;
            a.mse_theta += r.mse_theta;
            a.disagreement += r.disagreement;
            a.error += r.error_to_reference;
            if let Some(d) = r.discrepancy {
                a.discrepancy += d;
                a.n_discrepancy += 1;
            }
        }
    }
    acc.into_iter()
        .map(|((snapshot, update, exchange, agent), a)| {
            let n = a.n as f64;
            MetricsRow {
                run_id: "mean".to_string(),
                snapshot,
                update,
                exchange,
                agent,
                val: a.val / n,
                grad: a.grad / n,
                mse_v: a.mse_v / n,
                mse_theta: a.mse_theta / n,
                disagreement: a.disagreement / n,
                discrepancy: (a.n_discrepancy > 0).then(|| a.discrepancy / a.n_discrepancy as f64),
                error_to_reference: a.error / n,
            }
        })
        .collect()
}

/// Network totals per `(snapshot, update, exchange)`, summing over agents.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalsRow {
    pub snapshot: usize,
    pub update: usize,
    pub exchange: usize,
    pub val: f64,
    pub grad: f64,
    pub max_val: f64,
    pub mse_v: f64,
    pub mse_theta: f64,
    pub disagreement: f64,
    pub max_discrepancy: Option<f64>,
}

pub fn totals(rows: &[MetricsRow]) -> Vec<TotalsRow> {
    let mut out: Vec<TotalsRow> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in rows {
        let same = out.last().is_some_and(|t| {
            (t.snapshot, t.update, t.exchange) == (r.snapshot, r.update, r.exchange)
        });
        if !same {
            out.push(TotalsRow {
                snapshot: r.snapshot,
                update: r.update,
                exchange: r.exchange,
                val: 0.0,
                grad: 0.0,
                max_val: 0.0,
                mse_v: 0.0,
                mse_theta: 0.0,
                disagreement: r.disagreement,
                max_discrepancy: None,
            });
            counts.push(0);
        }
        let t = out.last_mut().expect("pushed");
        *counts.last_mut().expect("pushed") += 1;
        t.val += r.val;
        t.grad += r.grad;
        t.max_val = t.max_val.max(r.val);
        t.mse_v += r.mse_v;
        t.mse_theta += r.mse_theta;
        t.disagreement = t.disagreement.max(r.disagreement);
        if let Some(d) = r.discrepancy {
            t.max_discrepancy = Some(t.max_discrepancy.map_or(d, |m: f64| m.max(d)));
        }
    }
    for (t, n) in out.iter_mut().zip(counts) {
        t.mse_v /= n as f64;
        t.mse_theta /= n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, update: usize, agent: usize, val: f64, disc: Option<f64>) -> MetricsRow {
        MetricsRow {
            run_id: run.into(),
            snapshot: 0,
            update,
            exchange: 3 * update,
            agent,
            val,
            grad: 2.0 * val,
            mse_v: val,
            mse_theta: 0.0,
            disagreement: 0.0,
            discrepancy: disc,
            error_to_reference: val,
        }
    }

    #[test]
    fn mean_over_repetitions() {
        let a = vec![row("0", 0, 0, 1.0, Some(1.0)), row("0", 1, 0, 2.0, None)];
        let b = vec![row("1", 0, 0, 3.0, Some(3.0))];
        let m = average_rows(&[a, b]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].val, 2.0);
        assert_eq!(m[0].discrepancy, Some(2.0));
        assert_eq!(m[1].val, 2.0);
        assert_eq!(m[1].discrepancy, None);
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![row("0", 0, 0, 0.1, None), row("0", 0, 1, 0.25, Some(1e-3))];
        write_rows(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "run_id,snapshot,update,exchange,agent,val,grad,mse_v,mse_theta,disagreement,discrepancy,error_to_reference\n"
        ));
        assert_eq!(read_rows(&p).unwrap(), rows);
    }

    #[test]
    fn totals_sum_agents() {
        let rows = vec![
            row("0", 0, 0, 1.0, Some(0.5)),
            row("0", 0, 1, 2.0, Some(0.7)),
        ];
        let t = totals(&rows);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].val, 3.0);
        assert_eq!(t[0].max_val, 2.0);
        assert_eq!(t[0].max_discrepancy, Some(0.7));
    }
}
