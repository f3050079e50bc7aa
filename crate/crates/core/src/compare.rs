//! Empirical vs predicted curve comparison.
//!
//! Both inputs are wide numeric CSVs with a `t` column and one column per
//! metric; the empirical file may carry `<metric>_se` standard errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::csvout::{Cell, NumericCsv, Table};
use crate::error::{Error, Result};

const T_MATCH: f64 = 1e-9;

/// Pointwise bound `|emp − pred| ≤ abs + se·emp_se + rel·|pred|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub se: f64,
    pub rel: f64,
}

impl Tolerance {
    pub fn absolute(abs: f64) -> Self {
        Tolerance { abs, se: 0.0, rel: 0.0 }
    }

    pub fn bound(&self, emp_se: f64, pred: f64) -> f64 {
        self.abs + self.se * emp_se + self.rel * pred.abs()
    }
}

/// Per-metric tolerances; `*` applies to metrics without their own entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tolerances {
    entries: BTreeMap<String, Tolerance>,
}

impl Tolerances {
    pub fn insert(&mut self, metric: impl Into<String>, tol: Tolerance) {
        self.entries.insert(metric.into(), tol);
    }

    pub fn get(&self, metric: &str) -> Option<Tolerance> {
        self.entries.get(metric).or_else(|| self.entries.get("*")).copied()
    }

    /// Parses lines `metric = <abs> [se <k>] [rel <r>]`; `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Tolerances::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine { line, msg };
            let (metric, spec) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected metric = tolerance, got `{content}`")))?;
            let metric = metric.trim();
            let mut words = spec.split_whitespace();
            let num = |w: Option<&str>| -> Result<f64> {
                let w = w.ok_or_else(|| err("missing number".into()))?;
                match w.parse::<f64>() {
                    Ok(v) if v >= 0.0 => Ok(v),
                    _ => Err(err(format!("bad tolerance `{w}`"))),
                }
            };
            let mut tol = Tolerance::absolute(num(words.next())?);
            while let Some(w) = words.next() {
                match w {
                    "se" => tol.se = num(words.next())?,
                    "rel" => tol.rel = num(words.next())?,
                    other => return Err(err(format!("unknown tolerance term `{other}`"))),
                }
            }
            if out.entries.insert(metric.to_string(), tol).is_some() {
                return Err(err(format!("duplicate metric `{metric}`")));
            }
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tolerances::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// One joined observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JoinedPoint {
    pub t: f64,
    pub emp: f64,
    pub emp_se: f64,
    pub pred: f64,
}

impl JoinedPoint {
    pub fn abs_gap(&self) -> f64 {
        (self.emp - self.pred).abs()
    }

    pub fn rel_gap(&self) -> f64 {
        let g = self.abs_gap();
        if g == 0.0 {
            0.0
        } else {
            g / self.pred.abs()
        }
    }
}

/// Metrics present in both files, each with its points on the shared times.
#[derive(Clone, Debug)]
pub struct Joined {
    pub metrics: Vec<(String, Vec<JoinedPoint>)>,
}

impl Joined {
    /// Long-format table `t, metric, emp, emp_se, pred, abs_gap, rel_gap`.
    pub fn table(&self) -> Table {
        let mut t = Table::new(["t", "metric", "emp", "emp_se", "pred", "abs_gap", "rel_gap"]);
        for (name, points) in &self.metrics {
            for p in points {
                t.push(vec![
                    p.t.into(),
                    Cell::Text(name.clone()),
                    p.emp.into(),
                    p.emp_se.into(),
                    p.pred.into(),
                    p.abs_gap().into(),
                    p.rel_gap().into(),
                ]);
            }
        }
        t
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= T_MATCH * a.abs().max(b.abs()).max(1.0)
}

pub fn join(emp: &NumericCsv, pred: &NumericCsv) -> Result<Joined> {
    let te = emp
        .column("t")
        .ok_or_else(|| Error::Compare("empirical file has no `t` column".into()))?;
    let tp = pred
        .column("t")
        .ok_or_else(|| Error::Compare("prediction file has no `t` column".into()))?;
    let pairs: Vec<(usize, usize)> = emp
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| pred.rows.iter().position(|q| same_time(r[te], q[tp])).map(|j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Compare("time grids are disjoint".into()));
    }
    let mut metrics = Vec::new();
    for (cp, name) in pred.header.iter().enumerate() {
        if cp == tp || name.ends_with("_se") {
            continue;
        }
        let Some(ce) = emp.column(name) else { continue };
        let cse = emp.column(&format!("{name}_se"));
        let points = pairs
            .iter()
            .map(|&(i, j)| JoinedPoint {
                t: emp.rows[i][te],
                emp: emp.rows[i][ce],
                emp_se: cse.map_or(0.0, |c| emp.rows[i][c]),
                pred: pred.rows[j][cp],
            })
            .collect();
        metrics.push((name.clone(), points));
    }
    if metrics.is_empty() {
        return Err(Error::Compare("no metric column is shared by both files".into()));
    }
    Ok(Joined { metrics })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricVerdict {
    pub metric: String,
    pub points: usize,
    pub sup_abs_gap: f64,
    pub sup_rel_gap: f64,
    pub worst_t: f64,
    pub tolerance: Option<Tolerance>,
    /// `None` when no tolerance applies.
    pub pass: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub verdicts: Vec<MetricVerdict>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass != Some(false))
    }

    pub fn failed_metrics(&self) -> Vec<&str> {
        self.verdicts
            .iter()
            .filter(|v| v.pass == Some(false))
            .map(|v| v.metric.as_str())
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "metric",
            "points",
            "sup_abs_gap",
            "sup_rel_gap",
            "worst_t",
            "abs_tol",
            "se_mult",
            "rel_tol",
            "verdict",
        ]);
        for v in &self.verdicts {
            let tol = v.tolerance.unwrap_or(Tolerance {
                abs: f64::NAN,
                se: f64::NAN,
                rel: f64::NAN,
            });
            let verdict = match v.pass {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "skip",
            };
            t.push(vec![
                Cell::Text(v.metric.clone()),
                v.points.into(),
                v.sup_abs_gap.into(),
                v.sup_rel_gap.into(),
                v.worst_t.into(),
                tol.abs.into(),
                tol.se.into(),
                tol.rel.into(),
                verdict.into(),
            ]);
        }
        let overall = if self.passed() { "pass" } else { "fail" };
        let n: usize = self.verdicts.iter().map(|v| v.points).sum();
        t.push(vec![
            "overall".into(),
            n.into(),
            self.verdicts.iter().map(|v| v.sup_abs_gap).fold(0.0, f64::max).into(),
            self.verdicts.iter().map(|v| v.sup_rel_gap).fold(0.0, f64::max).into(),
            f64::NAN.into(),
            f64::NAN.into(),
            f64::NAN.into(),
            f64::NAN.into(),
            overall.into(),
        ]);
        t
    }
}

/// Sup-norm gap of every shared metric, judged against `tol`.
pub fn compare(emp: &NumericCsv, pred: &NumericCsv, tol: &Tolerances) -> Result<CompareReport> {
    let joined = join(emp, pred)?;
    Ok(judge(&joined, tol))
}

pub fn judge(joined: &Joined, tol: &Tolerances) -> CompareReport {
    let verdicts = joined
        .metrics
        .iter()
        .map(|(name, points)| {
            let tolerance = tol.get(name);
            let mut sup_abs = 0.0f64;
            let mut sup_rel = 0.0f64;
            let mut worst_t = points[0].t;
            let mut ok = true;
            for p in points {
                let g = p.abs_gap();
                if !(g <= sup_abs) {
                    sup_abs = g;
                    worst_t = p.t;
                }
                sup_rel = sup_rel.max(p.rel_gap());
                if let Some(tl) = tolerance {
                    ok &= g <= tl.bound(p.emp_se, p.pred);
                }
            }
            MetricVerdict {
                metric: name.clone(),
                points: points.len(),
                sup_abs_gap: sup_abs,
                sup_rel_gap: sup_rel,
                worst_t,
                tolerance,
                pass: tolerance.map(|_| ok),
            }
        })
        .collect();
    CompareReport { verdicts }
}

/// Reads both files and the tolerance file, writes the verdict CSV to
/// `verdict_path` if given, and returns the report.
pub fn compare_files(emp: &Path, pred: &Path, tol: &Path, verdict_path: Option<&Path>) -> Result<CompareReport> {
    let report = compare(
        &NumericCsv::read(emp)?,
        &NumericCsv::read(pred)?,
        &Tolerances::read(tol)?,
    )?;
    if let Some(p) = verdict_path {
        report.table().write(p)?;
    }
    Ok(report)
}
