//! Cross-run aggregation: median and interquartile range per method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::run::{parse_metrics_csv, MetricRow, RunSummary, METRIC_NAMES};

/// Iterations tabulated in the overfitting table.
pub const OVERFIT_ITERATIONS: [usize; 5] = [0, 500, 750, 1000, 1250];

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub method: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

impl LoadedRun {
    pub fn final_row(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn at(&self, iteration: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.iteration == iteration)
    }
}

/// Reads a completed run directory. Failed runs yield `Ok(None)`.
pub fn load_run(dir: &Path) -> Result<Option<LoadedRun>> {
    let sp = dir.join("summary.json");
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let summary: RunSummary = serde_json::from_str(&text)?;
    if summary.status != "ok" {
        return Ok(None);
    }
    let mp = dir.join("metrics.csv");
    let rows = parse_metrics_csv(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
    if rows.windows(2).any(|w| w[0].iteration >= w[1].iteration) {
        return Err(Error::Format(format!(
            "{}: iterations not strictly increasing",
            mp.display()
        )));
    }
    Ok(Some(LoadedRun {
        method: summary.method,
        seed: summary.seed,
        rows,
    }))
}

/// Linear-interpolation quantile of sorted data (the spreadsheet
/// `QUARTILE.INC` convention).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Spread {
            n: v.len(),
            median: quantile_sorted(&v, 0.5),
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn by_method(runs: &[LoadedRun]) -> BTreeMap<&str, Vec<&LoadedRun>> {
    let mut m: BTreeMap<&str, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        m.entry(r.method.as_str()).or_default().push(r);
    }
    m
}

/// Final-checkpoint spread per (method, metric).
pub fn aggregate(runs: &[LoadedRun]) -> BTreeMap<(String, String), Spread> {
    let mut out = BTreeMap::new();
    for (method, rs) in by_method(runs) {
        for metric in METRIC_NAMES {
            let vals: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.final_row()?.value(metric))
                .collect();
            if let Some(s) = Spread::of(&vals) {
                out.insert((method.to_string(), metric.to_string()), s);
            }
        }
    }
    out
}

pub fn aggregate_csv(runs: &[LoadedRun]) -> String {
    let mut s = String::from("method,metric,n,median,q1,q3,iqr\n");
    for ((method, metric), sp) in aggregate(runs) {
        let _ = writeln!(
            s,
            "{method},{metric},{},{},{},{},{}",
            sp.n,
            sp.median,
            sp.q1,
            sp.q3,
            sp.iqr()
        );
    }
    s
}

/// Median of `metric` per method at each iteration in `iterations`.
pub fn trajectory(
    runs: &[LoadedRun],
    metric: &str,
    iterations: &[usize],
) -> BTreeMap<String, Vec<Option<Spread>>> {
    by_method(runs)
        .into_iter()
        .map(|(method, rs)| {
            let row = iterations
                .iter()
                .map(|&it| {
                    let vals: Vec<f64> =
                        rs.iter().filter_map(|r| r.at(it)?.value(metric)).collect();
                    Spread::of(&vals)
                })
                .collect();
            (method.to_string(), row)
        })
        .collect()
}

pub fn overfitting_csv(runs: &[LoadedRun]) -> String {
    let mut s = String::from("method");
    for it in OVERFIT_ITERATIONS {
        let _ = write!(s, ",iter_{it}");
    }
    s.push('\n');
    for (method, row) in trajectory(runs, "intra_div", &OVERFIT_ITERATIONS) {
        s.push_str(&method);
        for cell in row {
            let _ = write!(
                s,
                ",{}",
                cell.map(|c| c.median.to_string()).unwrap_or_default()
            );
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 9] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
    "#1f78b4",
];

/// Median `metric` against iteration, one polyline per method.
pub fn trajectory_svg(runs: &[LoadedRun], metric: &str) -> String {
    let mut iters: Vec<usize> = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|x| x.iteration))
        .collect();
    iters.sort_unstable();
    iters.dedup();
    let traj = trajectory(runs, metric, &iters);
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let vals: Vec<f64> = traj
        .values()
        .flatten()
        .flatten()
        .map(|s| s.median)
        .collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = if vals.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let max_it = iters.last().copied().unwrap_or(1).max(1) as f64;
    let x = |it: usize| pad + (w - 2.0 * pad) * it as f64 / max_it;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="30">median {metric}</text>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#,
        pad - 4.0,
        pad + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#,
        pad - 4.0,
        h - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{max_it}</text>"#,
        w - pad,
        h - pad + 16.0
    );
    for (k, (method, row)) in traj.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = iters
            .iter()
            .zip(row)
            .filter_map(|(&it, c)| c.map(|c| format!("{:.2},{:.2}", x(it), y(c.median))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = pad + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{method}</text>"#,
            w - pad - 120.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Loads every run directory and writes `aggregate.csv`, `overfitting.csv`
/// and `fd_target.svg` into `out`. Returns the number of runs used.
pub fn write_report(run_dirs: &[&Path], out: &Path) -> Result<usize> {
    let mut runs = Vec::new();
    for d in run_dirs {
        if let Some(r) = load_run(d)? {
            runs.push(r);
        }
    }
    if runs.is_empty() {
        return Err(Error::Contract("no completed runs to report".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("aggregate.csv", aggregate_csv(&runs))?;
    write("overfitting.csv", overfitting_csv(&runs))?;
    write("fd_target.svg", trajectory_svg(&runs, "fd_target"))?;
    Ok(runs.len())
}

/// Expands each path: a directory holding `summary.json` is a run; any
/// other directory contributes its immediate subdirectories that are runs.
pub fn discover_runs(paths: &[&Path]) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("summary.json").is_file() {
            out.push(p.to_path_buf());
            continue;
        }
        let mut subs: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::io(*p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("summary.json").is_file())
            .collect();
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}
