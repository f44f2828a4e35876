//! Comparison tables, plot series and a small SVG line chart, all derived
//! from saved reports so rendering is a pure function of the run directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{PositionBucket, PositionSummary};
use crate::metrics::{self, significance, stars, MetricReport};

/// Columns of the default comparison table.
pub const DEFAULT_COLUMNS: [&str; 13] = [
    metrics::HR,
    metrics::NDCG,
    metrics::APLT,
    metrics::SERENDIPITY,
    metrics::SELF_INFO,
    metrics::ARP,
    metrics::POP_REO,
    metrics::ITEM_COVERAGE,
    metrics::OIC,
    metrics::GINI,
    metrics::DPD,
    metrics::JAIN,
    metrics::HALLUCINATION,
];

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", self.header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.header.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let fields: Vec<String> = r.iter().map(|f| csv_field(f)).collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }
}

/// p-value of `row` against `reference` on one per-user metric: paired
/// when both score the same users, Welch otherwise. `None` for metrics
/// without per-user values or with fewer than two users.
pub fn metric_p_value(row: &MetricReport, reference: &MetricReport, metric: &str) -> Option<f64> {
    let a = row.column(metric);
    let b = reference.column(metric);
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let paired = a.keys().eq(b.keys());
    let xs: Vec<f64> = a.values().copied().collect();
    let ys: Vec<f64> = b.values().copied().collect();
    significance(&xs, &ys, paired).ok()
}

/// One row per report, one column per metric. Per-user metrics carry
/// significance stars against the row at `reference`; the reference row
/// itself is unmarked.
pub fn comparison_table(rows: &[(String, MetricReport)], columns: &[&str], reference: usize) -> Table {
    let mut header = vec!["run".to_string(), "model".into(), "strategy".into(), "L".into()];
    header.extend(columns.iter().map(|c| c.to_string()));
    let base = rows.get(reference).map(|(_, r)| r);
    let body = rows
        .iter()
        .enumerate()
        .map(|(n, (label, r))| {
            let mut cells = vec![
                label.clone(),
                r.metadata.model.clone(),
                r.metadata.strategy.clone(),
                r.metadata.history_length.map(|l| l.to_string()).unwrap_or_else(|| "all".into()),
            ];
            for m in columns {
                let cell = match r.get(m) {
                    None => "-".to_string(),
                    Some(v) => {
                        let mark = match base {
                            Some(b) if n != reference => metric_p_value(r, b, m).map(stars).unwrap_or(""),
                            _ => "",
                        };
                        format!("{v:.4}{mark}")
                    }
                };
                cells.push(cell);
            }
            cells
        })
        .collect();
    Table { header, rows: body }
}

/// `length,<metric>...` rows, sorted by length.
pub fn history_series(points: &[(usize, &MetricReport)], columns: &[&str]) -> Table {
    let mut pts: Vec<&(usize, &MetricReport)> = points.iter().collect();
    pts.sort_by_key(|(l, _)| *l);
    let mut header = vec!["length".to_string()];
    header.extend(columns.iter().map(|c| c.to_string()));
    let rows = pts
        .iter()
        .map(|(l, r)| {
            std::iter::once(l.to_string())
                .chain(columns.iter().map(|m| r.get(m).map(|v| v.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    Table { header, rows }
}

pub fn position_series(buckets: &[PositionBucket]) -> Table {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    Table {
        header: ["start", "end", "users", "hits", "HR", "NDCG"].map(String::from).to_vec(),
        rows: buckets
            .iter()
            .map(|b| {
                vec![
                    b.start.to_string(),
                    b.end.to_string(),
                    b.users.to_string(),
                    b.hits.to_string(),
                    opt(b.hr),
                    opt(b.ndcg),
                ]
            })
            .collect(),
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A static line chart. Axes span the data range; y always includes 0.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == 0.0 {
        y1 = 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / y1 * (h - 2.0 * m);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    for t in 0..=4 {
        let y = y1 * t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, m - 6.0, sy(y) + 4.0);
        let x = x0 + (x1 - x0) * t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.1}</text>"#, sx(x), h - m + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 15.0, esc(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{0}" text-anchor="middle" transform="rotate(-90 15 {0})">{1}</text>"#,
        h / 2.0,
        esc(y_label)
    );
    for (n, (name, p)) in series.iter().enumerate() {
        let colour = PALETTE[n % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * n as f64,
            esc(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Every `report.json` below `root`, keyed by its directory relative to
/// `root` (`.` for the top level), in path order.
pub fn collect_reports(root: &Path) -> Result<Vec<(String, MetricReport)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir.display().to_string(), e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "report.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|p| {
            let rel = p.parent().and_then(|d| d.strip_prefix(root).ok()).map(Path::to_path_buf).unwrap_or_default();
            let label = if rel.as_os_str().is_empty() {
                ".".to_string()
            } else {
                rel.to_string_lossy().replace('\\', "/")
            };
            Ok((label, MetricReport::read_json(&p)?))
        })
        .collect()
}

/// Render tables and series from a run directory into `<root>/report/`.
/// Returns the files written, relative to `root`.
pub fn render_run_directory(root: &Path, reference: Option<&str>, svg: bool) -> Result<Vec<String>> {
    let out_dir = root.join("report");
    let reports: Vec<(String, MetricReport)> = collect_reports(root)?
        .into_iter()
        .filter(|(l, _)| !l.starts_with("report"))
        .collect();
    if reports.is_empty() {
        return Err(Error::MissingArtifact {
            path: root.join("eval/report.json"),
            stage: "eval",
        });
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        crate::rundir::write_atomic(&out_dir.join(name), body.as_bytes())?;
        written.push(format!("report/{name}"));
        Ok(())
    };
    let reference_row = match reference {
        None => 0,
        Some(r) => reports
            .iter()
            .position(|(l, rep)| {
                l == r || l.strip_suffix("/eval") == Some(r) || rep.metadata.model.eq_ignore_ascii_case(r)
            })
            .ok_or_else(|| {
                let labels: Vec<&str> = reports.iter().map(|(l, _)| l.as_str()).collect();
                Error::invalid(format!("reference `{r}` matches no run; runs: {}", labels.join(", ")))
            })?,
    };
    let table = comparison_table(&reports, &DEFAULT_COLUMNS, reference_row);
    emit("table.md", table.to_markdown())?;
    emit("table.csv", table.to_csv())?;

    let sweep: Vec<(usize, &MetricReport)> = reports
        .iter()
        .filter(|(l, _)| l.starts_with("sweep/"))
        .filter_map(|(_, r)| r.metadata.history_length.map(|len| (len, r)))
        .collect();
    if !sweep.is_empty() {
        let series = history_series(&sweep, &[metrics::HR, metrics::NDCG]);
        emit("history_series.csv", series.to_csv())?;
        if svg {
            let curve = |m: &str| -> (String, Vec<(f64, f64)>) {
                let mut pts: Vec<(f64, f64)> = sweep.iter().map(|(l, r)| (*l as f64, r.get(m).unwrap_or(0.0))).collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (m.to_string(), pts)
            };
            emit(
                "history_series.svg",
                line_chart_svg("Accuracy by history length", "history length", "score", &[curve(metrics::HR), curve(metrics::NDCG)]),
            )?;
        }
    }

    let summary_path = root.join("position/summary.json");
    if summary_path.exists() {
        let summary: PositionSummary = crate::rundir::read_json(&summary_path)?;
        emit("position_series.csv", position_series(&summary.buckets).to_csv())?;
        if svg {
            let pts = |f: fn(&PositionBucket) -> Option<f64>| -> Vec<(f64, f64)> {
                summary
                    .buckets
                    .iter()
                    .filter_map(|b| f(b).map(|v| (b.start as f64, v)))
                    .collect()
            };
            emit(
                "position_series.svg",
                line_chart_svg(
                    "Accuracy by positive position",
                    "first position in bucket",
                    "score",
                    &[("HR".into(), pts(|b| b.hr)), ("NDCG".into(), pts(|b| b.ndcg))],
                ),
            )?;
        }
    }
    Ok(written)
}
