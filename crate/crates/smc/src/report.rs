//! Run-log CSV format, cross-seed aggregation and SVG accuracy curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::trainer::MetricsRecord;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed run-log row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no run logs given")]
    Empty,
}

pub const RUN_LOG_HEADER: &str =
    "epoch,step,lambda,loss_total,loss_ce,loss_kl_sum,train_top1,val_top1,seconds";

/// Serializes one run: `# config:` and `# config-hash:` header lines, the
/// column header, one row per record. Fixed float formatting keeps repeated
/// runs byte-identical.
pub fn run_log_to_string(
    config_json: &str,
    config_hash: &str,
    records: &[MetricsRecord],
) -> String {
    let mut out = String::new();
    writeln!(out, "# config: {config_json}").unwrap();
    writeln!(out, "# config-hash: {config_hash}").unwrap();
    writeln!(out, "{RUN_LOG_HEADER}").unwrap();
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            r.epoch,
            r.step,
            r.lambda,
            r.loss_total,
            r.loss_ce,
            r.loss_kl_sum,
            r.train_top1,
            r.val_top1,
            r.seconds
        )
        .unwrap();
    }
    out
}

/// One parsed run log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub path: PathBuf,
    pub config_json: String,
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
}

impl RunLog {
    pub fn name(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }

    /// Highest validation accuracy over all rows, with its epoch.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for r in &self.records {
            if r.val_top1 > best.1 {
                best = (r.epoch, r.val_top1);
            }
        }
        best
    }

    pub fn final_val(&self) -> f64 {
        self.records.last().map(|r| r.val_top1).unwrap_or(f64::NAN)
    }
}

pub fn parse_run_log(path: &Path) -> Result<RunLog, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config_json = String::new();
    let mut config_hash = String::new();
    let mut records = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let bad = |reason: &str| ReportError::MalformedRow {
            path: path.to_path_buf(),
            line: row,
            reason: reason.to_string(),
        };
        if let Some(rest) = line.strip_prefix("# config-hash: ") {
            config_hash = rest.to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("# config: ") {
            config_json = rest.to_string();
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if line != RUN_LOG_HEADER {
                return Err(bad("missing column header"));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(&format!("expected 9 fields, got {}", fields.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        records.push(MetricsRecord {
            epoch: fields[0].parse().map_err(|_| bad("bad epoch"))?,
            step: fields[1].parse().map_err(|_| bad("bad step"))?,
            lambda: f(fields[2])?,
            loss_total: f(fields[3])?,
            loss_ce: f(fields[4])?,
            loss_kl_sum: f(fields[5])?,
            train_top1: f(fields[6])?,
            val_top1: f(fields[7])?,
            seconds: f(fields[8])?,
        });
    }
    if !seen_header {
        return Err(ReportError::MalformedRow {
            path: path.to_path_buf(),
            line: line_count(&text),
            reason: "no column header found".to_string(),
        });
    }
    Ok(RunLog {
        path: path.to_path_buf(),
        config_json,
        config_hash,
        records,
    })
}

fn line_count(text: &str) -> usize {
    text.lines().count().max(1)
}

/// Population (not sample) statistics, mirroring small-seed-count tables.
pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs sharing a config hash, aggregated.
#[derive(Debug, Clone)]
pub struct GroupSummary {
    pub config_hash: String,
    pub runs: Vec<usize>,
    pub mean_best: f64,
    pub std_best: f64,
    pub mean_final: f64,
    pub std_final: f64,
}

/// Groups logs by config hash (insertion order) and aggregates best/final
/// validation accuracy across the runs of each group.
pub fn summarize(logs: &[RunLog]) -> Result<Vec<GroupSummary>, ReportError> {
    if logs.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, log) in logs.iter().enumerate() {
        match groups.iter_mut().find(|(h, _)| *h == log.config_hash) {
            Some((_, members)) => members.push(i),
            None => groups.push((log.config_hash.clone(), vec![i])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(config_hash, runs)| {
            let bests: Vec<f64> = runs.iter().map(|&i| logs[i].best().1).collect();
            let finals: Vec<f64> = runs.iter().map(|&i| logs[i].final_val()).collect();
            let (mean_best, std_best) = mean_and_population_std(&bests);
            let (mean_final, std_final) = mean_and_population_std(&finals);
            GroupSummary {
                config_hash,
                runs,
                mean_best,
                std_best,
                mean_final,
                std_final,
            }
        })
        .collect())
}

/// Plain-text report: one line per run, then one line per config group with
/// mean +/- population stddev.
pub fn render_table(logs: &[RunLog]) -> Result<String, ReportError> {
    let groups = summarize(logs)?;
    let mut out = String::new();
    writeln!(out, "per-run (population stddev in group rows):").unwrap();
    for log in logs {
        let (epoch, best) = log.best();
        writeln!(
            out,
            "  {:<32} hash={} best={:.4} (epoch {}) final={:.4}",
            log.name(),
            log.config_hash,
            best,
            epoch,
            log.final_val()
        )
        .unwrap();
    }
    writeln!(out, "groups:").unwrap();
    for g in &groups {
        writeln!(
            out,
            "  hash={} runs={} best={:.4} +/- {:.4} final={:.4} +/- {:.4}",
            g.config_hash,
            g.runs.len(),
            g.mean_best,
            g.std_best,
            g.mean_final,
            g.std_final
        )
        .unwrap();
    }
    Ok(out)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 18.0;
const MARGIN_B: f64 = 44.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Validation-accuracy-vs-epoch curves, one polyline per run.
pub fn render_svg(logs: &[RunLog]) -> Result<String, ReportError> {
    if logs.is_empty() {
        return Err(ReportError::Empty);
    }
    let max_epoch = logs
        .iter()
        .flat_map(|l| l.records.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |epoch: f64| MARGIN_L + (epoch / max_epoch) * (SVG_W - MARGIN_L - MARGIN_R);
    let y = |acc: f64| MARGIN_T + (1.0 - acc) * (SVG_H - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#).unwrap();
    // Axes.
    writeln!(
        out,
        r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/><line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        l = MARGIN_L,
        t = MARGIN_T,
        b = SVG_H - MARGIN_B,
        r = SVG_W - MARGIN_R
    )
    .unwrap();
    for tick in 0..=10 {
        let acc = tick as f64 / 10.0;
        writeln!(
            out,
            r##"<line x1="{x0}" y1="{yy:.1}" x2="{x1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{tx}" y="{ty:.1}" font-size="10" text-anchor="end">{acc:.1}</text>"##,
            x0 = MARGIN_L,
            x1 = SVG_W - MARGIN_R,
            yy = y(acc),
            tx = MARGIN_L - 6.0,
            ty = y(acc) + 3.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">epoch</text>"#,
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        SVG_H - 12.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">val top-1</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    )
    .unwrap();

    for (i, log) in logs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = log
            .records
            .iter()
            .filter(|r| r.val_top1.is_finite())
            .map(|r| format!("{:.1},{:.1}", x(r.epoch as f64), y(r.val_top1)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#,
            MARGIN_L + 8.0,
            MARGIN_T + 14.0 + 13.0 * i as f64,
            esc(&log.name())
        )
        .unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, val: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            step: epoch as u64 * 10,
            lambda: 0.1,
            loss_total: 1.0,
            loss_ce: 0.9,
            loss_kl_sum: 0.1,
            train_top1: 0.5,
            val_top1: val,
            seconds: 0.0,
        }
    }

    fn write_log(dir: &Path, name: &str, hash: &str, vals: &[f64]) -> PathBuf {
        let records: Vec<MetricsRecord> =
            vals.iter().enumerate().map(|(i, &v)| record(i, v)).collect();
        let text = run_log_to_string("{\"m\":1}", hash, &records);
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn roundtrip_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_log(dir.path(), "a.csv", "h1", &[0.1, 0.5, 0.4]);
        let log = parse_run_log(&p).unwrap();
        assert_eq!(log.config_hash, "h1");
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.best(), (1, 0.5));
        assert!((log.final_val() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn nan_loss_fields_parse() {
        let records = vec![MetricsRecord {
            loss_total: f64::NAN,
            ..record(0, 0.1)
        }];
        let text = run_log_to_string("{}", "h", &records);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        std::fs::write(&p, text).unwrap();
        let log = parse_run_log(&p).unwrap();
        assert!(log.records[0].loss_total.is_nan());
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_log(dir.path(), "a.csv", "h1", &[0.1]);
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("1,2,three\n");
        std::fs::write(&p, text).unwrap();
        let err = parse_run_log(&p).unwrap_err();
        match err {
            ReportError::MalformedRow { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn three_seed_aggregation_hand_value() {
        let dir = tempfile::tempdir().unwrap();
        let logs: Vec<RunLog> = [0.70, 0.71, 0.72]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = write_log(dir.path(), &format!("s{i}.csv"), "same", &[v]);
                parse_run_log(&p).unwrap()
            })
            .collect();
        let groups = summarize(&logs).unwrap();
        assert_eq!(groups.len(), 1);
        assert!((groups[0].mean_best - 0.71).abs() < 1e-12);
        assert!((groups[0].std_best - 0.008164965809277).abs() < 1e-9);
    }

    #[test]
    fn empty_log_set_is_usage_error() {
        assert!(matches!(summarize(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn svg_has_one_polyline_per_run_and_balanced_tags() {
        let dir = tempfile::tempdir().unwrap();
        let logs: Vec<RunLog> = (0..3)
            .map(|i| {
                let p = write_log(dir.path(), &format!("r{i}.csv"), "h", &[0.2, 0.4, 0.6]);
                parse_run_log(&p).unwrap()
            })
            .collect();
        let svg = render_svg(&logs).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        // Cheap well-formedness check: every tag closes.
        let opens = svg.matches('<').count();
        let closes = svg.matches('>').count();
        assert_eq!(opens, closes);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
