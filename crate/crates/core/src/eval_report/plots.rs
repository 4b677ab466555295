use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AblationTable;
use crate::adapt_engine::{LogRecord, TrainLog};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    /// Stage losses over iterations.
    Loss,
    /// `inter`, `spec` and `dl` over iterations.
    Discrepancy,
    /// Median target PCK against each swept parameter.
    Sensitivity,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [Self::Loss, Self::Discrepancy, Self::Sensitivity];
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "discrepancy" => Ok(Self::Discrepancy),
            "sensitivity" => Ok(Self::Sensitivity),
            _ => Err(Error::Config(format!("unknown plot kind `{s}` (loss, discrepancy, sensitivity)"))),
        }
    }
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

/// Long-format rows `(run, iteration, series, value)`.
fn loss_rows(logs: &[(String, TrainLog)]) -> Vec<(String, usize, &'static str, f64)> {
    let mut rows = Vec::new();
    for (run, log) in logs {
        for r in &log.records {
            match r {
                LogRecord::Pretrain { iteration, losses, .. } => rows.push((run.clone(), *iteration, "pretrain", losses.total)),
                LogRecord::Adapt { iteration, a, b, c, .. } => {
                    rows.push((run.clone(), *iteration, "stage_a", a.total));
                    rows.push((run.clone(), *iteration, "stage_b", b.total));
                    rows.push((run.clone(), *iteration, "stage_c", c.total));
                    rows.push((run.clone(), *iteration, "branch_mse", c.mse));
                }
                LogRecord::Validation { .. } => {}
            }
        }
    }
    rows
}

/// Stage C reports, falling back to Stage B when C ran without the term.
fn discrepancy_rows(logs: &[(String, TrainLog)]) -> Vec<(String, usize, f64, f64, f64)> {
    let mut rows = Vec::new();
    for (run, log) in logs {
        for (iteration, _, _, b, c) in log.adapt_records() {
            if let Some(r) = c.report.as_ref().or(b.report.as_ref()) {
                rows.push((run.clone(), iteration, r.inter, r.spec, r.dl));
            }
        }
    }
    rows
}

fn group_series<'a>(items: impl Iterator<Item = (String, f64, f64)>) -> Series {
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (name, x, y) in items {
        map.entry(name).or_default().push((x, y));
    }
    map.into_iter().collect()
}

fn write(dir: &Path, name: &str, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    out.push(p);
    Ok(())
}

/// Writes one SVG figure and one CSV per requested kind under `out_dir`, and
/// returns the written paths.
pub fn emit_plots(kinds: &[PlotKind], logs: &[(String, TrainLog)], table: Option<&AblationTable>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for &kind in kinds {
        match kind {
            PlotKind::Loss => {
                let rows = loss_rows(logs);
                if rows.is_empty() {
                    return Err(Error::Config("loss plot needs at least one training log with records".into()));
                }
                let mut csv = String::from("run,iteration,series,value\n");
                for (run, it, s, v) in &rows {
                    writeln!(csv, "{run},{it},{s},{v}").unwrap();
                }
                let series = group_series(rows.iter().map(|(run, it, s, v)| (format!("{run}:{s}"), *it as f64, *v)));
                write(out_dir, "loss.csv", &csv, &mut written)?;
                write(out_dir, "loss.svg", &line_chart("Training losses", "iteration", "loss", &series, None), &mut written)?;
            }
            PlotKind::Discrepancy => {
                let rows = discrepancy_rows(logs);
                if rows.is_empty() {
                    return Err(Error::Config("discrepancy plot needs adaptation logs with discrepancy reports".into()));
                }
                let mut csv = String::from("run,iteration,inter,spec,dl\n");
                for (run, it, i, s, d) in &rows {
                    writeln!(csv, "{run},{it},{i},{s},{d}").unwrap();
                }
                let series = group_series(rows.iter().flat_map(|(run, it, i, s, d)| {
                    [("inter", *i), ("spec", *s), ("dl", *d)].map(|(n, v)| (format!("{run}:{n}"), *it as f64, v))
                }));
                write(out_dir, "discrepancy.csv", &csv, &mut written)?;
                let svg = line_chart("Discrepancy terms", "iteration", "value", &series, None);
                write(out_dir, "discrepancy.svg", &svg, &mut written)?;
            }
            PlotKind::Sensitivity => {
                let table = table.ok_or_else(|| Error::Config("sensitivity plot needs an ablation table".into()))?;
                let mut by_param: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
                for row in &table.rows {
                    if let (Some(s), Some(v)) = (&row.sweep, row.overall) {
                        by_param.entry(&s.parameter).or_default().push((s.value, v));
                    }
                }
                if by_param.is_empty() {
                    return Err(Error::Config("the ablation table has no swept arms".into()));
                }
                for (param, mut points) in by_param {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let mut csv = format!("{param},overall\n");
                    for (x, y) in &points {
                        writeln!(csv, "{x},{y}").unwrap();
                    }
                    let ticks: Vec<f64> = points.iter().map(|p| p.0).collect();
                    let series = vec![("median target PCK".to_string(), points.clone())];
                    write(out_dir, &format!("sensitivity_{param}.csv"), &csv, &mut written)?;
                    let svg = line_chart(&format!("Sensitivity to {param}"), param, "PCK", &series, Some(&ticks));
                    write(out_dir, &format!("sensitivity_{param}.svg"), &svg, &mut written)?;
                }
            }
        }
    }
    Ok(written)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal SVG line chart. `x_ticks` pins the x-axis ticks when given.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &Series, x_ticks: Option<&[f64]>) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 180.0, 36.0, 48.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##).unwrap();
    let xt = x_ticks.map(<[f64]>::to_vec).unwrap_or_else(|| nice_ticks(x0, x1));
    for t in xt {
        let x = sx(t);
        writeln!(s, r##"<line class="xtick" x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/>"##, top + ph, top + ph + 4.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 16.0, tick_label(t)).unwrap();
    }
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        writeln!(s, r##"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333"/>"##, left - 4.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, tick_label(t)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label)).unwrap();
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, escape(y_label)).unwrap();
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
        if points.len() <= 20 {
            for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
            }
        }
        let ly = top + 8.0 + 16.0 * i as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 28.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 32.0, ly + 4.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt_engine::{PretrainLosses, StageALosses, StageBLosses, StageCLosses};
    use crate::discrepancy::DiscrepancyReport;
    use crate::eval_report::{AblationRow, SweepPoint};

    fn log() -> TrainLog {
        let mut log = TrainLog::default();
        log.push(LogRecord::Pretrain { iteration: 0, epoch: 0, lr: 1e-3, losses: PretrainLosses { mse: 0.5, oks: 0.25, total: 0.75 } });
        for it in 0..3 {
            let report = DiscrepancyReport::from_terms([0.1 * it as f64, 0.2, 0.05], 0.01);
            log.push(LogRecord::Adapt {
                iteration: it,
                epoch: 0,
                a: StageALosses { supervised: 1.0, warm_second: 0.0, warm_adversarial: 0.0, total: 1.0 },
                b: StageBLosses { heatmap: 0.3, report: None, total: 0.3 },
                c: StageCLosses { mse: 0.2, oks: 0.1, report: Some(report), total: 0.4 + it as f64 },
                probe: None,
            });
        }
        log
    }

    #[test]
    fn one_figure_and_csv_per_kind() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[PlotKind::Loss, PlotKind::Discrepancy], &[("run".into(), log())], None, dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["loss.csv", "loss.svg", "discrepancy.csv", "discrepancy.svg"]);
        let csv = fs::read_to_string(dir.path().join("discrepancy.csv")).unwrap();
        let second: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        let r = DiscrepancyReport::from_terms([0.1, 0.2, 0.05], 0.01);
        assert_eq!(second[2].parse::<f64>().unwrap(), r.inter);
        assert_eq!(second[4].parse::<f64>().unwrap(), r.dl);
        let loss = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(loss.contains("run,0,pretrain,0.75\n"));
        assert!(loss.contains("run,2,stage_c,2.4\n"));
    }

    #[test]
    fn missing_logs_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[PlotKind::Loss], &[], None, dir.path()).is_err());
        assert!(emit_plots(&[PlotKind::Sensitivity], &[], None, dir.path()).is_err());
    }

    #[test]
    fn sweep_plot_has_one_tick_per_arm() {
        let rows = [0.35, 0.45, 0.55, 0.65]
            .iter()
            .map(|&g| AblationRow {
                arm: format!("gamma={g}"),
                sweep: Some(SweepPoint { parameter: "gamma".into(), value: g }),
                per_seed: vec![Some(0.5)],
                overall: Some(0.5 + g / 10.0),
                groups: BTreeMap::new(),
                source: None,
                unseen: None,
                failures: 0,
            })
            .collect();
        let table = AblationTable { plan: "sensitivity".into(), seeds: vec![0], rows, runs: vec![] };
        let dir = tempfile::tempdir().unwrap();
        emit_plots(&[PlotKind::Sensitivity], &[], Some(&table), dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("sensitivity_gamma.csv")).unwrap();
        let xs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(xs, [0.35, 0.45, 0.55, 0.65]);
        let svg = fs::read_to_string(dir.path().join("sensitivity_gamma.svg")).unwrap();
        assert_eq!(svg.matches("class=\"xtick\"").count(), 4);
    }
}
