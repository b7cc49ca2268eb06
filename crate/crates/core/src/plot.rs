//! Self-contained SVG charts for parameter reports and metric tables.
//! Output depends only on the input values, so identical inputs give
//! identical bytes.

use std::fmt::Write;

use crate::error::{invalid, Result};
use crate::harness::ParamReport;
use crate::metrics::MetricTable;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 60.0;

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Three panels (training forward, inference, total) with one line per
/// algorithm over task steps.
pub fn param_report_svg(report: &ParamReport) -> Result<String> {
    if report.rows.is_empty() {
        return invalid("parameter report has no rows");
    }
    let mut algos: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !algos.contains(&r.algo.as_str()) {
            algos.push(&r.algo);
        }
    }
    let max_step = report
        .rows
        .iter()
        .map(|r| r.task_step)
        .max()
        .unwrap_or(1)
        .max(1);
    let panels: [(&str, fn(&crate::harness::ParamCounts) -> usize); 3] = [
        ("training forward", |c| c.training_forward),
        ("inference", |c| c.inference),
        ("total size", |c| c.total),
    ];
    let width = 3.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 16.0 * algos.len() as f64;
    let mut out = String::new();
    header(&mut out, width, height);
    for (pi, (title, pick)) in panels.iter().enumerate() {
        let x0 = MARGIN + pi as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let values: Vec<usize> = report.rows.iter().map(|r| pick(&r.counts)).collect();
        let lo = *values.iter().min().unwrap_or(&0) as f64;
        let hi = *values.iter().max().unwrap_or(&1) as f64;
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (lo, span) = (lo - 0.05 * span, span * 1.1);
        let px = |step: usize| {
            x0 + if max_step > 1 {
                (step - 1) as f64 / (max_step - 1) as f64 * PANEL_W
            } else {
                PANEL_W / 2.0
            }
        };
        let py = |v: usize| y0 + PANEL_H - (v as f64 - lo) / span * PANEL_H;
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="gray"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 10.0
        );
        for step in 1..=max_step {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{step}</text>"#,
                px(step),
                y0 + PANEL_H + 14.0
            );
        }
        for (frac, anchor) in [(0.0, "start"), (1.0, "start")] {
            let v = lo + span * (if frac == 0.0 { 0.05 / 1.1 } else { 1.05 / 1.1 });
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-size="9">{:.0}</text>"#,
                x0 + 2.0,
                y0 + PANEL_H - (v - lo) / span * PANEL_H - 2.0,
                v
            );
        }
        for (ai, algo) in algos.iter().enumerate() {
            let color = PALETTE[ai % PALETTE.len()];
            let mut pts: Vec<(usize, usize)> = report
                .rows
                .iter()
                .filter(|r| r.algo == *algo)
                .map(|r| (r.task_step, pick(&r.counts)))
                .collect();
            pts.sort();
            let path: Vec<String> = pts
                .iter()
                .map(|&(s, v)| format!("{:.1},{:.1}", px(s), py(v)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for &(s, v) in &pts {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    px(s),
                    py(v)
                );
            }
        }
    }
    for (ai, algo) in algos.iter().enumerate() {
        let y = MARGIN + PANEL_H + 34.0 + 16.0 * ai as f64;
        let color = PALETTE[ai % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            MARGIN + 18.0,
            y,
            escape(algo)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars: per-task transfer for every method, plus the overall
/// transfer as the last group.
pub fn metric_table_svg(table: &MetricTable) -> Result<String> {
    if table.rows.is_empty() || table.task_ids.is_empty() {
        return invalid("metric table has no rows");
    }
    let mut groups: Vec<(String, Vec<f64>)> = table
        .task_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.clone(),
                table.rows.iter().map(|r| r.cells[i].transfer).collect(),
            )
        })
        .collect();
    groups.push((
        "overall".into(),
        table.rows.iter().map(|r| r.overall).collect(),
    ));
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let hi = all.iter().copied().fold(0.0f64, f64::max);
    let lo = all.iter().copied().fold(0.0f64, f64::min);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n_methods = table.rows.len() as f64;
    let group_w = 30.0 + 18.0 * n_methods;
    let plot_w = group_w * groups.len() as f64;
    let plot_h = 260.0;
    let width = plot_w + 2.0 * MARGIN;
    let height = plot_h + 2.0 * MARGIN + 60.0 + 16.0 * n_methods;
    let py = |v: f64| MARGIN + plot_h - (v - lo) / span * plot_h;
    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">knowledge transfer (%)</text>"#,
        MARGIN + plot_w / 2.0,
        MARGIN - 20.0
    );
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        py(0.0),
        MARGIN + plot_w,
        py(0.0)
    );
    for v in [lo, hi] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="9">{v:.2}</text>"#,
            MARGIN - 4.0,
            py(v) + 3.0
        );
    }
    for (gi, (label, values)) in groups.iter().enumerate() {
        let gx = MARGIN + gi as f64 * group_w + 15.0;
        for (mi, v) in values.iter().enumerate() {
            let x = gx + 18.0 * mi as f64;
            let (top, bottom) = if *v >= 0.0 {
                (py(*v), py(0.0))
            } else {
                (py(0.0), py(*v))
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{top:.1}" width="14" height="{:.1}" fill="{}"/>"#,
                (bottom - top).max(0.5),
                PALETTE[mi % PALETTE.len()]
            );
        }
        let cx = gx + 9.0 * n_methods;
        let ly = MARGIN + plot_h + 14.0;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-30 {cx:.1} {ly:.1})">{}</text>"#,
            escape(label)
        );
    }
    for (mi, row) in table.rows.iter().enumerate() {
        let y = MARGIN + plot_h + 70.0 + 16.0 * mi as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[mi % PALETTE.len()],
            MARGIN + 18.0,
            escape(&row.method)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Picks the chart from the CSV header.
pub fn svg_from_csv(text: &str) -> Result<String> {
    let first = text.lines().find(|l| !l.trim().is_empty());
    match first {
        None => invalid("nothing to plot: the input is empty"),
        Some(h) if h.trim() == crate::harness::PARAM_HEADER => {
            param_report_svg(&ParamReport::from_csv(text)?)
        }
        Some(h) if h.starts_with("method,") => metric_table_svg(&MetricTable::from_csv(text)?),
        Some(h) => invalid(format!("unrecognised table header {h:?}")),
    }
}
