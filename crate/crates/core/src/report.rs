//! Per-class tables, SVG bar charts and cross-run comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// `class,num_truths,num_predictions,included,ap@<δ>...` for the
/// individually reported tolerances.
pub fn per_class_csv(report: &MetricsReport) -> String {
    let deltas = &report.eval.deltas;
    let mut out = String::from("class,num_truths,num_predictions,included");
    for d in deltas {
        let _ = write!(out, ",ap@{d}");
    }
    out.push('\n');
    for (c, class) in report.classes.iter().enumerate() {
        let _ = write!(
            out,
            "{},{},{},{}",
            class.class_name, class.num_truths, class.num_predictions, class.included
        );
        for &d in deltas {
            let _ = write!(out, ",{}", report.class_ap_at(c, d).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bar chart with values in `[0, 1]`: one group per category, one
/// bar per series.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (width, height) = (120.0 + 90.0 * categories.len().max(1) as f64, 320.0);
    let (left, top, bottom) = (50.0, 40.0, 60.0);
    let plot_h = height - top - bottom;
    let group_w = (width - left - 20.0) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (g, cat) in categories.iter().enumerate() {
        let x0 = left + g as f64 * group_w + group_w * 0.1;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                x0 + k as f64 * bar_w,
                top + plot_h - h,
                bar_w,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + group_w * 0.4,
            top + plot_h + 16.0,
            escape(cat)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let y = height - 20.0;
        let x = left + k as f64 * 130.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `per_class_ap.csv` and `per_class_ap.svg` for one report.
pub fn write_per_class_plots(dir: &Path, report: &MetricsReport) -> Result<()> {
    let csv_path = dir.join("per_class_ap.csv");
    std::fs::write(&csv_path, per_class_csv(report)).map_err(|e| Error::io(&csv_path, e))?;
    let categories: Vec<String> = report.classes.iter().map(|c| c.class_name.clone()).collect();
    let series: Vec<(String, Vec<f64>)> = report
        .eval
        .deltas
        .iter()
        .map(|&d| {
            let values = (0..categories.len())
                .map(|c| report.class_ap_at(c, d).unwrap_or(0.0))
                .collect();
            (format!("δ={d}"), values)
        })
        .collect();
    let svg_path = dir.join("per_class_ap.svg");
    std::fs::write(&svg_path, bar_chart_svg("Per-class AP", &categories, &series)).map_err(|e| Error::io(&svg_path, e))
}

/// One row of a comparison table.
pub struct RunRow {
    pub name: String,
    pub num_parameters: usize,
    pub report: MetricsReport,
}

/// Markdown table with mAP per reported tolerance, range mAPs and per-class
/// AP at the primary tolerance. All runs must share one evaluation spec.
pub fn comparison_table(runs: &[RunRow]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Eval("no runs to compare".into()))?;
    let eval = &first.report.eval;
    let names: Vec<&str> = first.report.classes.iter().map(|c| c.class_name.as_str()).collect();
    for r in runs {
        if r.report.eval != *eval {
            return Err(Error::Eval(format!(
                "run `{}` used a different evaluation spec",
                r.name
            )));
        }
        if r.report
            .classes
            .iter()
            .map(|c| c.class_name.as_str())
            .collect::<Vec<_>>()
            != names
        {
            return Err(Error::Eval(format!("run `{}` has different classes", r.name)));
        }
    }
    let mut out = String::from("| run | params |");
    for d in &eval.deltas {
        let _ = write!(out, " mAP@{d} |");
    }
    out.push_str(" tight | loose |");
    for n in &names {
        let _ = write!(out, " {n} AP@{} |", eval.primary_delta);
    }
    out.push('\n');
    let cols = 4 + eval.deltas.len() + names.len();
    out.push('|');
    out.push_str(&"---|".repeat(cols));
    out.push('\n');
    for r in runs {
        let _ = write!(out, "| {} | {} |", r.name, r.num_parameters);
        for &d in &eval.deltas {
            let _ = write!(out, " {:.4} |", r.report.map_at(d).unwrap_or(f64::NAN));
        }
        let _ = write!(out, " {:.4} | {:.4} |", r.report.tight_map, r.report.loose_map);
        for c in 0..names.len() {
            let _ = write!(
                out,
                " {:.4} |",
                r.report.class_ap_at(c, eval.primary_delta).unwrap_or(f64::NAN)
            );
        }
        out.push('\n');
    }
    Ok(out)
}
