//! Static HTML/SVG views: mask grids, token heatmaps and sweep curves.

use std::fmt::Write as _;

use crate::attribution::AttributionResult;
use crate::eval::CorruptionReport;
use crate::headmask::HeadMask;
use crate::model::ModelConfig;

const CELL: usize = 28;
const SYNTACTIC: &str = "#4c72b0";
const POSITIONAL: &str = "#dd8452";
const BOTH: &str = "#8172b2";
const KEPT: &str = "#55a868";
const OFF: &str = "#eeeeee";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n\
         <style>body{{font-family:sans-serif;margin:2em}} td.tok{{padding:2px 4px;border:1px solid #ddd}} \
         td.special{{color:#999}} th{{text-align:left;padding-right:1em}}</style>\n</head>\n<body>\n<h1>{t}</h1>\n{body}</body>\n</html>\n",
        t = escape(title)
    )
}

/// Color class of one mask cell.
pub fn cell_class(mask: &HeadMask, block: usize, head: usize) -> &'static str {
    if !mask.get(block, head) {
        return "off";
    }
    let sources = mask.sources(block, head);
    match (
        sources.iter().any(|s| s.is_syntactic()),
        sources.iter().any(|s| s.is_positional()),
    ) {
        (true, true) => "both",
        (true, false) => "syntactic",
        (false, true) => "positional",
        (false, false) => "kept",
    }
}

fn class_color(class: &str) -> &'static str {
    match class {
        "both" => BOTH,
        "syntactic" => SYNTACTIC,
        "positional" => POSITIONAL,
        "kept" => KEPT,
        _ => OFF,
    }
}

/// Blocks as rows, heads as columns.
pub fn mask_grid_svg(mask: &HeadMask) -> String {
    let (left, top) = (60, 30);
    let w = left + mask.heads() * CELL + 10;
    let h = top + mask.blocks() * CELL + 70;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for m in 0..mask.heads() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">h{m}</text>",
            left + m * CELL + CELL / 2,
            top - 8
        );
    }
    for b in 0..mask.blocks() {
        let y = top + b * CELL;
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">block {b}</text>", y + CELL / 2 + 4);
        for m in 0..mask.heads() {
            let class = cell_class(mask, b, m);
            let _ = writeln!(
                s,
                "<rect class=\"{class}\" x=\"{}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#fff\"><title>block {b} head {m}: {class}</title></rect>",
                left + m * CELL,
                CELL,
                CELL,
                class_color(class)
            );
        }
    }
    let legend_y = top + mask.blocks() * CELL + 20;
    for (i, class) in ["syntactic", "positional", "both", "kept", "off"].iter().enumerate() {
        let x = 4 + i * 80;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{legend_y}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{class}</text>",
            class_color(class),
            x + 16,
            legend_y + 10
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn mask_grid_html(mask: &HeadMask) -> String {
    let body = format!(
        "<p>{} of {} heads kept (rate {:.3}).</p>\n{}",
        mask.ones(),
        mask.blocks() * mask.heads(),
        mask.rate(),
        mask_grid_svg(mask)
    );
    page("Head mask", &body)
}

/// One row per result; each row's scores are divided by its maximum.
/// `labels` replaces raw token ids when given.
pub fn token_heatmap_html(cfg: &ModelConfig, results: &[AttributionResult], labels: Option<&[String]>) -> String {
    let mut body = String::from("<table>\n");
    if let Some(first) = results.first() {
        body.push_str("<tr><th></th>");
        for (j, &id) in first.ids.iter().enumerate() {
            let label = labels.and_then(|l| l.get(j)).cloned().unwrap_or_else(|| id.to_string());
            let _ = write!(body, "<td class=\"tok\"><small>{j}</small><br>{}</td>", escape(&label));
        }
        body.push_str("</tr>\n");
    }
    for r in results {
        let max = r.scores.iter().cloned().fold(0.0, f64::max);
        let _ = write!(body, "<tr><th>{}</th>", r.method);
        for (j, &score) in r.scores.iter().enumerate() {
            let special = cfg.is_special(r.ids[j]);
            let v = if max > 0.0 { score / max } else { 0.0 };
            let alpha = if special { 0.0 } else { v };
            let _ = write!(
                body,
                "<td class=\"tok{}\" style=\"background:rgba(214,39,40,{alpha:.3})\" title=\"{score:e}\">{v:.2}</td>",
                if special { " special" } else { "" }
            );
        }
        body.push_str("</tr>\n");
    }
    body.push_str("</table>\n");
    if results.iter().any(|r| r.degenerate) {
        body.push_str("<p>Rows marked degenerate fell back to uniform scores.</p>\n");
    }
    let title = if results.len() > 1 { "Attribution comparison" } else { "Attribution" };
    page(title, &body)
}

/// Mean ± stddev of the sweep against the corruption rate, with the GAE
/// level as a dashed line. Plots AOPC, or precision for QA.
pub fn corruption_curve_svg(report: &CorruptionReport) -> String {
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let qa = report.points.iter().all(|p| p.aggregate.aopc.is_none());
    let pick = |a: &crate::eval::Aggregate| -> (f64, f64) {
        if qa {
            (a.precision.unwrap_or(0.0), a.precision_std.unwrap_or(0.0))
        } else {
            (a.aopc.unwrap_or(0.0), a.aopc_std.unwrap_or(0.0))
        }
    };
    let gae = pick(&report.gae).0;
    let values: Vec<(f64, f64, f64)> = report
        .points
        .iter()
        .map(|p| {
            let (m, s) = pick(&p.aggregate);
            (p.rho, m, s)
        })
        .collect();
    let lo = values.iter().map(|v| v.1 - v.2).chain([gae]).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.1 + v.2).chain([gae]).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let x = |rho: f64| pad + rho * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#000\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"#000\"/>",
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">corruption rate</text><text x=\"12\" y=\"{pad}\">{}</text>",
        w / 2.0,
        h - 12.0,
        if qa { "precision@k" } else { "AOPC" }
    );
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{label:.3}</text>", y(v) + 4.0);
    }
    if !values.is_empty() {
        let mut band: Vec<String> = values.iter().map(|v| format!("{:.2},{:.2}", x(v.0), y(v.1 + v.2))).collect();
        band.extend(values.iter().rev().map(|v| format!("{:.2},{:.2}", x(v.0), y(v.1 - v.2))));
        let _ = writeln!(s, "<polygon class=\"band\" points=\"{}\" fill=\"#4c72b0\" fill-opacity=\"0.2\"/>", band.join(" "));
        let line: Vec<String> = values.iter().map(|v| format!("{:.2},{:.2}", x(v.0), y(v.1))).collect();
        let _ = writeln!(s, "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"#4c72b0\" stroke-width=\"2\"/>", line.join(" "));
        for v in &values {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#4c72b0\"><title>rho {}: {:.4} ± {:.4}</title></circle>",
                x(v.0),
                y(v.1),
                v.0,
                v.1,
                v.2
            );
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x(v.0), h - pad + 14.0, v.0);
        }
    }
    let _ = writeln!(
        s,
        "<line class=\"gae\" x1=\"{pad}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"#c44e52\" stroke-dasharray=\"4 3\"/><text x=\"{1}\" y=\"{2:.2}\" text-anchor=\"end\" fill=\"#c44e52\">GAE</text>",
        y(gae),
        w - pad,
        y(gae) - 4.0
    );
    s.push_str("</svg>\n");
    s
}
