//! Static three-panel plot of a sweep against `ε*`.

use std::fmt::Write as _;

use super::SweepTable;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 50.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.05 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn panel(out: &mut String, index: usize, title: &str, y_label: &str, series: &[Series]) {
    let x0 = MARGIN + index as f64 * (PANEL_W + MARGIN);
    let y0 = MARGIN;
    let (xmin, xmax) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (ymin, ymax) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
    let sy = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;

    let _ = writeln!(
        out,
        r#"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">ε*</text>"#,
        x0 + PANEL_W / 2.0,
        y0 + PANEL_H + 34.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.1} {:.1})">{y_label}</text>"#,
        x0 - 38.0,
        y0 + PANEL_H / 2.0,
        x0 - 38.0,
        y0 + PANEL_H / 2.0
    );
    for t in 0..=4 {
        let fx = xmin + (xmax - xmin) * t as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * t as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{fx:.3}</text>"#,
            sx(fx),
            y0 + PANEL_H + 14.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="9">{}</text>"#,
            x0 - 4.0,
            sy(fy) + 3.0,
            tick(fy)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            pts.join(" "),
            s.color
        );
        let ly = y0 + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}"{dash}/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            x0 + PANEL_W - 110.0,
            x0 + PANEL_W - 90.0,
            s.color,
            x0 + PANEL_W - 86.0,
            ly + 3.0,
            s.label
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Satisfaction rate, cost relative to the robust baseline, and solve time,
/// each against `ε*`. Timing is left out when `timing` is false.
pub fn sweep_svg(table: &SweepTable, digest_line: &str, timing: bool) -> String {
    let mut rows: Vec<_> = table.rows.iter().collect();
    rows.sort_by(|a, b| a.epsilon_star.total_cmp(&b.epsilon_star));
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon_star).collect();
    let panels = if timing { 3 } else { 2 };
    let width = MARGIN + panels as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 20.0;
    let comment = digest_line.trim_start_matches('#').trim().replace("--", "- -");
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, "<!-- {comment} -->");
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(
        &mut out,
        0,
        "Out-of-sample satisfaction",
        "1 − violation rate",
        &[
            Series {
                label: "observed",
                color: "#1f77b4",
                dashed: false,
                points: rows.iter().map(|r| (r.epsilon_star, 1.0 - r.joint_violation)).collect(),
            },
            Series {
                label: "1 − ε*",
                color: "#d62728",
                dashed: true,
                points: eps.iter().map(|&e| (e, 1.0 - e)).collect(),
            },
        ],
    );
    panel(
        &mut out,
        1,
        "Cost relative to robust",
        "cost / robust cost",
        &[Series {
            label: "cost ratio",
            color: "#2ca02c",
            dashed: false,
            points: rows.iter().map(|r| (r.epsilon_star, r.cost_vs_ro)).collect(),
        }],
    );
    if timing {
        panel(
            &mut out,
            2,
            "Solve time",
            "seconds",
            &[Series {
                label: "time",
                color: "#9467bd",
                dashed: false,
                points: rows.iter().map(|r| (r.epsilon_star, r.time_s)).collect(),
            }],
        );
    }
    out.push_str("</svg>\n");
    out
}
