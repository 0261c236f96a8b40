use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::harness::HarnessResult;

/// `am_id,level,mean_ratio,std,ci_upper,decision`, one row per AM and level.
pub fn write_report_csv(path: &Path, result: &HarnessResult, header_comment: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = header_comment {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push_str("am_id,level,mean_ratio,std,ci_upper,decision\n");
    for t in &result.tests {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{}",
            t.am_id,
            t.level.label(),
            t.mean,
            t.sd,
            t.ci_upper,
            if t.predictable { "predictable" } else { "not-shown-predictable" }
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A labelled bar chart; values may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub value_label: String,
    pub bars: Vec<(String, f64)>,
    /// Bars drawn in the highlight colour.
    pub highlight: Vec<bool>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG with the plotted table embedded in a `<metadata>` block.
pub fn render_bar_chart(chart: &BarChart, comment: Option<&str>) -> String {
    let n = chart.bars.len().max(1);
    let (w, h) = (60.0 + 28.0 * n as f64, 360.0);
    let (top, bottom) = (40.0, 250.0);
    let max = chart.bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let min = chart.bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
    let span = (max - min).max(1e-12);
    let y = |v: f64| top + (max - v) / span * (bottom - top);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, "<metadata>");
    if let Some(c) = comment {
        let _ = writeln!(s, "{}", escape(c));
    }
    let _ = writeln!(s, "label,{}", escape(&chart.value_label));
    for (l, v) in &chart.bars {
        let _ = writeln!(s, "{},{v:.6}", escape(l));
    }
    let _ = writeln!(s, "</metadata>");
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(&chart.title));
    let _ = writeln!(s, r#"<line x1="40" x2="{}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#, w - 10.0, y(0.0), y(0.0));
    for (i, (label, v)) in chart.bars.iter().enumerate() {
        let x = 45.0 + 28.0 * i as f64;
        let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
        let colour = if chart.highlight.get(i).copied().unwrap_or(false) { "#c0392b" } else { "#7f8c8d" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y0:.2}" width="20" height="{:.2}" fill="{colour}"><title>{}: {v:.4}</title></rect>"#,
            (y1 - y0).max(0.5),
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(60)">{}</text>"#,
            x + 6.0,
            bottom + 8.0,
            escape(label)
        );
    }
    let _ = writeln!(s, r#"<text x="10" y="{:.1}" transform="rotate(-90 10 {:.1})">{}</text>"#, (top + bottom) / 2.0, (top + bottom) / 2.0, escape(&chart.value_label));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_embeds_table() {
        let c = BarChart {
            title: "t".into(),
            value_label: "1 - CI_u".into(),
            bars: vec![("a".into(), 0.2), ("b<".into(), -0.1)],
            highlight: vec![true, false],
        };
        let svg = render_bar_chart(&c, Some("seed 1"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a,0.200000"));
        assert!(svg.contains("b&lt;,-0.100000"));
        assert!(svg.contains("seed 1"));
    }
}
