//! Error-map figure: one frontal scatter panel per filtering level, all
//! sharing a colour scale.

use std::fmt::Write as _;

use voxface::geometry::Mesh;

const PANEL: f64 = 260.0;
const MARGIN: f64 = 20.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue (low) to red (high).
fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u8;
    let g = (90.0 + 80.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (230.0 - 200.0 * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn render_error_maps(mesh: &Mesh, panels: &[(String, Vec<f64>)], stamp: &str) -> String {
    let xs: Vec<f64> = mesh.vertices.iter().map(|v| v[0]).collect();
    let ys: Vec<f64> = mesh.vertices.iter().map(|v| v[1]).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let (y0, y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let scale = (PANEL - 2.0 * MARGIN) / (x1 - x0).max(y1 - y0).max(1e-9);
    let hi = panels
        .iter()
        .flat_map(|p| p.1.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);

    let n = panels.len().max(1);
    let (w, h) = (PANEL * n as f64, PANEL + 60.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<metadata>\n{}", escape(stamp));
    let _ = write!(s, "vertex,x,y");
    for (label, _) in panels {
        let _ = write!(s, ",{}", escape(label));
    }
    s.push('\n');
    for (v, p) in mesh.vertices.iter().enumerate() {
        let _ = write!(s, "{v},{:.4},{:.4}", p[0], p[1]);
        for (_, field) in panels {
            let _ = write!(s, ",{:.6}", field[v]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "</metadata>");
    for (i, (label, field)) in panels.iter().enumerate() {
        let ox = PANEL * i as f64;
        let mean = field.iter().sum::<f64>() / field.len().max(1) as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="16" text-anchor="middle">{} (mean {mean:.3} mm)</text>"#,
            ox + PANEL / 2.0,
            escape(label)
        );
        for (v, p) in mesh.vertices.iter().enumerate() {
            let cx = ox + MARGIN + (p[0] - x0) * scale;
            let cy = 24.0 + MARGIN + (y1 - p[1]) * scale;
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2.2" fill="{}"/>"#, colour(field[v] / hi));
        }
    }
    // colour bar
    let bar_y = PANEL + 30.0;
    for k in 0..50 {
        let t = k as f64 / 49.0;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{bar_y}" width="4" height="10" fill="{}"/>"#,
            MARGIN + 4.0 * k as f64,
            colour(t)
        );
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{:.1}">0</text>"#, bar_y + 24.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{hi:.3} mm</text>"#, MARGIN + 200.0, bar_y + 24.0);
    s.push_str("</svg>\n");
    s
}
