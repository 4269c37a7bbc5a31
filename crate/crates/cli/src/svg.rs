//! Static SVG band plots of reconstructed curves.

use std::fmt::Write;

use acr_core::metrics::z_level;
use acr_core::reconstruct::ReconstructedCurve;

const WIDTH: f64 = 900.0;
const PANEL: f64 = 260.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One panel per curve: mean line, shaded 90% band and anchor markers.
pub fn band_plot(curves: &[ReconstructedCurve]) -> String {
    let z = z_level(0.9);
    let height = MARGIN + curves.len().max(1) as f64 * (PANEL + MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, c) in curves.iter().enumerate() {
        let top = MARGIN + i as f64 * (PANEL + MARGIN);
        let (left, right) = (MARGIN + 20.0, WIDTH - MARGIN);
        let pts = &c.points;
        let t0 = pts.first().map_or(0.0, |p| p.t);
        let t1 = pts.last().map_or(1.0, |p| p.t).max(t0 + 1e-9);
        let lo = pts.iter().map(|p| p.mean - z * p.std()).fold(f64::INFINITY, f64::min).min(0.0);
        let hi = pts.iter().map(|p| p.mean + z * p.std()).fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
        let x = |t: f64| left + (t - t0) / (t1 - t0) * (right - left);
        let y = |v: f64| top + PANEL - (v - lo) / (hi - lo) * PANEL;

        let _ = writeln!(
            s,
            r#"<text x="{left}" y="{:.1}" font-family="sans-serif" font-size="14">{} ({})</text>"#,
            top - 8.0,
            escape(c.lane.as_str()),
            c.mode.as_str()
        );
        let _ = writeln!(
            s,
            r##"<rect x="{left}" y="{top}" width="{:.1}" height="{PANEL}" fill="none" stroke="#888"/>"##,
            right - left
        );
        if !pts.is_empty() {
            let mut band = String::new();
            for p in pts {
                let _ = write!(band, "{:.2},{:.2} ", x(p.t), y(p.mean + z * p.std()));
            }
            for p in pts.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", x(p.t), y(p.mean - z * p.std()));
            }
            let _ = writeln!(s, r##"<polygon points="{}" fill="#4a90d9" fill-opacity="0.3" stroke="none"/>"##, band.trim_end());
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.t), y(p.mean))).collect();
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f4e8c" stroke-width="1.2"/>"##, line.join(" "));
        }
        for &(t, v) in &c.anchors {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#c0392b"/>"##, x(t), y(v));
        }
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="{:.1}" font-family="sans-serif" font-size="11">t = {t0:.0} s</text>"#,
            top + PANEL + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{right}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">t = {t1:.0} s</text>"#,
            top + PANEL + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{hi:.0}</text>"#,
            left - 4.0,
            top + 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{lo:.0}</text>"#,
            left - 4.0,
            top + PANEL
        );
    }
    s.push_str("</svg>\n");
    s
}
