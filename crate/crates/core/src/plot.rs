//! SVG emitters: log-log scaling plots and overhead scene views.
//!
//! Overhead views draw the drivable area, map polylines, nearby agents, the
//! target history, ground truth in blue and predicted modes in red.

use std::fmt::Write as _;

use crate::geometry::{OrientedBox, Vec2};
use crate::scaling::PowerLawFit;
use crate::scene::{MapSemantic, Scene};

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct LogAxes {
    x: (f64, f64),
    y: (f64, f64),
}

impl LogAxes {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x.log10() - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y.log10() - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn log_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| *v > 0.0 && v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let (lo, hi) = (lo.log10(), hi.log10());
    let pad = ((hi - lo) * 0.05).max(0.05);
    (lo - pad, hi + pad)
}

/// Log-log scatter of each series with an optional fitted line.
pub fn loglog_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], fit: Option<&PowerLawFit>) -> String {
    let axes = LogAxes {
        x: log_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: log_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for e in (axes.x.0.ceil() as i32)..=(axes.x.1.floor() as i32) {
        let x = axes.px(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{MARGIN}" stroke="#ddd"/>"##, H - MARGIN);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#, H - MARGIN + 16.0);
    }
    for e in (axes.y.0.ceil() as i32)..=(axes.y.1.floor() as i32) {
        let y = axes.py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{MARGIN}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, W - MARGIN);
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">1e{e}</text>"#, MARGIN - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            ser.points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| format!("{:.1},{:.1}", axes.px(p.0), axes.py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * (i + 1) as f64,
            escape(&ser.label)
        );
    }
    if let Some(f) = fit {
        let (x0, x1) = (10f64.powf(axes.x.0), 10f64.powf(axes.x.1));
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="5,4"/>"#,
            axes.px(x0),
            axes.py(f.predict(x0)),
            axes.px(x1),
            axes.py(f.predict(x1))
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">log y = {:.3} log x + {:.3} (R² {:.3})</text>"#,
            MARGIN + 8.0,
            H - MARGIN - 8.0,
            f.slope,
            f.intercept,
            f.r_squared
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overhead view of a scene with ground truth and predicted modes, framed
/// around the target's current position.
pub fn overhead_svg(scene: &Scene, modes: &[Vec<Vec2>], probs: &[f64], extent: f64) -> String {
    let center = scene.current().position;
    let scale = (W.min(H) - 20.0) / (2.0 * extent);
    let tx = |p: Vec2| ((p.x - center.x) * scale + W / 2.0, H / 2.0 - (p.y - center.y) * scale);
    let path = |pts: &[Vec2]| pts.iter().map(|&p| tx(p)).map(|(x, y)| format!("{x:.1},{y:.1}")).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#f4f4f4"/>"##);
    for poly in &scene.drivable_area {
        let _ = writeln!(s, r##"<polygon points="{}" fill="#d9d9d9"/>"##, path(&poly.points));
    }
    for pl in &scene.map {
        let (color, dash) = match pl.semantic {
            MapSemantic::LaneCenter => ("#aaaaaa", "4,4"),
            MapSemantic::LaneBoundary => ("#ffffff", "8,6"),
            MapSemantic::RoadEdge => ("#333333", "none"),
            MapSemantic::Crosswalk => ("#ffffff", "2,2"),
        };
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="{dash}"/>"#, path(&pl.points));
    }
    for a in &scene.nearby {
        if let Some(st) = a.states.iter().rev().find(|st| st.valid) {
            let b = OrientedBox { center: st.position, heading: st.heading, length: a.length, width: a.width };
            let _ = writeln!(s, r##"<polygon points="{}" fill="#888888" stroke="black"/>"##, path(&b.corners()));
        }
    }
    let cur = scene.current();
    let (l, w) = scene.target_kind.footprint();
    let ego = OrientedBox { center: cur.position, heading: cur.heading, length: l, width: w };
    let _ = writeln!(s, r##"<polygon points="{}" fill="#4a4a4a" stroke="black"/>"##, path(&ego.corners()));
    let hist: Vec<Vec2> = scene.target_history.iter().filter(|st| st.valid).map(|st| st.position).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#, path(&hist));
    for (k, m) in modes.iter().enumerate() {
        let opacity = probs.get(k).map_or(1.0, |p| 0.3 + 0.7 * p.clamp(0.0, 1.0));
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2" stroke-opacity="{opacity:.2}"/>"#, path(m));
    }
    if let Some(gt) = &scene.future_gt {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="blue" stroke-width="2"/>"#, path(gt));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::fit_power_law;

    #[test]
    fn loglog_contains_points_and_fit() {
        let pts = vec![(1e3, 3.0), (1e4, 2.5), (1e5, 2.1)];
        let fit = fit_power_law(&pts).unwrap();
        let svg = loglog_svg("data <scaling>", "D", "loss", &[Series { label: "d32".into(), points: pts }], Some(&fit));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("&lt;scaling&gt;") && svg.contains("stroke-dasharray"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn overhead_draws_gt_and_modes() {
        let cfg = crate::simulator::WorldConfig::default();
        let scene = crate::simulator::generate_scene(&cfg, 0).unwrap();
        let modes = vec![scene.future_gt.clone().unwrap(); 2];
        let svg = overhead_svg(&scene, &modes, &[0.6, 0.4], 60.0);
        assert_eq!(svg.matches(r#"stroke="red""#).count(), 2);
        assert_eq!(svg.matches(r#"stroke="blue""#).count(), 1);
    }
}
