//! Minimal SVG line charts: one polyline plus one marker per data point.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    Linear { min: f64, max: f64 },
    /// Both bounds must be positive.
    Log10 { min: f64, max: f64 },
}

impl Axis {
    /// Position of `v` in `[0, 1]`, clamped.
    fn fraction(&self, v: f64) -> f64 {
        let f = match *self {
            Axis::Linear { min, max } => (v - min) / (max - min),
            Axis::Log10 { min, max } => (v.log10() - min.log10()) / (max.log10() - min.log10()),
        };
        if f.is_finite() {
            f.clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    fn ticks(&self) -> Vec<f64> {
        match *self {
            Axis::Linear { min, max } => (0..=4).map(|i| min + (max - min) * i as f64 / 4.0).collect(),
            Axis::Log10 { min, max } => {
                let lo = min.log10().ceil() as i32;
                let hi = max.log10().floor() as i32;
                (lo..=hi).map(|e| 10f64.powi(e)).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64, axis: &Axis) -> String {
    match axis {
        Axis::Log10 { .. } => format!("1e{}", v.log10().round() as i32),
        Axis::Linear { .. } if v.fract() == 0.0 => format!("{v:.0}"),
        Axis::Linear { .. } => format!("{v:.2}"),
    }
}

pub fn line_chart(c: &Chart) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + c.x_axis.fraction(x) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - c.y_axis.fraction(y)) * plot_h;

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(&c.title)
    );
    let _ = writeln!(
        w,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for t in c.x_axis.ticks() {
        let x = px(t);
        let _ = writeln!(
            w,
            r##"<line x1="{x:.2}" y1="{MARGIN_TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 18.0,
            tick_label(t, &c.x_axis)
        );
    }
    for t in c.y_axis.ticks() {
        let y = py(t);
        let _ = writeln!(
            w,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            tick_label(t, &c.y_axis)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 16.0,
        escape(&c.x_label)
    );
    let _ = writeln!(
        w,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(&c.y_label)
    );
    let coords: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(
        w,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        coords.join(" ")
    );
    for &(x, y) in &c.points {
        let _ = writeln!(w, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, px(x), py(y));
    }
    s.push_str("</svg>\n");
    s
}
