//! Minimal SVG charts for reports: bars, scatter and line plots.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x1 - self.x0).max(f64::EPSILON);
        LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y1 - self.y0).max(f64::EPSILON);
        H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0,
        esc(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    s
}

fn axes(s: &mut String, f: &Frame, yticks: usize) {
    let (xa, xb) = (LEFT, W - RIGHT);
    let (ya, yb) = (TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<line x1="{xa}" y1="{yb}" x2="{xb}" y2="{yb}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{xa}" y1="{ya}" x2="{xa}" y2="{yb}" stroke="black"/>"#);
    for i in 0..=yticks {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / yticks as f64;
        let y = f.py(v);
        let _ = writeln!(s, r##"<line x1="{xa}" y1="{y:.1}" x2="{xb}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            xa - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn x_ticks(s: &mut String, f: &Frame, n: usize) {
    for i in 0..=n {
        let v = f.x0 + (f.x1 - f.x0) * i as f64 / n as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(v),
            H - BOTTOM + 16.0,
            tick(v)
        );
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One bar per label; values share a zero-based axis up to `y_max`.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)], y_max: f64) -> String {
    let mut s = open(title, "", ylabel);
    let f = Frame {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0: 0.0,
        y1: y_max,
    };
    axes(&mut s, &f, 5);
    for (i, (label, v)) in bars.iter().enumerate() {
        let (xa, xb) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let (ya, yb) = (f.py(v.clamp(0.0, y_max)), f.py(0.0));
        let _ = writeln!(
            s,
            r##"<rect x="{xa:.1}" y="{ya:.1}" width="{:.1}" height="{:.1}" fill="#4477aa"/>"##,
            xb - xa,
            yb - ya
        );
        let cx = (xa + xb) / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.1}</text>"#,
            ya - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{}" text-anchor="end" transform="rotate(-35 {cx:.1} {})">{}</text>"#,
            H - BOTTOM + 14.0,
            H - BOTTOM + 14.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn scatter(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
    let mut s = open(title, xlabel, ylabel);
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let f = Frame { x0, x1, y0, y1 };
    axes(&mut s, &f, 5);
    x_ticks(&mut s, &f, 5);
    for &(x, y) in pts {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#cc6677" fill-opacity="0.6"/>"##,
            f.px(x),
            f.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn line(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
    let mut s = open(title, xlabel, ylabel);
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let f = Frame { x0, x1, y0, y1 };
    axes(&mut s, &f, 5);
    x_ticks(&mut s, &f, 5);
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#228833" stroke-width="1.5"/>"##,
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}
