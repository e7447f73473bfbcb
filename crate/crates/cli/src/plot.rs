//! Minimal SVG rendering of a global envelope.

use std::fmt::Write as _;
use std::path::Path;

use rshift::io::{read_json, write_atomic};
use rshift::{Envelope, TestResult};

use crate::error::{CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct Plotted {
    /// Whether "observed inside the envelope iff p > alpha" holds.
    pub coherent: bool,
    pub p_value: f64,
}

pub fn envelope_plot(result: &Path, out: &Path) -> Result<Plotted> {
    let res: TestResult = read_json(result)?;
    let env = res
        .envelope
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{}: scalar result has no envelope to plot", result.display())))?;
    if env.r.is_empty() || env.lo.len() != env.r.len() || env.hi.len() != env.r.len() || env.observed.len() != env.r.len()
    {
        return Err(CliError::Parse(format!("{}: malformed envelope", result.display())));
    }
    let svg = render(&res, env);
    write_atomic(out, svg.as_bytes())?;
    Ok(Plotted {
        coherent: env.contains_observed() == (res.p_value > env.alpha),
        p_value: res.p_value,
    })
}

fn render(res: &TestResult, env: &Envelope) -> String {
    let (x0, x1) = (env.r[0].min(0.0), *env.r.last().expect("non-empty"));
    let all = env.lo.iter().chain(&env.hi).chain(&env.observed).copied();
    let (mut y0, mut y1) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(y1 - y0).is_finite() || y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let mut band: Vec<String> = env.r.iter().zip(&env.hi).map(|(&r, &v)| pt(sx(r), sy(v))).collect();
    band.extend(env.r.iter().zip(&env.lo).rev().map(|(&r, &v)| pt(sx(r), sy(v))));
    let _ = writeln!(s, r##"<polygon points="{}" fill="#c8c8c8" stroke="none"/>"##, band.join(" "));

    let line: Vec<String> = env.r.iter().zip(&env.observed).map(|(&r, &v)| pt(sx(r), sy(v))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, line.join(" "));
    for ((&r, &o), (&l, &h)) in env.r.iter().zip(&env.observed).zip(env.lo.iter().zip(&env.hi)) {
        if o < l || o > h {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="red"/>"#, sx(r), sy(o));
        }
    }

    // axes and ticks
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            LEFT - 6.0,
            sy(yv),
            tick(yv)
        );
    }
    let ylabel = if res.variance_method.is_some() { "standardized K12(r)" } else { "K12(r)" };
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">r</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="24">{}: p = {:.4} (N = {}, {:.0}% global envelope)</text>"#,
        escape(&res.strategy),
        res.p_value,
        res.n_shifts,
        100.0 * (1.0 - env.alpha)
    );
    s.push_str("</svg>\n");
    s
}

fn pt(x: f64, y: f64) -> String {
    format!("{x:.2},{y:.2}")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
