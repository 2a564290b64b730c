//! Gaussian sequence CSV files and SVG trajectory plots.

use std::fmt::Write as _;
use std::path::Path;

use epd_core::data::Point;
use epd_core::gaussian::{GaussianSeq, StepGaussian};

use crate::error::{Error, Result};

pub const GAUSSIAN_HEADER: [&str; 6] = ["t", "mux", "muy", "sigx", "sigy", "rho"];

/// One row per future step, `t` counting from 1.
pub fn gaussian_csv(dist: &GaussianSeq) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(GAUSSIAN_HEADER).expect("in-memory write");
    for (i, s) in dist.steps().iter().enumerate() {
        w.write_record(&[
            (i + 1).to_string(),
            format!("{:?}", s.mu[0]),
            format!("{:?}", s.mu[1]),
            format!("{:?}", s.sigma[0]),
            format!("{:?}", s.sigma[1]),
            format!("{:?}", s.rho),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn parse_gaussian_csv(path: &Path, text: &str) -> Result<GaussianSeq> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(GAUSSIAN_HEADER) {
        return Err(Error::format(path, format!("expected header {}", GAUSSIAN_HEADER.join(","))));
    }
    let mut steps = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let v = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        if v.len() != 6 || v[0] != (i + 1) as f64 {
            return Err(Error::format(path, format!("row {}: bad step index or width", i + 1)));
        }
        steps.push(StepGaussian {
            mu: [v[1], v[2]],
            sigma: [v[3], v[4]],
            rho: v[5],
        });
    }
    Ok(GaussianSeq::new(steps)?)
}

/// Semi-axes and rotation (degrees) of the one-sigma ellipse.
pub fn ellipse_axes(s: &StepGaussian) -> (f64, f64, f64) {
    let a = s.sigma[0] * s.sigma[0];
    let d = s.sigma[1] * s.sigma[1];
    let b = s.rho * s.sigma[0] * s.sigma[1];
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + r, (mean - r).max(0.0));
    let angle = 0.5 * (2.0 * b).atan2(a - d);
    (l1.sqrt(), l2.sqrt(), angle.to_degrees())
}

/// Everything drawn by [`svg_plot`]. Coordinates are in metres.
pub struct PlotInput<'a> {
    pub title: &'a str,
    pub past: &'a [Point],
    pub truth: Option<&'a [Point]>,
    pub plan: Option<&'a GaussianSeq>,
    pub denoised: &'a GaussianSeq,
    pub samples: &'a [Vec<Point>],
}

const PLAN_COLOR: &str = "#d95f02";
const DENOISED_COLOR: &str = "#1b9e77";
const SAMPLE_COLOR: &str = "#7570b3";
const TRUTH_COLOR: &str = "#000000";

fn polyline(out: &mut String, pts: &[Point], color: &str, width: f64, extra: &str) {
    let coords: Vec<String> = pts.iter().map(|p| format!("{:.5},{:.5}", p[0], p[1])).collect();
    let _ = writeln!(
        out,
        r#"    <polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" vector-effect="non-scaling-stroke"{extra}/>"#,
        coords.join(" ")
    );
}

fn ellipses(out: &mut String, dist: &GaussianSeq, color: &str, class: &str) {
    for s in dist.steps() {
        let (rx, ry, deg) = ellipse_axes(s);
        for (k, opacity) in [(1.0, 0.8), (2.0, 0.4)] {
            let _ = writeln!(
                out,
                r#"    <ellipse class="{class}-{k}sigma" cx="{:.5}" cy="{:.5}" rx="{:.5}" ry="{:.5}" transform="rotate({deg:.3} {:.5} {:.5})" fill="none" stroke="{color}" stroke-opacity="{opacity}" stroke-width="1" vector-effect="non-scaling-stroke"/>"#,
                s.mu[0],
                s.mu[1],
                k * rx,
                k * ry,
                s.mu[0],
                s.mu[1],
            );
        }
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders a standalone SVG document with the y axis pointing up.
pub fn svg_plot(input: &PlotInput<'_>) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut add = |p: Point| {
        if p[0].is_finite() && p[1].is_finite() {
            xs.push(p[0]);
            ys.push(p[1]);
        }
    };
    input.past.iter().for_each(|&p| add(p));
    input.truth.unwrap_or(&[]).iter().for_each(|&p| add(p));
    input.samples.iter().flatten().for_each(|&p| add(p));
    for d in input.plan.into_iter().chain(Some(input.denoised)) {
        for s in d.steps() {
            let r = 2.0 * s.sigma[0].max(s.sigma[1]);
            add([s.mu[0] - r, s.mu[1] - r]);
            add([s.mu[0] + r, s.mu[1] + r]);
        }
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut x0, mut x1, mut y0, mut y1) = (min(&xs), max(&xs), min(&ys), max(&ys));
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(0.1);
    let (x0, y0, w, h) = (x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let scale = 600.0 / w.max(h);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{x0:.5} {:.5} {w:.5} {h:.5}">"#,
        w * scale,
        h * scale,
        -(y0 + h),
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(input.title));
    let _ = writeln!(out, r#"  <g transform="scale(1,-1)">"#);
    if let Some(plan) = input.plan {
        ellipses(&mut out, plan, PLAN_COLOR, "plan");
    }
    ellipses(&mut out, input.denoised, DENOISED_COLOR, "denoised");
    let start = input.past.last().copied();
    for s in input.samples {
        let pts: Vec<Point> = start.into_iter().chain(s.iter().copied()).collect();
        polyline(&mut out, &pts, SAMPLE_COLOR, 0.8, r#" stroke-opacity="0.6" class="sample""#);
    }
    polyline(&mut out, input.past, TRUTH_COLOR, 2.0, r#" class="past""#);
    if let Some(truth) = input.truth {
        let pts: Vec<Point> = start.into_iter().chain(truth.iter().copied()).collect();
        polyline(&mut out, &pts, TRUTH_COLOR, 2.0, r#" stroke-dasharray="4 2" class="truth""#);
    }
    let _ = writeln!(out, "  </g>");
    out.push_str("</svg>\n");
    out
}
