//! Standalone SVG figures: a trajectory fan over the safe regions and the
//! per-step W2 against the ambiguity radius.

use std::fmt::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::safety::SafeSet;
use crate::sim::{PathEnsemble, SimulationReport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const PAD: f64 = 48.0;
/// Directions used to trace the projected outline of a region.
const OUTLINE_DIRECTIONS: usize = 72;

/// Affine map from data coordinates onto the canvas (y flipped).
struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        let widen = |a: f64, b: f64| {
            let span = (b - a).max(1e-9);
            (a - 0.05 * span, b + 0.05 * span)
        };
        let (x0, x1) = widen(lo[0], hi[0]);
        let (y0, y1) = widen(lo[1], hi[1]);
        Self {
            lo: [x0, y0],
            hi: [x1, y1],
        }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let sx = (WIDTH - 2.0 * PAD) / (self.hi[0] - self.lo[0]);
        let sy = (HEIGHT - 2.0 * PAD) / (self.hi[1] - self.lo[1]);
        (
            PAD + (p[0] - self.lo[0]) * sx,
            HEIGHT - PAD - (p[1] - self.lo[1]) * sy,
        )
    }

    fn corners(&self) -> Vec<[f64; 2]> {
        vec![
            [self.lo[0], self.lo[1]],
            [self.hi[0], self.lo[1]],
            [self.hi[0], self.hi[1]],
            [self.lo[0], self.hi[1]],
        ]
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<title>{title}</title>"#);
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
}

fn axes(out: &mut String, frame: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, y0) = frame.px(frame.lo);
    let (x1, y1) = frame.px(frame.hi);
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        x1 - x0,
        y0 - y1
    );
    for (v, x) in [(frame.lo[0], x0), (frame.hi[0], x1)] {
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{v:.3}</text>"#,
            y0 + 16.0
        );
    }
    for (v, y) in [(frame.lo[1], y0), (frame.hi[1], y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{y:.2}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{xlabel}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">{ylabel}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn polyline(out: &mut String, frame: &Frame, pts: &[[f64; 2]], style: &str) {
    let mut d = String::new();
    for p in pts {
        let (x, y) = frame.px(*p);
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(out, r#"<polyline points="{}" {style}/>"#, d.trim_end());
}

/// Keep the part of `poly` with `a·p ≤ b` (Sutherland–Hodgman, one edge).
fn clip(poly: &[[f64; 2]], a: [f64; 2], b: f64) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| a[0] * p[0] + a[1] * p[1] - b;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (i, &p) in poly.iter().enumerate() {
        let q = poly[(i + 1) % poly.len()];
        let (sp, sq) = (side(p), side(q));
        if sp <= 0.0 {
            out.push(p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            let t = sp / (sp - sq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Projection of a region onto coordinates `(a, b)`, cut to the frame.
fn region_outline(
    region: &crate::safety::ConvexRegion,
    proj: [usize; 2],
    frame: &Frame,
) -> Result<Vec<[f64; 2]>> {
    let mut poly = frame.corners();
    for i in 0..OUTLINE_DIRECTIONS {
        let th = std::f64::consts::TAU * i as f64 / OUTLINE_DIRECTIONS as f64;
        let dir = [th.cos(), th.sin()];
        let mut u = DVector::zeros(region.dim());
        u[proj[0]] = dir[0];
        u[proj[1]] = dir[1];
        if let Some(h) = region.support(&u)? {
            poly = clip(&poly, dir, h);
            if poly.is_empty() {
                break;
            }
        }
    }
    Ok(poly)
}

const PALETTE: [&str; 6] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];

/// Fan of up to `max_paths` trajectories projected on `proj`, drawn over the
/// region outlines, with the ensemble mean in black.
pub fn trajectory_fan_svg(
    ensemble: &PathEnsemble,
    safe_set: &SafeSet,
    proj: [usize; 2],
    max_paths: usize,
) -> Result<String> {
    if ensemble.n_paths == 0 {
        return Err(Error::invalid("cannot render an empty ensemble"));
    }
    if proj[0] >= ensemble.n || proj[1] >= ensemble.n || proj[0] == proj[1] {
        return Err(Error::invalid(format!(
            "projection {proj:?} is not a pair of distinct coordinates below {}",
            ensemble.n
        )));
    }
    if safe_set.dim() != ensemble.n {
        return Err(Error::invalid("safe set and ensemble dimensions differ"));
    }
    let steps = ensemble.k_prime + 1;
    let shown = ensemble.n_paths.min(max_paths.max(1));
    let path = |p: usize| -> Vec<[f64; 2]> {
        (0..steps)
            .map(|k| {
                let x = ensemble.state(p, k);
                [x[proj[0]], x[proj[1]]]
            })
            .collect()
    };
    let paths: Vec<Vec<[f64; 2]>> = (0..shown).map(path).collect();
    let mean: Vec<[f64; 2]> = (0..steps)
        .map(|k| {
            let s = ensemble.states_at(k);
            let n = s.len() as f64;
            [
                s.iter().map(|x| x[proj[0]]).sum::<f64>() / n,
                s.iter().map(|x| x[proj[1]]).sum::<f64>() / n,
            ]
        })
        .collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in paths.iter().flatten() {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    if !(lo[0].is_finite() && lo[1].is_finite() && hi[0].is_finite() && hi[1].is_finite()) {
        return Err(Error::Numerical("ensemble holds non-finite states".into()));
    }
    // Show the regions around the paths, not only the paths.
    let span = [(hi[0] - lo[0]).max(1.0), (hi[1] - lo[1]).max(1.0)];
    let frame = Frame::new(
        [lo[0] - 0.25 * span[0], lo[1] - 0.25 * span[1]],
        [hi[0] + 0.25 * span[0], hi[1] + 0.25 * span[1]],
    );

    let mut out = String::new();
    header(
        &mut out,
        &format!("Trajectory fan ({} of {} paths)", shown, ensemble.n_paths),
    );
    for (j, r) in safe_set.regions().iter().enumerate() {
        let poly = region_outline(r, proj, &frame)?;
        if poly.len() < 3 {
            continue;
        }
        let c = PALETTE[j % PALETTE.len()];
        let mut closed = poly.clone();
        closed.push(poly[0]);
        polyline(
            &mut out,
            &frame,
            &closed,
            &format!(r#"fill="{c}" fill-opacity="0.12" stroke="{c}" stroke-width="1.5""#),
        );
    }
    for p in &paths {
        polyline(
            &mut out,
            &frame,
            p,
            r##"fill="none" stroke="#3060c0" stroke-opacity="0.15" stroke-width="0.8""##,
        );
    }
    polyline(
        &mut out,
        &frame,
        &mean,
        r##"fill="none" stroke="black" stroke-width="2""##,
    );
    axes(
        &mut out,
        &frame,
        &format!("x[{}]", proj[0]),
        &format!("x[{}]", proj[1]),
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Per-step W2 between the true and nominal ensembles, with its standard
/// error band and the radius as a horizontal line.
pub fn w2_chart_svg(report: &SimulationReport) -> Result<String> {
    report.validate()?;
    let pts: Vec<[f64; 2]> = report
        .steps
        .iter()
        .map(|s| [s.t, s.w2_true_nominal])
        .collect();
    let t0 = pts.first().map_or(0.0, |p| p[0]);
    let t1 = pts.last().map_or(1.0, |p| p[0]).max(t0 + 1e-9);
    let top = report
        .steps
        .iter()
        .map(|s| s.w2_true_nominal + 2.0 * s.w2_true_nominal_se)
        .fold(report.rho, f64::max);
    let frame = Frame::new([t0, 0.0], [t1, top * 1.1]);

    let mut out = String::new();
    header(&mut out, "Per-step W2 between true and nominal ensembles");
    let mut band: Vec<[f64; 2]> = report
        .steps
        .iter()
        .map(|s| [s.t, s.w2_true_nominal + 2.0 * s.w2_true_nominal_se])
        .collect();
    band.extend(report.steps.iter().rev().map(|s| {
        [
            s.t,
            (s.w2_true_nominal - 2.0 * s.w2_true_nominal_se).max(0.0),
        ]
    }));
    polyline(
        &mut out,
        &frame,
        &band,
        r##"fill="#3060c0" fill-opacity="0.15" stroke="none""##,
    );
    polyline(
        &mut out,
        &frame,
        &pts,
        r##"fill="none" stroke="#3060c0" stroke-width="2""##,
    );
    for p in &pts {
        let (x, y) = frame.px(*p);
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#3060c0"/>"##
        );
    }
    polyline(
        &mut out,
        &frame,
        &[[t0, report.rho], [t1, report.rho]],
        r##"fill="none" stroke="#c03030" stroke-width="1.5" stroke-dasharray="6 4""##,
    );
    let (lx, ly) = frame.px([t1, report.rho]);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end" fill="#c03030">rho = {}</text>"##,
        lx - 4.0,
        ly - 4.0,
        report.rho
    );
    let label = if report.l1_enabled { "L1 on" } else { "L1 off" };
    axes(&mut out, &frame, &format!("t [s] ({label})"), "W2");
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety::axis_box_region;

    #[test]
    fn clip_keeps_half_of_a_square() {
        let sq = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        let half = clip(&sq, [1.0, 0.0], 1.0);
        let area: f64 = (0..half.len())
            .map(|i| {
                let (p, q) = (half[i], half[(i + 1) % half.len()]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
            / 2.0;
        assert!((area - 2.0).abs() < 1e-12);
    }

    #[test]
    fn box_outline_projects_to_its_rectangle() {
        let r = axis_box_region(4, &[0, 1], &[1.0, 2.0], &[3.0, 5.0]).unwrap();
        let frame = Frame::new([-10.0, -10.0], [10.0, 10.0]);
        let poly = region_outline(&r, [0, 1], &frame).unwrap();
        for p in &poly {
            assert!(p[0] >= 1.0 - 1e-6 && p[0] <= 3.0 + 1e-6);
            assert!(p[1] >= 2.0 - 1e-6 && p[1] <= 5.0 + 1e-6);
        }
        let xs: Vec<f64> = poly.iter().map(|p| p[0]).collect();
        assert!(
            xs.iter().any(|&x| (x - 1.0).abs() < 1e-6)
                && xs.iter().any(|&x| (x - 3.0).abs() < 1e-6)
        );
    }
}
