//! Minimal SVG figures: planar scenes, latent scatters and loss curves.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::env::PlanarEnv;
use crate::trainer::History;

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                if p[d].is_finite() {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
        }
        for d in 0..2 {
            if !(lo[d] < hi[d]) {
                let c = if lo[d].is_finite() { lo[d] } else { 0.0 };
                lo[d] = c - 1.0;
                hi[d] = c + 1.0;
            }
        }
        Frame { lo, hi }
    }

    fn scale(&self) -> f64 {
        (SIZE - 2.0 * PAD) / (self.hi[0] - self.lo[0]).max(self.hi[1] - self.lo[1])
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let s = self.scale();
        (
            PAD + (p[0] - self.lo[0]) * s,
            SIZE - PAD - (p[1] - self.lo[1]) * s,
        )
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn polyline(
    out: &mut String,
    frame: &Frame,
    pts: &[[f64; 2]],
    stroke: &str,
    width: f64,
    opacity: f64,
) {
    let mut d = String::new();
    for p in pts {
        let (x, y) = frame.map(*p);
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
        d.trim_end()
    );
}

/// Obstacles at time `t` and labelled trajectories.
pub fn scene_svg(env: &PlanarEnv, trajectories: &[(Vec<DVector<f64>>, usize)], t: f64) -> String {
    let [lo, hi] = env.bounds;
    let frame = Frame { lo, hi };
    let mut out = String::new();
    header(&mut out);
    let s = frame.scale();
    for o in &env.obstacles {
        if !o.is_static() {
            let path: Vec<[f64; 2]> = o.waypoints.iter().map(|w| w.center).collect();
            polyline(&mut out, &frame, &path, "#999999", 1.0, 0.8);
        }
        let (x, y) = frame.map(o.center(t));
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="#555555" fill-opacity="0.6"/>"##,
            o.radius * s
        );
    }
    for (traj, label) in trajectories {
        let pts: Vec<[f64; 2]> = traj.iter().map(|q| [q[0], q[1]]).collect();
        polyline(&mut out, &frame, &pts, color(*label), 1.5, 0.8);
    }
    for (p, fill) in [(env.start, "#000000"), (env.goal, "#000000")] {
        let (x, y) = frame.map(p);
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{fill}"/>"#
        );
    }
    out.push_str("</svg>\n");
    out
}

/// First two latent coordinates of labelled codes, plus unlabelled samples.
pub fn latent_svg(codes: &[(DVector<f64>, usize)], samples: &[DVector<f64>]) -> String {
    let xy = |z: &DVector<f64>| [z[0], if z.len() > 1 { z[1] } else { 0.0 }];
    let frame = Frame::fit(
        codes
            .iter()
            .map(|(z, _)| xy(z))
            .chain(samples.iter().map(xy)),
    );
    let mut out = String::new();
    header(&mut out);
    for z in samples {
        let (x, y) = frame.map(xy(z));
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="#aaaaaa"/>"##
        );
    }
    for (z, label) in codes {
        let (x, y) = frame.map(xy(z));
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"/>"#,
            color(*label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Log-scale loss curves: total, reconstruction and (if present) distortion.
pub fn loss_svg(history: &History) -> String {
    let series: Vec<(&[f64], usize)> = [
        (&history.total[..], 0usize),
        (&history.reconstruction[..], 1),
        (&history.distortion[..], 2),
    ]
    .into_iter()
    .filter(|(s, _)| s.iter().any(|v| v.is_finite() && *v > 0.0))
    .collect();
    let log_pts = |s: &[f64]| -> Vec<[f64; 2]> {
        s.iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite() && **v > 0.0)
            .map(|(i, v)| [i as f64, v.log10()])
            .collect()
    };
    let all: Vec<[f64; 2]> = series.iter().flat_map(|(s, _)| log_pts(s)).collect();
    let bounds = Frame::fit(all.iter().copied());
    // independent axis scales, unlike the isotropic scene frame
    let sx = (SIZE - 2.0 * PAD) / (bounds.hi[0] - bounds.lo[0]);
    let sy = (SIZE - 2.0 * PAD) / (bounds.hi[1] - bounds.lo[1]);
    let mut out = String::new();
    header(&mut out);
    for (s, k) in &series {
        let mut d = String::new();
        for [x, y] in log_pts(s) {
            let _ = write!(
                d,
                "{:.2},{:.2} ",
                PAD + (x - bounds.lo[0]) * sx,
                SIZE - PAD - (y - bounds.lo[1]) * sy
            );
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.trim_end(),
            color(*k)
        );
    }
    out.push_str("</svg>\n");
    out
}
