//! SVG rendering of a scene in the BEV frame, optionally with predictions.

use std::fmt::Write as _;

use crate::eval::PredScene;
use crate::geom::{BevRange, ClassId, Point, Scene};

const PX_PER_M: f64 = 10.0;
const MARGIN: f64 = 48.0;
const LEGEND_W: f64 = 150.0;

pub fn class_color(c: ClassId) -> &'static str {
    match c {
        ClassId::Divider => "#ff8c00",
        ClassId::PedCrossing => "#1f5fd6",
        ClassId::Boundary => "#1a9b3c",
    }
}

/// Ego-frame x to the right, y up.
struct Frame {
    range: BevRange,
}

impl Frame {
    fn px(&self, p: Point) -> (f64, f64) {
        (MARGIN + (p[0] - self.range.x_min) * PX_PER_M, MARGIN + (self.range.y_max - p[1]) * PX_PER_M)
    }

    fn width(&self) -> f64 {
        (self.range.x_max - self.range.x_min) * PX_PER_M
    }

    fn height(&self) -> f64 {
        (self.range.y_max - self.range.y_min) * PX_PER_M
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn shape(out: &mut String, f: &Frame, class: ClassId, closed: bool, points: &[Point], extra: &str) {
    let pts: Vec<String> = points
        .iter()
        .map(|&p| {
            let (x, y) = f.px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let tag = if closed { "polygon" } else { "polyline" };
    let _ = writeln!(
        out,
        "    <{tag} class=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{extra}/>",
        class.name(),
        pts.join(" "),
        class_color(class)
    );
}

fn axes(out: &mut String, f: &Frame) {
    let r = f.range;
    let (x0, y0) = (MARGIN, MARGIN);
    let y1 = MARGIN + f.height();
    let _ = writeln!(out, "  <g id=\"axes\" stroke=\"#444\" font-size=\"10\" font-family=\"sans-serif\">");
    let _ = writeln!(out, "    <rect x=\"{x0}\" y=\"{y0}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\"/>", f.width(), f.height());
    let step = 5.0;
    let mut x = (r.x_min / step).ceil() * step;
    while x <= r.x_max + 1e-9 {
        let (px, _) = f.px([x, r.y_min]);
        let _ = writeln!(out, "    <line x1=\"{px:.2}\" y1=\"{y1:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\"/>", y1 + 4.0);
        let _ = writeln!(out, "    <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\" stroke=\"none\">{x}</text>", y1 + 16.0);
        x += step;
    }
    let mut y = (r.y_min / step).ceil() * step;
    while y <= r.y_max + 1e-9 {
        let (_, py) = f.px([r.x_min, y]);
        let _ = writeln!(out, "    <line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{x0:.2}\" y2=\"{py:.2}\"/>", x0 - 4.0);
        let _ = writeln!(out, "    <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" stroke=\"none\">{y}</text>", x0 - 6.0, py + 3.0);
        y += step;
    }
    let _ = writeln!(out, "    <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" stroke=\"none\">x (m)</text>", x0 + f.width() / 2.0, y1 + 32.0);
    let _ = writeln!(
        out,
        "    <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" stroke=\"none\" transform=\"rotate(-90 {:.2} {:.2})\">y (m)</text>",
        x0 - 32.0,
        y0 + f.height() / 2.0,
        x0 - 32.0,
        y0 + f.height() / 2.0
    );
    let _ = writeln!(out, "  </g>");
}

fn legend(out: &mut String, f: &Frame) {
    let x = MARGIN + f.width() + 20.0;
    let _ = writeln!(out, "  <g id=\"legend\" font-size=\"11\" font-family=\"sans-serif\">");
    let mut y = MARGIN + 10.0;
    for c in ClassId::ALL {
        let _ = writeln!(
            out,
            "    <line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"3\"/>",
            x + 24.0,
            class_color(c)
        );
        let _ = writeln!(out, "    <text x=\"{:.2}\" y=\"{:.2}\">{}</text>", x + 30.0, y + 4.0, c.name());
        y += 18.0;
    }
    for (label, dash) in [("ground truth", ""), ("prediction", " stroke-dasharray=\"6 4\"")] {
        let _ = writeln!(
            out,
            "    <line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#444\" stroke-width=\"2\"{dash}/>",
            x + 24.0
        );
        let _ = writeln!(out, "    <text x=\"{:.2}\" y=\"{:.2}\">{label}</text>", x + 30.0, y + 4.0);
        y += 18.0;
    }
    let _ = writeln!(out, "  </g>");
}

/// Ground truth drawn solid; predictions, when given, dashed in their own
/// group with opacity following confidence.
pub fn render_svg(scene: &Scene, predictions: Option<&PredScene>) -> String {
    let f = Frame { range: scene.bev_range };
    let w = MARGIN * 2.0 + f.width() + LEGEND_W;
    let h = MARGIN * 2.0 + f.height();
    let mut out = String::new();
    let _ = writeln!(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">"
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(&scene.id));
    let _ = writeln!(out, "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    axes(&mut out, &f);
    legend(&mut out, &f);
    let _ = writeln!(out, "  <g id=\"ground-truth\">");
    for e in &scene.elements {
        shape(&mut out, &f, e.class, e.closed, &e.points, "");
    }
    let _ = writeln!(out, "  </g>");
    if let Some(pred) = predictions {
        let _ = writeln!(out, "  <g id=\"predictions\" stroke-dasharray=\"6 4\">");
        for e in &pred.elements {
            let extra = format!(" stroke-opacity=\"{:.3}\"", e.confidence.clamp(0.0, 1.0));
            shape(&mut out, &f, e.class, e.closed, &e.points, &extra);
        }
        let _ = writeln!(out, "  </g>");
    }
    let _ = writeln!(out, "</svg>");
    out
}
