//! Minimal SVG line charts for sweep curves and feedback trends.

use std::fmt::Write;

use super::{FeedbackPoint, SweepReport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let span = |(lo, hi): (f64, f64)| if hi > lo { hi - lo } else { 1.0 };
        let px = MARGIN_LEFT + (x - self.x_range.0) / span(self.x_range) * plot_w;
        let py = MARGIN_TOP + plot_h - (y - self.y_range.0) / span(self.y_range) * plot_h;
        (px, py)
    }

    pub fn render(&self) -> String {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (WIDTH - MARGIN_RIGHT + MARGIN_LEFT) / 2.0,
            escape(&self.title)
        );

        let (x0, y0) = self.project(self.x_range.0, self.y_range.0);
        let (x1, y1) = self.project(self.x_range.1, self.y_range.1);
        for i in 0..=5 {
            let f = i as f64 / 5.0;
            let xv = self.x_range.0 + f * (self.x_range.1 - self.x_range.0);
            let yv = self.y_range.0 + f * (self.y_range.1 - self.y_range.0);
            let (gx, _) = self.project(xv, self.y_range.0);
            let (_, gy) = self.project(self.x_range.0, yv);
            let _ = writeln!(
                svg,
                r##"<line x1="{x0:.1}" y1="{gy:.1}" x2="{x1:.1}" y2="{gy:.1}" stroke="#e0e0e0"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
                x0 - 6.0,
                gy + 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{gx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                y0 + 18.0,
                format_tick(xv)
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = self.project(x, y);
                    format!("{px:.1},{py:.1}")
                })
                .collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                path.join(" "),
                s.color
            );
            for p in &path {
                let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{}"/>"#, s.color);
            }
            let ly = MARGIN_TOP + 10.0 + i as f64 * 20.0;
            let lx = WIDTH - MARGIN_RIGHT + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/>"#,
                lx + 24.0,
                s.color
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 30.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Precision (solid) and recall (dashed) against threshold, one colour per backend.
pub fn sweep_chart(report: &SweepReport) -> LineChart {
    let mut series = Vec::new();
    for (i, curve) in report.curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = |f: fn(&super::MetricPoint) -> f64| curve.points.iter().map(|p| (p.threshold, f(p))).collect();
        series.push(Series {
            name: format!("{} precision", curve.backend),
            points: pts(|p| p.precision),
            color,
            dashed: false,
        });
        series.push(Series {
            name: format!("{} recall", curve.backend),
            points: pts(|p| p.recall),
            color,
            dashed: true,
        });
    }
    LineChart {
        title: "Precision and recall by confidence threshold".into(),
        x_label: "confidence threshold".into(),
        y_label: "score".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series,
    }
}

/// F1 after each feedback iteration.
pub fn feedback_chart(points: &[FeedbackPoint]) -> LineChart {
    let last = points.last().map_or(1, |p| p.iteration.max(1));
    let lo = points.iter().map(|p| p.f1).fold(1.0_f64, f64::min);
    let hi = points.iter().map(|p| p.f1).fold(0.0_f64, f64::max);
    let pad = ((hi - lo) * 0.2).max(0.02);
    LineChart {
        title: "F1 after reviewer feedback".into(),
        x_label: "iteration".into(),
        y_label: "F1".into(),
        x_range: (0.0, last as f64),
        y_range: ((lo - pad).max(0.0), (hi + pad).min(1.0)),
        series: vec![Series {
            name: "hybrid F1".into(),
            points: points.iter().map(|p| (p.iteration as f64, p.f1)).collect(),
            color: PALETTE[0],
            dashed: false,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_svg() {
        let points: Vec<FeedbackPoint> = (0..3)
            .map(|i| FeedbackPoint {
                iteration: i,
                precision: 0.8,
                recall: 0.7,
                f1: 0.7 + i as f64 * 0.01,
                model_generation: 1 + i as u64,
                retrains: i,
                feedback: i * 10,
            })
            .collect();
        let svg = feedback_chart(&points).render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
