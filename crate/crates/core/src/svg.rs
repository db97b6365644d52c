//! Small SVG line plots with deterministic bytes.

use std::fmt::Write;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const PAD: f64 = 36.0;

#[derive(Debug, Clone)]
enum Item {
    Line { points: Vec<(f64, f64)>, color: String },
    Rect { lo: (f64, f64), hi: (f64, f64), fill: String },
    Rule { x: Option<f64>, y: Option<f64> },
}

/// One plot area with its own data ranges.
#[derive(Debug, Clone)]
pub struct Panel {
    title: String,
    x: (f64, f64),
    y: (f64, f64),
    items: Vec<Item>,
}

impl Panel {
    pub fn new(title: impl Into<String>, x: (f64, f64), y: (f64, f64)) -> Self {
        Self {
            title: title.into(),
            x: widen(x),
            y: widen(y),
            items: Vec::new(),
        }
    }

    /// Panel whose y range covers every point of `series`.
    pub fn fitted(title: impl Into<String>, x: (f64, f64), series: &[&[(f64, f64)]]) -> Self {
        let (lo, hi) = series
            .iter()
            .flat_map(|s| s.iter())
            .filter(|p| p.1.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let y = if lo <= hi { (lo, hi) } else { (0.0, 1.0) };
        Self::new(title, x, y)
    }

    pub fn line(&mut self, points: Vec<(f64, f64)>, color: &str) -> &mut Self {
        self.items.push(Item::Line {
            points,
            color: color.to_string(),
        });
        self
    }

    pub fn rect(&mut self, lo: (f64, f64), hi: (f64, f64), fill: &str) -> &mut Self {
        self.items.push(Item::Rect {
            lo,
            hi,
            fill: fill.to_string(),
        });
        self
    }

    pub fn vrule(&mut self, x: f64) -> &mut Self {
        self.items.push(Item::Rule { x: Some(x), y: None });
        self
    }

    pub fn hrule(&mut self, y: f64) -> &mut Self {
        self.items.push(Item::Rule { x: None, y: Some(y) });
        self
    }

    fn map(&self, (x, y): (f64, f64), ox: f64) -> (f64, f64) {
        let w = PANEL_W - 2.0 * PAD;
        let h = PANEL_H - 2.0 * PAD;
        (
            ox + PAD + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            PAD + (self.y.1 - y) / (self.y.1 - self.y.0) * h,
        )
    }

    fn render(&self, out: &mut String, ox: f64) {
        let (x0, y0) = self.map((self.x.0, self.y.1), ox);
        let (x1, y1) = self.map((self.x.1, self.y.0), ox);
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y1 - y0
        );
        for item in &self.items {
            match item {
                Item::Rect { lo, hi, fill } => {
                    let (a, b) = self.map((lo.0, hi.1), ox);
                    let (c, d) = self.map((hi.0, lo.1), ox);
                    let _ = writeln!(
                        out,
                        r#"<rect x="{a:.2}" y="{b:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="0.3"/>"#,
                        c - a,
                        d - b
                    );
                }
                Item::Rule { x, y } => {
                    let (a, b, c, d) = match (x, y) {
                        (Some(x), _) => {
                            let (a, _) = self.map((*x, 0.0), ox);
                            (a, y0, a, y1)
                        }
                        (_, Some(y)) => {
                            let (_, b) = self.map((0.0, *y), ox);
                            (x0, b, x1, b)
                        }
                        _ => continue,
                    };
                    let _ = writeln!(
                        out,
                        r#"<line x1="{a:.2}" y1="{b:.2}" x2="{c:.2}" y2="{d:.2}" stroke="gray" stroke-dasharray="3,3"/>"#
                    );
                }
                Item::Line { points, color } => {
                    out.push_str(r#"<polyline fill="none" stroke=""#);
                    out.push_str(color);
                    out.push_str(r#"" stroke-width="1" points=""#);
                    for (k, p) in points.iter().filter(|p| p.1.is_finite()).enumerate() {
                        let (a, b) = self.map(*p, ox);
                        let sep = if k == 0 { "" } else { " " };
                        let _ = write!(out, "{sep}{a:.2},{b:.2}");
                    }
                    out.push_str("\"/>\n");
                }
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            ox + PANEL_W / 2.0,
            PAD / 2.0,
            escape(&self.title)
        );
        let labels = [
            (x0, y1 + 14.0, "start", format!("{:.3e}", self.x.0)),
            (x1, y1 + 14.0, "end", format!("{:.3e}", self.x.1)),
            (x0 - 2.0, y1, "end", format!("{:.2e}", self.y.0)),
            (x0 - 2.0, y0 + 8.0, "end", format!("{:.2e}", self.y.1)),
        ];
        for (x, y, anchor, text) in labels {
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{y:.2}" font-size="8" text-anchor="{anchor}">{text}</text>"#
            );
        }
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let d = if lo == 0.0 { 1.0 } else { lo.abs() * 1e-9 };
        (lo - d, hi + d)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels laid out left to right.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (k, p) in panels.iter().enumerate() {
        p.render(&mut out, k as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_item() {
        let mut p = Panel::new("a<b", (0.0, 1.0), (0.0, 1.0));
        p.line(vec![(0.0, 0.0), (1.0, 1.0)], "black")
            .rect((0.0, 0.0), (0.5, 0.5), "green")
            .vrule(0.5)
            .hrule(0.5);
        let s = render(&[p.clone(), p]);
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert_eq!(s.matches("stroke-dasharray").count(), 4);
        assert!(s.contains("a&lt;b"));
        assert!(s.ends_with("</svg>\n"));
    }

    #[test]
    fn flat_series_gets_a_nonempty_range() {
        let pts = [(0.0, 2.0), (1.0, 2.0)];
        let p = Panel::fitted("flat", (0.0, 1.0), &[&pts]);
        assert!(p.y.1 > p.y.0);
        let s = render(&[p]);
        assert!(!s.contains("NaN") && !s.contains("inf"));
    }
}
