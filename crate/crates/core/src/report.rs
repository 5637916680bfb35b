//! CSV, JSON and SVG report emission.
//!
//! Files are written atomically (temp file + rename) and CSV payloads are
//! byte-stable for identical inputs: floats print with Rust's shortest
//! round-trip formatting, rows in deterministic order, LF line endings.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Simple CSV builder: header plus rows, UTF-8, LF, header mandatory.
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "CSV row arity mismatch");
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        (if v > 0.0 { "inf" } else { "-inf" }).to_string()
    } else {
        format!("{v}")
    }
}

/// Writes bytes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

/// Minimal static line chart. `log_y` plots log10 of the y values (points
/// with y <= 0 are dropped from log plots).
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_y: bool,
) -> String {
    let width = 860.0;
    let height = 560.0;
    let ml = 80.0;
    let mr = 190.0;
    let mt = 50.0;
    let mb = 60.0;
    let pw = width - ml - mr;
    let ph = height - mt - mb;

    let transform = |y: f64| if log_y { y.log10() } else { y };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if log_y && y <= 0.0 {
                continue;
            }
            if x.is_finite() && y.is_finite() {
                xs.push(x);
                ys.push(transform(y));
            }
        }
    }
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(1e-300) * pw;
    let sy = |y: f64| mt + ph - (transform(y) - y0) / (y1 - y0).max(1e-300) * ph;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    let _ = write!(
        svg,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        ml + pw / 2.0,
        xml_escape(title)
    );
    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    );
    // Ticks.
    for k in 0..=5 {
        let fx = x0 + (x1 - x0) * k as f64 / 5.0;
        let px = sx(fx);
        let _ = write!(
            svg,
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            mt + ph,
            mt + ph + 5.0
        );
        let _ = write!(
            svg,
            "<text x=\"{px}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{:.3}</text>\n",
            mt + ph + 18.0,
            fx
        );
        let fy = y0 + (y1 - y0) * k as f64 / 5.0;
        let py = mt + ph - ph * k as f64 / 5.0;
        let label = if log_y {
            format!("1e{fy:.1}")
        } else {
            format!("{fy:.3}")
        };
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{label}</text>\n",
            ml - 8.0,
            py + 4.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        ml + pw / 2.0,
        height - 14.0,
        xml_escape(x_label)
    );
    let _ = write!(
        svg,
        "<text x=\"20\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 20 {})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        xml_escape(y_label)
    );
    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|&&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0))
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() >= 2 {
            let _ = write!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
                pts.join(" ")
            );
        }
        for p in &pts {
            let mut it = p.split(',');
            let (px, py) = (it.next().unwrap(), it.next().unwrap());
            let _ = write!(svg, "<circle cx=\"{px}\" cy=\"{py}\" r=\"2.4\" fill=\"{color}\"/>\n");
        }
        let ly = mt + 16.0 + 20.0 * i as f64;
        let lx = ml + pw + 14.0;
        let _ = write!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2.5\"/>\n",
            lx + 22.0
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            lx + 28.0,
            ly + 4.0,
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 1.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if (hi - lo).abs() < 1e-30 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_bytes_are_stable() {
        let build = || {
            let mut c = Csv::new(&["a", "b"]);
            c.push(vec![fmt_f64(1.0 / 3.0), fmt_f64(2.5)]);
            c.push(vec![fmt_f64(f64::INFINITY), fmt_f64(-0.0)]);
            c.to_bytes()
        };
        assert_eq!(build(), build());
        let text = String::from_utf8(build()).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert!(text.contains("inf"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = std::env::temp_dir().join(format!("minimax_spp_test_{}", std::process::id()));
        let path = dir.join("x/report.csv");
        atomic_write(&path, b"a,b\n1,2\n").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"a,b\n1,2\n");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn svg_contains_all_series() {
        let s = vec![
            Series {
                name: "one".into(),
                points: vec![(0.0, 1.0), (1.0, 0.1), (2.0, 0.01)],
            },
            Series {
                name: "two".into(),
                points: vec![(0.0, 2.0), (1.0, 1.0), (2.0, 0.5)],
            },
        ];
        let svg = svg_line_chart("t", "epoch", "value", &s, true);
        assert!(svg.contains("polyline"));
        assert!(svg.contains("one") && svg.contains("two"));
        assert!(svg.starts_with("<svg"));
    }
}
