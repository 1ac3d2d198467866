//! Deterministic JSON, CSV and SVG emitters.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), which round-trips every
//! `f64` and never depends on the shortest-representation algorithm of a library.

use std::fmt::Write as _;

use serde_json::Value;

use crate::eval::ReliabilityReport;

pub const SCHEMA_VERSION: u64 = 1;

/// `f64` with 17 significant digits; non-finite values become `null`.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_value(v: &Value, out: &mut String, level: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else {
                out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                push_indent(out, level + 1);
                write_value(item, out, level + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            push_indent(out, level);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                push_indent(out, level + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(item, out, level + 1);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            push_indent(out, level);
            out.push('}');
        }
    }
}

/// Pretty-printed JSON with fixed float formatting and a trailing newline.
pub fn to_json_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, &mut out, 0);
    out.push('\n');
    out
}

fn csv_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

/// Reliability table as CSV; empty cells for empty bins or unknown true probabilities.
pub fn reliability_csv(report: &ReliabilityReport) -> String {
    let mut s = String::from("bin_lo,bin_hi,count,mean_pred,mean_obs,mean_true\n");
    for b in &report.bins {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            csv_float(b.lo),
            csv_float(b.hi),
            b.count,
            csv_float(b.mean_predicted),
            csv_float(b.mean_observed),
            b.mean_true.map(csv_float).unwrap_or_default()
        );
    }
    s
}

/// Generic CSV from a header and rows of already formatted cells.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const SIZE: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_header(s: &mut String, title: &str) {
    let full = SIZE + 2.0 * PAD;
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{title}</text>"#, PAD + SIZE / 2.0, PAD / 2.0);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 16.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="11">{name}</text>"#,
            PAD + 8.0,
            PAD + 28.0,
            PAD + 32.0,
            y + 4.0
        );
    }
}

/// Reliability diagram: mean observed against mean predicted per bin, one polyline per
/// calibrator, with the 45 degree reference line.
pub fn reliability_svg(curves: &[(&str, &ReliabilityReport)]) -> String {
    let mut s = String::new();
    svg_header(&mut s, "Reliability diagram");
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="gray" stroke-dasharray="4 4"/>"#,
        PAD + SIZE,
        PAD + SIZE
    );
    for (i, (_, report)) in curves.iter().enumerate() {
        let pts: Vec<String> = report
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| format!("{:.3},{:.3}", PAD + SIZE * b.mean_predicted, PAD + SIZE * (1.0 - b.mean_observed)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut s, &curves.iter().map(|c| c.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Line plot of `ys` against `log10(xs)`, y axis scaled to the data.
pub fn log_x_svg(title: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = String::new();
    svg_header(&mut s, title);
    let lx: Vec<f64> = xs.iter().map(|x| x.max(1e-300).log10()).collect();
    let (xmin, xmax) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let ymax = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yspan = if ymax > 0.0 { ymax } else { 1.0 };
    for (i, (_, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = lx
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.3},{:.3}", PAD + SIZE * (x - xmin) / xspan, PAD + SIZE * (1.0 - y / yspan)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">log10 n</text>"#, PAD + SIZE / 2.0, PAD + SIZE + 30.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">max {}</text>"#, PAD + 4.0, PAD + SIZE - 6.0, fmt_float(ymax));
    legend(&mut s, &series.iter().map(|c| c.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BinScheme, ReliabilityBin};
    use serde_json::json;

    #[test]
    fn floats_have_seventeen_digits_and_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, 0.0] {
            let s = fmt_float(v);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17, "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_float(f64::NAN), "null");
    }

    #[test]
    fn json_is_valid_and_stable() {
        let v = json!({"schema": SCHEMA_VERSION, "x": 0.45, "name": "a\"b", "list": [1, -2, 2.5], "empty": [], "flag": true});
        let s = to_json_string(&v);
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64(), Some(0.45));
        assert_eq!(back["schema"].as_u64(), Some(1));
        assert_eq!(back["name"], "a\"b");
        assert_eq!(back["list"][1].as_i64(), Some(-2));
        assert!(s.contains("4.5000000000000001e-1"));
        assert_eq!(s, to_json_string(&v));
    }

    #[test]
    fn csv_layout() {
        let r = ReliabilityReport {
            bins: vec![
                ReliabilityBin { lo: 0.0, hi: 0.5, count: 0, mean_predicted: f64::NAN, mean_observed: f64::NAN, mean_true: None },
                ReliabilityBin { lo: 0.5, hi: 1.0, count: 3, mean_predicted: 0.7, mean_observed: 2.0 / 3.0, mean_true: Some(0.69) },
            ],
            ece: 0.03,
            n_bins: 2,
            scheme: BinScheme::EqualWidth,
        };
        let csv = reliability_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count,mean_pred,mean_obs,mean_true");
        assert_eq!(lines[1], "0.0000000000000000e0,5.0000000000000000e-1,0,,,");
        assert_eq!(lines[2].split(',').count(), 6);
        let svg = reliability_svg(&[("angular", &r)]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.trim_end().ends_with("</svg>"));
    }
}
