//! Relative-preference log and its SVG rendering.
//!
//! Every curve carries its exact values in a `data-values` attribute so the
//! plot can be read back and compared with the CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpLogRow {
    pub epoch: usize,
    pub modality: usize,
    pub mean_rp: f64,
    pub beta: f64,
}

pub fn rp_log_csv(rows: &[RpLogRow]) -> String {
    let mut out = String::from("epoch,modality,mean_RP,beta\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.modality, r.mean_rp, r.beta);
    }
    out
}

pub fn parse_rp_log(text: &str) -> Result<Vec<RpLogRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("epoch,modality,mean_RP,beta") {
        return Err(Error::Parse("RP log header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("RP log row `{l}`")));
            }
            let bad = |e: String| Error::Parse(format!("RP log row `{l}`: {e}"));
            Ok(RpLogRow {
                epoch: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                modality: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                mean_rp: f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                beta: f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            })
        })
        .collect()
}

/// Mean RP per modality ordered by epoch.
pub fn curves(rows: &[RpLogRow]) -> BTreeMap<usize, Vec<(usize, f64)>> {
    let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        out.entry(r.modality).or_default().push((r.epoch, r.mean_rp));
    }
    for c in out.values_mut() {
        c.sort_by_key(|&(e, _)| e);
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One polyline per modality of epoch-mean RP against epoch, with the
/// zero line drawn.
pub fn emit_rp_plot(rows: &[RpLogRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty RP log".into()));
    }
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let curves = curves(rows);
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let mut extent = rows.iter().map(|r| r.mean_rp.abs()).fold(0.0, f64::max);
    if extent == 0.0 {
        extent = 1.0;
    }
    let x = |e: usize| pad + (w - 2.0 * pad) * e as f64 / max_epoch;
    let y = |v: f64| h / 2.0 - (h / 2.0 - pad) * v / extent;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<line class="zero" x1="{pad}" y1="{z}" x2="{x2}" y2="{z}" stroke="#444" stroke-dasharray="4 3"/>"##,
        z = y(0.0),
        x2 = w - pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">mean RP (±{extent:.3})</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (m, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.2},{:.2}", x(e), y(v))).collect();
        let values: Vec<String> = pts.iter().map(|&(_, v)| v.to_string()).collect();
        let epochs: Vec<String> = pts.iter().map(|&(e, _)| e.to_string()).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-modality="{m}" data-epochs="{}" data-values="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            epochs.join(","),
            values.join(","),
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">modality {m}</text>"#,
            w - pad - 80.0,
            pad + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("{name}=\"");
    let start = tag.find(&key)? + key.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

/// Curve values recovered from a plot written by [`emit_rp_plot`].
pub fn read_plot_values(svg: &str) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for tag in svg.split('<').filter(|t| t.starts_with("polyline")) {
        let m = attr(tag, "data-modality")
            .ok_or_else(|| Error::Parse("polyline without modality".into()))?
            .parse::<usize>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        let values = attr(tag, "data-values")
            .ok_or_else(|| Error::Parse("polyline without values".into()))?
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        out.insert(m, values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(m: usize, epochs: usize, f: impl Fn(usize, usize) -> f64) -> Vec<RpLogRow> {
        (0..epochs)
            .flat_map(|e| {
                let f = &f;
                (0..m).map(move |k| RpLogRow {
                    epoch: e,
                    modality: k,
                    mean_rp: f(e, k),
                    beta: 1.0,
                })
            })
            .collect()
    }

    #[test]
    fn empty_log_rejected() {
        assert!(emit_rp_plot(&[]).is_err());
    }

    #[test]
    fn zero_log_gives_flat_curves() {
        let svg = emit_rp_plot(&log(3, 4, |_, _| 0.0)).unwrap();
        let back = read_plot_values(&svg).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.values().all(|v| v.iter().all(|&x| x == 0.0)));
        assert!(svg.contains("class=\"zero\""));
    }

    #[test]
    fn plot_values_match_csv() {
        let rows = log(4, 5, |e, k| (e as f64 * 0.137 - k as f64 * 0.29).sin() / 3.0);
        let svg = emit_rp_plot(&rows).unwrap();
        let csv = parse_rp_log(&rp_log_csv(&rows)).unwrap();
        assert_eq!(csv, rows);
        let back = read_plot_values(&svg).unwrap();
        assert_eq!(back.len(), 4);
        for (m, pts) in curves(&csv) {
            let expect: Vec<f64> = pts.iter().map(|p| p.1).collect();
            assert_eq!(back[&m], expect);
        }
        assert_eq!(svg.matches("modality ").count(), 4);
    }
}
