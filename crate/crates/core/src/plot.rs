//! SVG rendering of gate traces: one heatmap panel per gate family (rows are
//! layers, columns are snapshots, shade is the expected surviving fraction)
//! and a barcode of the final hardened topology.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gating::GateFamily;
use crate::trainer::{GateTraceRecord, TRACE_HEADER};

const CELL: f64 = 14.0;
const BAR_CELL: f64 = 3.0;
const MARGIN: f64 = 40.0;
const GAP: f64 = 30.0;

/// Parses a trace CSV. Errors carry the 1-based line number.
pub fn parse_trace(text: &str, source: &Path) -> Result<Vec<GateTraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::format(source, format!("line 1: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
        return Err(Error::format(source, format!("line 1: expected header {TRACE_HEADER:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<GateTraceRecord>() {
        let r = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(source, format!("line {line}: {e}"))
        })?;
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(Error::format(
                source,
                format!("line {}: probability {} outside [0, 1]", out.len() + 2, r.probability),
            ));
        }
        if out.last().is_some_and(|p: &GateTraceRecord| p.step > r.step) {
            return Err(Error::format(source, format!("line {}: steps out of order", out.len() + 2)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::format(source, "trace is empty"));
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<GateTraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path)
}

/// Mean probability per (family, layer) at every snapshot step.
#[derive(Debug, Default)]
struct Grid {
    steps: Vec<u64>,
    layers: usize,
    mean: BTreeMap<(GateFamily, usize, u64), f64>,
}

fn grid(records: &[GateTraceRecord]) -> Grid {
    let mut sums: BTreeMap<(GateFamily, usize, u64), (f64, usize)> = BTreeMap::new();
    let mut steps = BTreeSet::new();
    let mut layers = 0;
    for r in records {
        let e = sums.entry((r.gate_family, r.layer, r.step)).or_default();
        e.0 += r.probability;
        e.1 += 1;
        steps.insert(r.step);
        layers = layers.max(r.layer + 1);
    }
    Grid {
        steps: steps.into_iter().collect(),
        layers,
        mean: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    }
}

/// White at 0, dark blue at 1.
pub fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let mix = |lo: f64| (255.0 + (lo - 255.0) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(8.0), mix(48.0), mix(107.0))
}

pub fn render_svg(records: &[GateTraceRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::invalid("trace", "no records"));
    }
    let g = grid(records);
    let cols = g.steps.len();
    let panel_w = cols as f64 * CELL;
    let panel_h = g.layers as f64 * CELL;

    let last = *g.steps.last().expect("non-empty");
    let mut final_gates: BTreeMap<(GateFamily, usize), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.step == last) {
        final_gates.entry((r.gate_family, r.layer)).or_default().push(r.probability);
    }
    let widest = final_gates.values().map(Vec::len).max().unwrap_or(1) as f64 * BAR_CELL;

    let heat_w = GateFamily::ALL.len() as f64 * (panel_w + GAP) - GAP;
    let bar_top = MARGIN + panel_h + 2.0 * GAP;
    let bar_rows = GateFamily::ALL.len() * g.layers;
    let width = 2.0 * MARGIN + heat_w.max(widest + 60.0);
    let height = bar_top + bar_rows as f64 * (CELL + 2.0) + GAP * 2.0 + MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, fam) in GateFamily::ALL.into_iter().enumerate() {
        let x0 = MARGIN + p as f64 * (panel_w + GAP);
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">{fam}</text>"#, MARGIN - 8.0);
        for l in 0..g.layers {
            for (c, step) in g.steps.iter().enumerate() {
                let Some(&v) = g.mean.get(&(fam, l, *step)) else { continue };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}" data-family="{fam}" data-layer="{l}" data-step="{step}"><title>{fam} layer {l} step {step}: {v:.3}</title></rect>"#,
                    x0 + c as f64 * CELL,
                    MARGIN + l as f64 * CELL,
                    shade(v)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{MARGIN:.1}" width="{panel_w:.1}" height="{panel_h:.1}" fill="none" stroke="black" stroke-width="0.5"/>"#
        );
    }
    let _ = writeln!(s, r#"<text x="{MARGIN:.1}" y="{:.1}">final topology at step {last}</text>"#, bar_top - 8.0);
    let mut row = 0usize;
    for fam in GateFamily::ALL {
        for l in 0..g.layers {
            let Some(gates) = final_gates.get(&(fam, l)) else { continue };
            let y = bar_top + row as f64 * (CELL + 2.0);
            let _ = writeln!(s, r#"<text x="{MARGIN:.1}" y="{:.1}">{fam} {l}</text>"#, y + CELL - 3.0);
            for (i, &p) in gates.iter().enumerate() {
                let on = if p > 0.5 { 1.0 } else { 0.0 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{y:.1}" width="{BAR_CELL}" height="{CELL}" fill="{}" data-barcode="{fam}" data-layer="{l}"/>"#,
                    MARGIN + 60.0 + i as f64 * BAR_CELL,
                    shade(on)
                );
            }
            row += 1;
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: &[(u64, usize, &str, &str, f64)]) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for (step, layer, fam, idx, p) in rows {
            s.push_str(&format!("{step},{layer},{fam},{idx},{p},1.0,0.5\n"));
        }
        s
    }

    fn fills(svg: &str, family: &str, layer: usize) -> Vec<String> {
        let tag = format!(r#"data-family="{family}" data-layer="{layer}""#);
        svg.lines()
            .filter(|l| l.contains(&tag))
            .map(|l| l.split("fill=\"").nth(1).unwrap()[..7].to_string())
            .collect()
    }

    #[test]
    fn open_trace_is_uniformly_dark() {
        let mut rows = Vec::new();
        for step in [0, 10] {
            for l in 0..2 {
                rows.push((step, l, "head", "0", 1.0));
                rows.push((step, l, "block", "0", 1.0));
            }
        }
        let recs = parse_trace(&trace(&rows), Path::new("t.csv")).unwrap();
        let svg = render_svg(&recs).unwrap();
        let dark = shade(1.0);
        for l in 0..2 {
            assert!(fills(&svg, "head", l).iter().chain(&fills(&svg, "block", l)).all(|f| *f == dark));
        }
    }

    #[test]
    fn closed_block_fades_to_white() {
        let mut rows = Vec::new();
        for (step, p) in [(0, 0.95), (10, 0.4), (20, 0.0)] {
            for l in 0..12 {
                rows.push((step, l, "block", "0", if l == 11 { p } else { 1.0 }));
            }
        }
        let svg = render_svg(&parse_trace(&trace(&rows), Path::new("t.csv")).unwrap()).unwrap();
        let bottom = fills(&svg, "block", 11);
        assert_eq!(bottom.last().unwrap(), "#ffffff");
        assert_ne!(bottom[0], "#ffffff");
        assert!(fills(&svg, "block", 10).iter().all(|f| *f == shade(1.0)));
        assert!(svg.contains(r#"data-barcode="block" data-layer="11""#));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = trace(&[(0, 0, "head", "0", 1.0)]) + "5,0,head,0,notanumber,1.0,0.5\n";
        let err = parse_trace(&text, Path::new("t.csv")).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = parse_trace(&trace(&[(0, 0, "gill", "0", 1.0)]), Path::new("t.csv")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(parse_trace(&trace(&[]), Path::new("t.csv")).is_err());
        assert!(parse_trace("", Path::new("t.csv")).is_err());
    }

    #[test]
    fn shade_endpoints() {
        assert_eq!(shade(0.0), "#ffffff");
        assert_eq!(shade(1.0), "#08306b");
    }
}
