//! Self-contained SVG plots from a paired-scores CSV: per-output box plots
//! of R² by variant, and a candidate-vs-baseline scatter per output with
//! the line of equivalence.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use vsfusion::eval::median;
use vsfusion::nnet::FusionKind;

use crate::{CliError, Result};

pub const PAIRS_HEADER: &str = "baseline,candidate,output,key,baseline_r2,candidate_r2";

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub baseline: FusionKind,
    pub candidate: FusionKind,
    pub output: String,
    pub key: u64,
    pub baseline_r2: f64,
    pub candidate_r2: f64,
}

/// Parses a paired-scores CSV. Header-only or blank input is a usage
/// error; anything malformed is a data error.
pub fn parse_pairs(text: &str) -> Result<Vec<PairRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        None => return Err(CliError::Usage("empty CSV".into())),
        Some(h) if h.trim() != PAIRS_HEADER => {
            return Err(CliError::Data(format!("unexpected header '{h}', want '{PAIRS_HEADER}'")))
        }
        Some(_) => {}
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| CliError::Data(format!("row {}: {what}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let kind = |s: &str| s.parse::<FusionKind>().map_err(|_| bad("unknown variant"));
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad number"));
        rows.push(PairRow {
            baseline: kind(f[0])?,
            candidate: kind(f[1])?,
            output: f[2].to_string(),
            key: f[3].parse().map_err(|_| bad("bad key"))?,
            baseline_r2: num(f[4])?,
            candidate_r2: num(f[5])?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Usage("CSV has no data rows".into()));
    }
    Ok(rows)
}

fn color(k: FusionKind) -> &'static str {
    match k {
        FusionKind::Stateless => "#7f7f7f",
        FusionKind::SingleNeuron => "#1f77b4",
        FusionKind::FullyConnected => "#ff7f0e",
        FusionKind::DoubleInput => "#2ca02c",
        FusionKind::MlpBranch => "#d62728",
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const PANEL: f64 = 220.0;
const PAD: f64 = 40.0;

/// Maps R² onto a panel's vertical or horizontal extent.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Renders box plots (top row) and scatter plots (bottom row), one column
/// per output.
pub fn render_svg(rows: &[PairRow]) -> String {
    let mut outputs: Vec<&str> = Vec::new();
    for r in rows {
        if !outputs.contains(&r.output.as_str()) {
            outputs.push(&r.output);
        }
    }
    let all = rows.iter().flat_map(|r| [r.baseline_r2, r.candidate_r2]);
    let min = all.clone().fold(f64::INFINITY, f64::min);
    let max = all.fold(f64::NEG_INFINITY, f64::max);
    let ax = Axis { lo: (min.min(0.0) * 10.0).floor() / 10.0, hi: (max.max(1.0) * 10.0).ceil() / 10.0 };

    let cell = PANEL + 2.0 * PAD;
    let (w, h) = (cell * outputs.len() as f64, 2.0 * cell + 30.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);

    // legend
    let mut kinds: Vec<FusionKind> = rows.iter().flat_map(|r| [r.baseline, r.candidate]).collect();
    kinds.sort();
    kinds.dedup();
    for (i, k) in kinds.iter().enumerate() {
        let x = 10.0 + 130.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="8" width="10" height="10" fill="{}"/>"#, color(*k));
        let _ = writeln!(s, r#"<text x="{}" y="17">{}</text>"#, x + 14.0, k.name());
    }

    for (col, out) in outputs.iter().enumerate() {
        let x0 = col as f64 * cell + PAD;
        let these: Vec<&PairRow> = rows.iter().filter(|r| r.output == *out).collect();
        boxes(&mut s, &these, out, x0, 30.0 + PAD, ax);
        scatter(&mut s, &these, out, x0, 30.0 + cell + PAD, ax);
    }
    s.push_str("</svg>\n");
    s
}

fn frame(s: &mut String, x0: f64, y0: f64, title: &str, ax: Axis) {
    let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, x0 + PANEL / 2.0, y0 - 6.0);
    for v in [ax.lo, 0.0, ax.hi] {
        let y = y0 + PANEL * (1.0 - ax.frac(v));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 4.0, y + 4.0);
    }
}

fn boxes(s: &mut String, rows: &[&PairRow], out: &str, x0: f64, y0: f64, ax: Axis) {
    frame(s, x0, y0, &format!("R² {out}"), ax);
    // baseline once (pairs repeat it per candidate), then each candidate
    let mut series: Vec<(FusionKind, Vec<f64>)> = Vec::new();
    let mut base: BTreeMap<u64, f64> = BTreeMap::new();
    let mut cands: BTreeMap<FusionKind, Vec<f64>> = BTreeMap::new();
    let mut base_kind = None;
    for r in rows {
        base.insert(r.key, r.baseline_r2);
        base_kind = Some(r.baseline);
        cands.entry(r.candidate).or_default().push(r.candidate_r2);
    }
    if let Some(b) = base_kind {
        series.push((b, base.into_values().collect()));
    }
    series.extend(cands);
    let slot = PANEL / series.len() as f64;
    let py = |v: f64| y0 + PANEL * (1.0 - ax.frac(v));
    for (i, (k, vals)) in series.iter_mut().enumerate() {
        vals.sort_by(f64::total_cmp);
        let cx = x0 + slot * (i as f64 + 0.5);
        let bw = slot * 0.5;
        let (q1, q2, q3) = (quantile(vals, 0.25), median(vals).unwrap_or(f64::NAN), quantile(vals, 0.75));
        let c = color(*k);
        let _ = writeln!(
            s,
            r#"<line class="whisker" x1="{cx}" x2="{cx}" y1="{}" y2="{}" stroke="{c}"/>"#,
            py(vals[0]),
            py(vals[vals.len() - 1])
        );
        let _ = writeln!(
            s,
            r#"<rect class="box" data-variant="{}" x="{}" y="{}" width="{bw}" height="{}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
            k.name(),
            cx - bw / 2.0,
            py(q3),
            (py(q1) - py(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line class="median" x1="{}" x2="{}" y1="{m}" y2="{m}" stroke="black"/>"#,
            cx - bw / 2.0,
            cx + bw / 2.0,
            m = py(q2)
        );
        for v in vals.iter() {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{}" r="2" fill="{c}"/>"#, py(*v));
        }
    }
}

fn scatter(s: &mut String, rows: &[&PairRow], out: &str, x0: f64, y0: f64, ax: Axis) {
    let base = rows.first().map(|r| r.baseline.name()).unwrap_or("baseline");
    frame(s, x0, y0, &format!("{out}: stateful vs {base}"), ax);
    let px = |v: f64| x0 + PANEL * ax.frac(v);
    let py = |v: f64| y0 + PANEL * (1.0 - ax.frac(v));
    let _ = writeln!(
        s,
        r#"<line class="diag" x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        px(ax.lo),
        py(ax.lo),
        px(ax.hi),
        py(ax.hi)
    );
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle class="pt" data-key="{}" data-variant="{}" data-baseline="{}" data-candidate="{}" cx="{}" cy="{}" r="3.5" fill="{}"/>"#,
            r.key,
            r.candidate.name(),
            r.baseline_r2,
            r.candidate_r2,
            px(r.baseline_r2),
            py(r.candidate_r2),
            color(r.candidate)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "baseline,candidate,output,key,baseline_r2,candidate_r2
stateless,mlp_branch,z,1,0.2,0.5
stateless,mlp_branch,z,2,0.4,0.3
stateless,single_neuron,z,1,0.2,0.25
stateless,mlp_branch,x,1,0.8,0.8
";

    #[test]
    fn parses_and_rejects() {
        assert_eq!(parse_pairs(CSV).unwrap().len(), 4);
        assert!(matches!(parse_pairs(""), Err(CliError::Usage(_))));
        assert!(matches!(parse_pairs(&format!("{PAIRS_HEADER}\n")), Err(CliError::Usage(_))));
        assert!(matches!(parse_pairs("a,b\n1,2\n"), Err(CliError::Data(_))));
        assert!(matches!(parse_pairs(&format!("{PAIRS_HEADER}\nstateless,x,z,1,0,0\n")), Err(CliError::Data(_))));
        assert!(matches!(
            parse_pairs(&format!("{PAIRS_HEADER}\nstateless,mlp_branch,z,1,nan,0\n")),
            Err(CliError::Data(_))
        ));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn svg_has_one_point_per_row() {
        let svg = render_svg(&parse_pairs(CSV).unwrap());
        assert_eq!(svg.matches(r#"class="pt""#).count(), 4);
        assert_eq!(svg.matches(r#"class="diag""#).count(), 2);
    }
}
