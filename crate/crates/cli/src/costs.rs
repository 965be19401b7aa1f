//! Parameter-memory and MAC tables per fusion variant, with reference
//! deltas for the symbolic nano-drone backbone.

use std::fmt::Write as _;

use vsfusion::nnet::{count_costs, ArchSpec, CostReport, FusionKind, FusionVariant};

use crate::Result;

/// Reference delta for one variant on `frontnet_sym`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceDelta {
    pub bytes: i64,
    pub macs: i64,
    /// Granularity the reference figure is given at (1 = exact).
    pub resolution: i64,
}

/// Reference deltas vs. stateless. The fully connected row is only known
/// to the nearest thousand.
pub fn reference_delta(kind: FusionKind) -> Option<ReferenceDelta> {
    let exact = |bytes, macs| Some(ReferenceDelta { bytes, macs, resolution: 1 });
    match kind {
        FusionKind::Stateless => exact(0, 0),
        FusionKind::SingleNeuron => exact(4, 4),
        FusionKind::DoubleInput => exact(800, 3_072_000),
        FusionKind::MlpBranch => exact(120, 104),
        FusionKind::FullyConnected => Some(ReferenceDelta { bytes: 54_000, macs: 54_000, resolution: 1000 }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Equal to the reference.
    Match,
    /// Equal only after rounding to the reference's resolution.
    Rounded,
    Discrepancy,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Match => "MATCH",
            Status::Rounded => "ROUNDED",
            Status::Discrepancy => "DISCREPANCY",
        }
    }
}

fn round_to(v: i64, r: i64) -> i64 {
    ((v as f64 / r as f64).round() as i64) * r
}

pub fn compare(report: &CostReport, reference: ReferenceDelta) -> Status {
    if report.delta_bytes == reference.bytes && report.delta_macs == reference.macs {
        Status::Match
    } else if round_to(report.delta_bytes, reference.resolution) == reference.bytes
        && round_to(report.delta_macs, reference.resolution) == reference.macs
    {
        Status::Rounded
    } else {
        Status::Discrepancy
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub kind: FusionKind,
    pub report: CostReport,
    /// Only for `frontnet_sym`.
    pub reference: Option<(ReferenceDelta, Status)>,
}

/// One state channel (pitch) for every stateful variant.
pub fn cost_rows(arch: &ArchSpec, kinds: &[FusionKind]) -> Result<Vec<CostRow>> {
    kinds
        .iter()
        .map(|&kind| {
            let v = FusionVariant::new(kind, if kind == FusionKind::Stateless { 0 } else { 1 })?;
            let report = count_costs(arch, &v)?;
            let reference = (arch.name == "frontnet_sym")
                .then(|| reference_delta(kind))
                .flatten()
                .map(|r| (r, compare(&report, r)));
            Ok(CostRow { kind, report, reference })
        })
        .collect()
}

pub fn rows_csv(arch: &str, rows: &[CostRow]) -> String {
    let mut s = String::from("arch,variant,params,bytes,macs,delta_bytes,delta_macs,ref_delta_bytes,ref_delta_macs,status\n");
    for r in rows {
        let (rb, rm, st) = match r.reference {
            Some((d, st)) => (d.bytes.to_string(), d.macs.to_string(), st.label()),
            None => (String::new(), String::new(), ""),
        };
        let t = r.report.total;
        let _ = writeln!(
            s,
            "{arch},{},{},{},{},{},{},{rb},{rm},{st}",
            r.kind, t.params, t.bytes, t.macs, r.report.delta_bytes, r.report.delta_macs
        );
    }
    s
}

fn signed(v: i64) -> String {
    if v >= 0 {
        format!("+{v}")
    } else {
        v.to_string()
    }
}

/// Aligned text table for standard output.
pub fn rows_table(arch: &str, rows: &[CostRow]) -> String {
    let mut s = format!("costs for {arch} (1 byte per parameter, BN/ReLU/bias free)\n");
    let _ = writeln!(
        s,
        "{:<16} {:>10} {:>12} {:>10} {:>12}  {:>10} {:>12}  status",
        "variant", "bytes", "MACs", "dB", "dMAC", "ref dB", "ref dMAC"
    );
    for r in rows {
        let t = r.report.total;
        let (rb, rm, st) = match r.reference {
            Some((d, st)) => {
                let fmt = |v: i64| if d.resolution == 1 { signed(v) } else { format!("~{}k", signed(v / 1000)) };
                (fmt(d.bytes), fmt(d.macs), st.label())
            }
            None => ("-".into(), "-".into(), "-"),
        };
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>12} {:>10} {:>12}  {:>10} {:>12}  {st}",
            r.kind.name(),
            t.bytes,
            t.macs,
            signed(r.report.delta_bytes),
            signed(r.report.delta_macs),
            rb,
            rm
        );
    }
    if rows.iter().any(|r| matches!(r.reference, Some((_, Status::Rounded | Status::Discrepancy)))) {
        s.push_str(
            "note: the fully_connected reference is given to the nearest thousand only; \
             its exact wiring is unknown, so this row is not a verified match\n",
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frontnet_rows_flag_status() {
        let rows = cost_rows(&ArchSpec::frontnet_sym(), &FusionKind::ALL).unwrap();
        for r in &rows {
            let (_, st) = r.reference.unwrap();
            let want = if r.kind == FusionKind::FullyConnected { Status::Rounded } else { Status::Match };
            assert_eq!(st, want, "{:?}", r.kind);
        }
        let t = rows_table("frontnet_sym", &rows);
        assert!(t.contains("ROUNDED") && t.contains("~+54k"));
    }

    #[test]
    fn status_classes() {
        let r = |b, m| CostReport {
            total: Default::default(),
            baseline: Default::default(),
            delta_bytes: b,
            delta_macs: m,
        };
        let exact = ReferenceDelta { bytes: 4, macs: 4, resolution: 1 };
        assert_eq!(compare(&r(4, 4), exact), Status::Match);
        assert_eq!(compare(&r(5, 4), exact), Status::Discrepancy);
        let k = ReferenceDelta { bytes: 54_000, macs: 54_000, resolution: 1000 };
        assert_eq!(compare(&r(53_952, 53_920), k), Status::Rounded);
        assert_eq!(compare(&r(61_000, 53_920), k), Status::Discrepancy);
    }

    #[test]
    fn desknet_has_no_reference() {
        let rows = cost_rows(&ArchSpec::desknet(), &[FusionKind::Stateless]).unwrap();
        assert!(rows[0].reference.is_none());
        assert!(rows_csv("desknet", &rows).lines().nth(1).unwrap().ends_with(",,,"));
    }
}
