//! Read-only views over a trace: a time-space diagram, a lease Gantt chart
//! and a plain-text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dynamics::Phase;
use crate::geometry::IntersectionModel;
use crate::scheduler::{Lease, LeaseKind};
use crate::sim::TraceRecord;
use crate::store::{decode, AgentId, ChangeKind};

/// One lease as it stood when it was last written, with its lifetime in
/// the store.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaseBar {
    pub key: String,
    pub lease: Lease,
    pub registered_at: f64,
    pub removed_at: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportData {
    /// `(t, s, phase)` samples per vehicle.
    pub trajectories: BTreeMap<AgentId, Vec<(f64, f64, Phase)>>,
    pub bars: Vec<LeaseBar>,
    pub collisions: Vec<(f64, AgentId, AgentId)>,
    pub violations: Vec<String>,
    pub lease_event_counts: BTreeMap<String, usize>,
    pub directives: usize,
    pub max_staleness: Option<f64>,
}

pub fn collect(records: &[TraceRecord]) -> ReportData {
    let mut out = ReportData::default();
    let mut open: BTreeMap<String, LeaseBar> = BTreeMap::new();
    for r in records {
        match r {
            TraceRecord::TickState { t, vehicles } => {
                for v in vehicles {
                    out.trajectories.entry(v.id).or_default().push((*t, v.s, v.phase));
                }
            }
            TraceRecord::StoreOp { op } if op.key.contains("/leases/") => match (op.kind, op.value.as_deref().and_then(decode::<Lease>)) {
                (ChangeKind::Put, Some(lease)) => {
                    let registered_at = open.get(&op.key).map_or(op.t, |b| b.registered_at);
                    open.insert(op.key.clone(), LeaseBar { key: op.key.clone(), lease, registered_at, removed_at: None });
                }
                _ => {
                    if let Some(mut bar) = open.remove(&op.key) {
                        bar.removed_at = Some(op.t);
                        out.bars.push(bar);
                    }
                }
            },
            TraceRecord::StoreOp { .. } => {}
            TraceRecord::LeaseEvent { event } => {
                let name = serde_json::to_value(event.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                *out.lease_event_counts.entry(name).or_insert(0) += 1;
            }
            TraceRecord::Directive { staleness, .. } => {
                out.directives += 1;
                if let Some(s) = staleness {
                    out.max_staleness = Some(out.max_staleness.map_or(*s, |m: f64| m.max(*s)));
                }
            }
            TraceRecord::Collision { t, a, b } => out.collisions.push((*t, *a, *b)),
            TraceRecord::InvariantViolation { t, invariant, detail } => out.violations.push(format!("{t:.2} s {invariant}: {detail}")),
        }
    }
    out.bars.extend(open.into_values());
    out.bars.sort_by(|a, b| a.lease.t_start.total_cmp(&b.lease.t_start).then(a.key.cmp(&b.key)));
    out
}

/// Pairs of drawn bars on the same block whose paths conflict and whose
/// final windows overlap while both were registered.
pub fn overlapping_bars<'a>(bars: &'a [LeaseBar], model: &IntersectionModel) -> Vec<(&'a LeaseBar, &'a LeaseBar)> {
    let mut out = Vec::new();
    for (i, a) in bars.iter().enumerate() {
        for b in &bars[i + 1..] {
            let alive_together = a.registered_at < b.removed_at.unwrap_or(f64::INFINITY) && b.registered_at < a.removed_at.unwrap_or(f64::INFINITY);
            if alive_together
                && a.lease.block_id == b.lease.block_id
                && a.lease.t_start < b.lease.t_end
                && b.lease.t_start < a.lease.t_end
                && model.paths_conflict(&a.lease.path_id, &b.lease.path_id).unwrap_or(true)
            {
                out.push((a, b));
            }
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn color(id: AgentId) -> &'static str {
    PALETTE[id as usize % PALETTE.len()]
}

struct Frame {
    w: f64,
    h: f64,
    left: f64,
    top: f64,
    t0: f64,
    t1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        let span = (self.t1 - self.t0).max(1e-9);
        self.left + (t - self.t0) / span * (self.w - self.left - 20.0)
    }

    fn axis(&self, svg: &mut String, title: &str, y_label: &str) {
        let bottom = self.h - 40.0;
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#, self.w, self.h);
        let _ = writeln!(svg, r#"<text x="{}" y="16" font-size="13">{title}</text>"#, self.left);
        let _ = writeln!(svg, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#, l = self.left, b = bottom, r = self.w - 20.0);
        let _ = writeln!(svg, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#, l = self.left, t = self.top, b = bottom);
        let step = nice_step(self.t1 - self.t0);
        let mut t = (self.t0 / step).ceil() * step;
        while t <= self.t1 + 1e-9 {
            let x = self.x(t);
            let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{b}" x2="{x:.1}" y2="{b2}" stroke="black"/><text x="{x:.1}" y="{ty}" text-anchor="middle">{t:.1}</text>"#, b = bottom, b2 = bottom + 4.0, ty = bottom + 16.0);
            t += step;
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#, (self.left + self.w) / 2.0, self.h - 6.0);
        let _ = writeln!(svg, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>"#, self.h / 2.0, self.h / 2.0);
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = (span / 8.0).max(1e-3);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

fn time_range(data: &ReportData) -> (f64, f64) {
    let ts = data.trajectories.values().flatten().map(|p| p.0);
    let ls = data.bars.iter().flat_map(|b| [b.lease.t_start, b.lease.t_end]).filter(|t| t.is_finite());
    let (lo, hi) = ts.chain(ls).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if lo.is_finite() {
        (lo.min(0.0), hi.max(lo + 1.0))
    } else {
        (0.0, 1.0)
    }
}

/// Arc length against time per vehicle; the segment inside the block is
/// drawn heavier.
pub fn time_space_svg(data: &ReportData) -> String {
    let (t0, t1) = time_range(data);
    let f = Frame { w: 760.0, h: 420.0, left: 50.0, top: 30.0, t0, t1 };
    let s_max = data.trajectories.values().flatten().map(|p| p.1).fold(1.0, f64::max);
    let bottom = f.h - 40.0;
    let y = |s: f64| bottom - s / s_max * (bottom - f.top);
    let mut svg = String::new();
    f.axis(&mut svg, "Time-space diagram", "arc length (m)");
    for (i, (id, pts)) in data.trajectories.iter().enumerate() {
        for (phase, width) in [(None, 1.2), (Some(Phase::Crossing), 3.0)] {
            let mut d = String::new();
            let mut pen_down = false;
            for (t, s, p) in pts {
                if phase.is_none_or(|ph| ph == *p) {
                    let _ = write!(d, "{}{:.1},{:.1} ", if pen_down { "L" } else { "M" }, f.x(*t), y(*s));
                    pen_down = true;
                } else {
                    pen_down = false;
                }
            }
            if !d.is_empty() {
                let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{}" stroke-width="{width}"/>"#, d.trim_end(), color(*id));
            }
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{}">vehicle {id}</text>"#, f.w - 110.0, f.top + 14.0 * i as f64, color(*id));
    }
    for (t, a, b) in &data.collisions {
        let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{bottom}" stroke="red" stroke-dasharray="4 3"/><text x="{x:.1}" y="{}" fill="red">{a}x{b}</text>"#, f.top, f.top + 10.0, x = f.x(*t));
    }
    svg.push_str("</svg>\n");
    svg
}

/// One row per lease, grouped by block; proxies are hatched.
pub fn lease_gantt_svg(data: &ReportData) -> String {
    let (t0, t1) = time_range(data);
    let rows = data.bars.len().max(1) as f64;
    let h = (60.0 + 22.0 * rows + 40.0).max(160.0);
    let f = Frame { w: 760.0, h, left: 150.0, top: 30.0, t0, t1 };
    let mut svg = String::new();
    f.axis(&mut svg, "Lease schedule", "");
    svg.push_str(r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="white" stroke-width="2"/></pattern></defs>"##);
    svg.push('\n');
    let mut bars: Vec<&LeaseBar> = data.bars.iter().collect();
    bars.sort_by(|a, b| a.lease.block_id.cmp(&b.lease.block_id).then(a.lease.t_start.total_cmp(&b.lease.t_start)));
    for (row, bar) in bars.iter().enumerate() {
        let l = &bar.lease;
        let y = f.top + 10.0 + 22.0 * row as f64;
        let (x0, x1) = (f.x(l.t_start), f.x(l.t_end));
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{} {}</text>"#, f.left - 6.0, y + 12.0, l.block_id, l.lease_id);
        let _ = writeln!(svg, r#"<rect x="{x0:.1}" y="{y:.1}" width="{:.1}" height="16" fill="{}" fill-opacity="0.8"/>"#, (x1 - x0).max(1.0), color(l.holder_id));
        if l.kind == LeaseKind::NonV2vProxy {
            let _ = writeln!(svg, r#"<rect x="{x0:.1}" y="{y:.1}" width="{:.1}" height="16" fill="url(#hatch)"/>"#, (x1 - x0).max(1.0));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn summary_text(data: &ReportData) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "vehicles: {}", data.trajectories.len());
    let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>10}", "vehicle", "first t", "entered", "cleared");
    for (id, pts) in &data.trajectories {
        let first = pts.first().map_or(f64::NAN, |p| p.0);
        let entered = pts.iter().find(|p| p.2 != Phase::Planning).map(|p| format!("{:.2}", p.0)).unwrap_or_else(|| "-".into());
        let cleared = pts.iter().find(|p| p.2 == Phase::PostCrossing).map(|p| format!("{:.2}", p.0)).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{id:>8} {first:>10.2} {entered:>10} {cleared:>10}");
    }
    let _ = writeln!(s, "leases: {}", data.bars.len());
    let _ = writeln!(s, "{:>22} {:>8} {:>8} {:>8}", "lease", "block", "start", "end");
    for b in &data.bars {
        let _ = writeln!(s, "{:>22} {:>8} {:>8.2} {:>8.2}", b.lease.lease_id, b.lease.block_id, b.lease.t_start, b.lease.t_end);
    }
    for (k, n) in &data.lease_event_counts {
        let _ = writeln!(s, "event {k}: {n}");
    }
    let _ = writeln!(s, "decisions: {}", data.directives);
    if let Some(st) = data.max_staleness {
        let _ = writeln!(s, "max staleness: {st:.4} s");
    }
    let _ = writeln!(s, "collisions: {}", data.collisions.len());
    for (t, a, b) in &data.collisions {
        let _ = writeln!(s, "  {t:.2} s: {a} x {b}");
    }
    let _ = writeln!(s, "invariant violations: {}", data.violations.len());
    for v in &data.violations {
        let _ = writeln!(s, "  {v}");
    }
    s
}
