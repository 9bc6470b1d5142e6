//! Parameter studies built on the continuation engine.
//!
//! Three families live here. Epsilon sweeps rerun the fast-model
//! continuation over a ladder of relaxation rates, match the detected
//! bifurcation points of each run to reference slots, and fit the
//! convergence order of the gap to the cross-diffusion limit. Ring studies
//! switch onto every bifurcating branch of a growth-rate continuation and
//! follow each curve until it returns to a primary branch point or leaves
//! the window, then count the independent closed loops of the resulting
//! branch-point graph. Diagram assembly switches at the first few primary
//! points (optionally onto a secondary branch as well) and extracts
//! parameter windows where several stable states coexist.
//!
//! Sweep runs are matched to slots by the nesting depth of the
//! unstable-mode count, not by parameter proximity: an event is keyed by
//! whether the count rises or falls and by the deeper of the two counts.
//! Away from the limit the detected points move by O(eps), so the value
//! nearest to a reference slot can belong to a different mode entirely,
//! while the count profile along the branch identifies modes at any eps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::continuation::{
    Branch, BranchSeed, BranchStatus, ContinuationSettings, Continuer, EventKind, EventRecord,
};
use crate::error::{Error, Result};
use crate::fem::FemWorkspace;
use crate::mesh::{build_interval_mesh, DomainSpec, Mesh};
use crate::models::{ContinuationParam, ModelKind, Params, State};
use crate::stability::interval_laplace_exact;
use crate::turing::critical_d;

/// Largest per-component nodal spread (max - min) of a state; zero exactly
/// on spatially homogeneous states, O(1) on developed patterns.
pub fn component_spread(state: &State) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..state.components() {
        let f = state.field(c);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in f {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        worst = worst.max(hi - lo);
    }
    worst
}

// ---------------------------------------------------------------------------
// Epsilon sweeps
// ---------------------------------------------------------------------------

/// One detected bifurcation point of one sweep member, matched to a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    /// Slot label ("B1", "B2", ...) in the canonical order of the
    /// reference values.
    pub event: String,
    pub kind: EventKind,
    /// Active-parameter value of the detected event.
    pub value: f64,
    /// Limit value of this slot (closed form for diffusion studies, the
    /// cross-model run for growth-rate studies).
    pub reference: f64,
    pub abs_diff: f64,
}

/// Assembled sweep: rows ordered by descending eps, then slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: ContinuationParam,
    pub rows: Vec<SweepRow>,
    /// Slot label -> limit value.
    pub references: BTreeMap<String, f64>,
    /// (slot, coarser eps, finer eps) pairs where the error failed to
    /// shrink between consecutive ladder members.
    pub monotone_flags: Vec<(String, f64, f64)>,
}

impl SweepResult {
    /// Rows of one slot, in ladder order.
    pub fn rows_for(&self, slot: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.event == slot).collect()
    }

    /// Detected value of `slot` at one ladder member, if present.
    pub fn value(&self, eps: f64, slot: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.eps == eps && r.event == slot).map(|r| r.value)
    }
}

/// A fast-model continuation ladder on an interval mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Base coefficients; `active` selects the study and `eps` is
    /// overridden per ladder member.
    pub params: Params,
    pub domain: DomainSpec,
    pub n_nodes: usize,
    /// Relaxation ladder; deduplicated and sorted descending.
    pub eps_values: Vec<f64>,
    pub settings: ContinuationSettings,
    /// Number of reference slots tracked.
    pub n_events: usize,
    /// Ladder members run on this many worker threads (0 and 1 are serial);
    /// the assembled result does not depend on the count.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig::d_study()
    }
}

impl SweepConfig {
    /// Common-diffusion study: continue the homogeneous branch downward in
    /// d = d1 = d2 and track the first three destabilizations.
    pub fn d_study() -> Self {
        SweepConfig {
            params: Params::table1(),
            domain: DomainSpec::interval(1.0),
            n_nodes: 51,
            eps_values: vec![0.05, 0.01, 0.005, 0.001],
            settings: ContinuationSettings {
                direction: -1.0,
                param_min: 5e-4,
                param_max: 0.05,
                ..ContinuationSettings::default()
            },
            n_events: 3,
            threads: 4,
        }
    }

    /// Growth-rate study at d = 0.02: continue upward in r1 across the
    /// instability windows of the first two modes (four crossings).
    pub fn r1_study() -> Self {
        let mut params = Params::table1();
        params.d1 = 0.02;
        params.d2 = 0.02;
        params.r1 = 3.8;
        params.active = ContinuationParam::R1;
        SweepConfig {
            params,
            domain: DomainSpec::interval(1.0),
            n_nodes: 51,
            eps_values: vec![0.01, 0.005, 0.001, 5e-4, 4e-4, 1e-4],
            settings: r1_window_settings(),
            n_events: 4,
            threads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_values.is_empty() {
            return Err(Error::invalid("empty eps ladder"));
        }
        if self.eps_values.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::invalid("eps ladder values must be positive and finite"));
        }
        if self.n_events == 0 {
            return Err(Error::invalid("need at least one tracked event slot"));
        }
        if self.n_nodes < 3 {
            return Err(Error::invalid(format!("need at least 3 nodes, got {}", self.n_nodes)));
        }
        if !matches!(self.domain, DomainSpec::Interval { .. }) {
            return Err(Error::invalid("epsilon sweeps run on interval domains"));
        }
        self.settings.validate()?;
        self.params.with_eps(self.eps_values[0]).validate(ModelKind::Fast)
    }

    fn build_mesh(&self) -> Result<(Mesh, FemWorkspace)> {
        let DomainSpec::Interval { lx, .. } = self.domain else {
            return Err(Error::invalid("epsilon sweeps run on interval domains"));
        };
        let mesh = build_interval_mesh(lx, self.n_nodes)?;
        let ws = FemWorkspace::new(&mesh);
        Ok((mesh, ws))
    }
}

/// Continuation window of the reference growth-rate studies: every
/// destabilization of both models sits inside [3.79, 5.95] for all eps.
pub fn r1_window_settings() -> ContinuationSettings {
    ContinuationSettings {
        direction: 1.0,
        param_min: 3.79,
        param_max: 5.95,
        max_steps: 900,
        ..ContinuationSettings::default()
    }
}

/// Event key for slot matching: did the unstable count rise, and the
/// deeper of the two counts across the event.
fn nesting_key(e: &EventRecord) -> (bool, usize) {
    let rising = e.n_unstable_after > e.n_unstable_before;
    (rising, e.n_unstable_after.max(e.n_unstable_before))
}

struct SlotDef {
    key: (bool, usize),
    label: String,
    reference: f64,
}

/// Reference slots of a sweep: closed-form thresholds on the same mesh for
/// diffusion studies, the cross-model run's branch points for growth-rate
/// studies.
fn reference_slots(cfg: &SweepConfig, mesh: &Mesh, ws: &FemWorkspace) -> Result<Vec<SlotDef>> {
    let DomainSpec::Interval { lx, .. } = cfg.domain else {
        return Err(Error::invalid("epsilon sweeps run on interval domains"));
    };
    match cfg.params.active {
        ContinuationParam::D => {
            let mut slots = Vec::new();
            for k in 1..=cfg.n_events {
                let lam = interval_laplace_exact(lx, cfg.n_nodes, k);
                if let Some(d) = critical_d(&cfg.params, lam)? {
                    slots.push(SlotDef {
                        key: (true, k),
                        label: format!("B{k}"),
                        reference: d,
                    });
                }
            }
            Ok(slots)
        }
        ContinuationParam::R1 => {
            let cont = Continuer::new(mesh, ws, cfg.params, ModelKind::Cross, cfg.settings)?;
            let branch = cont.continue_branch(&cont.init_from_homogeneous()?, "reference")?;
            let mut evs: Vec<&EventRecord> = branch
                .events
                .iter()
                .filter(|e| e.kind == EventKind::BranchPoint)
                .collect();
            evs.sort_by(|a, b| a.param_value.total_cmp(&b.param_value));
            evs.truncate(cfg.n_events);
            Ok(evs
                .iter()
                .enumerate()
                .map(|(i, e)| SlotDef {
                    key: nesting_key(e),
                    label: format!("B{}", i + 1),
                    reference: e.param_value,
                })
                .collect())
        }
    }
}

/// Branch-point events of the homogeneous fast-model branch at one eps,
/// keyed for slot matching (first occurrence wins per key).
fn run_member(
    mesh: &Mesh,
    ws: &FemWorkspace,
    cfg: &SweepConfig,
    eps: f64,
) -> Result<BTreeMap<(bool, usize), EventRecord>> {
    let params = cfg.params.with_eps(eps);
    let cont = Continuer::new(mesh, ws, params, ModelKind::Fast, cfg.settings)?;
    let branch = cont.continue_branch(&cont.init_from_homogeneous()?, "sweep")?;
    let mut keyed = BTreeMap::new();
    for e in branch.events.into_iter().filter(|e| e.kind == EventKind::BranchPoint) {
        keyed.entry(nesting_key(&e)).or_insert(e);
    }
    Ok(keyed)
}

/// Runs the fast-model continuation once per ladder member, matches the
/// detected branch points to the reference slots, and flags ladder pairs
/// whose error failed to shrink. Members without a slot's event contribute
/// no row for it.
pub fn sweep_epsilon(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut eps = cfg.eps_values.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    let (mesh, ws) = cfg.build_mesh()?;
    let slots = reference_slots(cfg, &mesh, &ws)?;
    if slots.is_empty() {
        return Err(Error::InsufficientData("no reference slot destabilizes in this study".into()));
    }

    let n_workers = cfg.threads.max(1).min(eps.len());
    let mut members: Vec<Option<Result<BTreeMap<(bool, usize), EventRecord>>>> =
        (0..eps.len()).map(|_| None).collect();
    if n_workers <= 1 {
        for (i, &e) in eps.iter().enumerate() {
            members[i] = Some(run_member(&mesh, &ws, cfg, e));
        }
    } else {
        let done = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..n_workers {
                let (mesh, ws, eps) = (&mesh, &ws, &eps);
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    for i in (w..eps.len()).step_by(n_workers) {
                        out.push((i, run_member(mesh, ws, cfg, eps[i])));
                    }
                    out
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in done {
            members[i] = Some(r);
        }
    }

    let mut rows = Vec::new();
    for (i, &e) in eps.iter().enumerate() {
        let keyed = members[i].take().expect("every ladder member ran")?;
        for slot in &slots {
            if let Some(ev) = keyed.get(&slot.key) {
                rows.push(SweepRow {
                    eps: e,
                    event: slot.label.clone(),
                    kind: ev.kind,
                    value: ev.param_value,
                    reference: slot.reference,
                    abs_diff: (ev.param_value - slot.reference).abs(),
                });
            }
        }
    }

    let mut monotone_flags = Vec::new();
    for slot in &slots {
        let mut prev: Option<(f64, f64)> = None;
        for r in rows.iter().filter(|r| r.event == slot.label) {
            if let Some((pe, pd)) = prev {
                if r.abs_diff > pd {
                    monotone_flags.push((slot.label.clone(), pe, r.eps));
                }
            }
            prev = Some((r.eps, r.abs_diff));
        }
    }

    Ok(SweepResult {
        param: cfg.params.active,
        rows,
        references: slots.into_iter().map(|s| (s.label, s.reference)).collect(),
        monotone_flags,
    })
}

/// Least-squares power law of one slot's error against eps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    /// Convergence order: the slope of log error against log eps.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_rows: usize,
}

/// Fits log(abs_diff) = slope * log(eps) + intercept per slot over the rows
/// with a positive finite error. Slots with fewer than three usable rows
/// are omitted; an entirely unusable sweep is an error.
pub fn fit_order(result: &SweepResult) -> Result<BTreeMap<String, OrderFit>> {
    let mut fits = BTreeMap::new();
    for label in result.references.keys() {
        let pts: Vec<(f64, f64)> = result
            .rows
            .iter()
            .filter(|r| {
                r.event == *label && r.abs_diff > 0.0 && r.abs_diff.is_finite() && r.eps > 0.0
            })
            .map(|r| (r.eps.ln(), r.abs_diff.ln()))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx == 0.0 {
            continue;
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
        let ss_res: f64 = pts
            .iter()
            .map(|p| {
                let r = p.1 - (slope * p.0 + intercept);
                r * r
            })
            .sum();
        let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        fits.insert(
            label.clone(),
            OrderFit { slope, intercept, r_squared, n_rows: pts.len() },
        );
    }
    if fits.is_empty() {
        return Err(Error::InsufficientData(
            "no event slot has the three finite error rows an order fit needs".into(),
        ));
    }
    Ok(fits)
}

// ---------------------------------------------------------------------------
// Ring studies
// ---------------------------------------------------------------------------

/// Knobs of the branch tracer that follows bifurcating curves through
/// branch-point crossings until closure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSettings {
    /// Continuation steps per chunk between anchor scans.
    pub chunk_steps: usize,
    /// Total point budget of one traversal.
    pub max_steps: usize,
    /// Spread below which a state counts as spatially homogeneous when
    /// matching events to primary branch points.
    pub homog_tol: f64,
    /// Parameter tolerance for matching an event to a primary point.
    pub bp_match_tol: f64,
    /// Spread the trace must reach before a return to its starting point
    /// counts as closure (guards against re-detecting the switch point).
    pub closure_arm: f64,
    /// Extra parameter margin beyond the primary window for traced
    /// branches; rings may extend past the homogeneous window.
    pub widen: f64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            chunk_steps: 150,
            max_steps: 4000,
            homog_tol: 0.01,
            bp_match_tol: 1e-3,
            closure_arm: 0.08,
            widen: 2.0,
        }
    }
}

/// How a traversal ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEnd {
    /// Returned to its starting primary point.
    Closed,
    /// Left the window, exhausted the budget, or lost the curve.
    Open,
}

/// One bifurcating curve followed from a primary branch point.
#[derive(Debug, Clone)]
pub struct TracedBranch {
    pub branch: Branch,
    /// Primary indices in traversal order; the first entry is the switch
    /// point, interior entries are crossings, and a final repeat of the
    /// first entry marks closure.
    pub anchors: Vec<usize>,
    pub end: TraceEnd,
    pub note: Option<String>,
}

/// Loop count of the traced branch structure. The traversals form a
/// multigraph over the primary branch points; `loops` is its cycle rank
/// E - V + C over the vertices incident to at least one edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingReport {
    pub loops: usize,
    pub open_segments: usize,
    pub n_edges: usize,
    pub n_vertices: usize,
    pub n_components: usize,
}

/// A full ring study: the homogeneous run, its primary branch points, every
/// traversal, and the loop count.
#[derive(Debug, Clone)]
pub struct RingStudy {
    pub homogeneous: Branch,
    pub primaries: Vec<EventRecord>,
    pub traced: Vec<TracedBranch>,
    pub report: RingReport,
    pub notes: Vec<String>,
}

/// Counts loops and open segments from anchor walks alone: each walk
/// contributes one edge per consecutive anchor pair, and each open walk one
/// dangling segment past its last anchor.
pub fn report_from_anchor_walks(walks: &[(Vec<usize>, TraceEnd)]) -> RingReport {
    let mut edges = Vec::new();
    let mut open_segments = 0usize;
    for (anchors, end) in walks {
        for w in anchors.windows(2) {
            edges.push((w[0], w[1]));
        }
        if *end == TraceEnd::Open {
            open_segments += 1;
        }
    }
    let mut verts: Vec<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    verts.sort_unstable();
    verts.dedup();
    let index = |v: usize| verts.binary_search(&v).expect("incident vertex");
    let mut parent: Vec<usize> = (0..verts.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(a, b) in &edges {
        let (ra, rb) = (find(&mut parent, index(a)), find(&mut parent, index(b)));
        parent[ra] = rb;
    }
    let mut roots: Vec<usize> = (0..verts.len()).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    let (n_edges, n_vertices, n_components) = (edges.len(), verts.len(), roots.len());
    RingReport {
        loops: n_edges + n_components - n_vertices,
        open_segments,
        n_edges,
        n_vertices,
        n_components,
    }
}

/// Report over finished traversals.
pub fn ring_report(traced: &[TracedBranch]) -> RingReport {
    let walks: Vec<(Vec<usize>, TraceEnd)> =
        traced.iter().map(|t| (t.anchors.clone(), t.end)).collect();
    report_from_anchor_walks(&walks)
}

/// Index of the primary within `tol` of `p`, if any.
fn nearest_primary(primaries: &[EventRecord], p: f64, tol: f64) -> Option<usize> {
    primaries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, (e.param_value - p).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|&(_, d)| d < tol)
        .map(|(i, _)| i)
}

/// Follows one bifurcating curve in chunks, watching for near-homogeneous
/// branch-point events that land on a primary: a return to the start (after
/// the trace has grown past `closure_arm`) closes the curve there, other
/// primaries are recorded as crossings and traversal continues.
fn trace_one(
    cont: &Continuer,
    seed: BranchSeed,
    start_idx: usize,
    side: f64,
    primaries: &[EventRecord],
    ts: &TraceSettings,
) -> TracedBranch {
    let mut points = Vec::new();
    let mut events = Vec::new();
    let mut anchors = vec![start_idx];
    let mut end = TraceEnd::Open;
    let mut note = None;
    let mut status = BranchStatus::MaxSteps;
    let mut max_amp = 0.0f64;
    let mut seed_cur = seed;
    'outer: loop {
        let chunk = match cont.continue_branch(&seed_cur, "chunk") {
            Ok(b) => b,
            Err(e) => {
                note = Some(format!("trace lost the curve: {e}"));
                break;
            }
        };
        status = chunk.status.clone();
        let skip = usize::from(!points.is_empty());
        if chunk.points.len() <= skip {
            break; // no progress
        }
        let mut ev_iter = chunk.events.into_iter();
        for pt in chunk.points.into_iter().skip(skip) {
            let spread = component_spread(&pt.state);
            if pt.event_flag != 0 {
                let ev = ev_iter.next().expect("every flagged point has an event record");
                debug_assert_eq!(pt.event_flag, ev.kind.flag());
                let anchor = (ev.kind == EventKind::BranchPoint && spread < ts.homog_tol)
                    .then(|| nearest_primary(primaries, ev.param_value, ts.bp_match_tol))
                    .flatten();
                if let Some(j) = anchor {
                    if j == start_idx && max_amp > ts.closure_arm {
                        anchors.push(j);
                        events.push(ev);
                        points.push(pt);
                        end = TraceEnd::Closed;
                        break 'outer;
                    }
                    if j != start_idx {
                        anchors.push(j);
                    }
                }
                events.push(ev);
            }
            max_amp = max_amp.max(spread);
            points.push(pt);
            if points.len() >= ts.max_steps {
                note = Some(format!("step budget {} exhausted", ts.max_steps));
                break 'outer;
            }
        }
        if status != BranchStatus::MaxSteps {
            break; // left the window or the corrector gave out
        }
        let last = points.last().expect("chunk made progress");
        seed_cur = BranchSeed {
            state: last.state.clone(),
            prev_tangent_x: last.tangent_x.clone(),
            prev_tangent_p: last.tangent_p,
        };
    }
    for (i, p) in points.iter_mut().enumerate() {
        p.step_index = i;
    }
    for (i, e) in events.iter_mut().enumerate() {
        e.id = i;
    }
    let branch = Branch {
        label: format!("ring{}{}", start_idx + 1, if side > 0.0 { "+" } else { "-" }),
        model: cont.model,
        param: cont.params.active,
        points,
        events,
        status: if end == TraceEnd::Closed { BranchStatus::Closed } else { status },
    };
    TracedBranch { branch, anchors, end, note }
}

/// Runs the homogeneous branch over the window in `settings`, switches onto
/// every untraced leg of its branch points, and follows each curve to
/// closure. Each primary has two legs; a traversal consumes one leg at its
/// start, both legs of every interior crossing, and a second start leg on
/// closure, so curves already covered are not re-traced from the far side.
pub fn trace_rings(
    mesh: &Mesh,
    ws: &FemWorkspace,
    params: Params,
    model: ModelKind,
    settings: ContinuationSettings,
    ts: &TraceSettings,
) -> Result<RingStudy> {
    let cont = Continuer::new(mesh, ws, params, model, settings)?;
    let homogeneous = cont.continue_branch(&cont.init_from_homogeneous()?, "homogeneous")?;
    let mut primaries: Vec<EventRecord> = homogeneous
        .events
        .iter()
        .filter(|e| e.kind == EventKind::BranchPoint)
        .cloned()
        .collect();
    primaries.sort_by(|a, b| a.param_value.total_cmp(&b.param_value));

    let mut wide = settings;
    wide.param_min = (settings.param_min - ts.widen).max(1e-4);
    wide.param_max = settings.param_max + ts.widen;
    wide.max_steps = ts.chunk_steps;
    // the deepest bisection probes of a crossing sit next to a singular
    // bordered system; a looser bracket keeps the corrector convergent
    // while folds and crossings stay localized far below bp_match_tol
    wide.event_refine = settings.event_refine.max(1e-4);
    let tracer = Continuer::new(mesh, ws, params, model, wide)?;

    let mut legs = vec![2i32; primaries.len()];
    let mut traced = Vec::new();
    let mut notes = Vec::new();
    for i in 0..primaries.len() {
        for side in [1.0, -1.0] {
            if legs[i] <= 0 {
                break;
            }
            let seed = match tracer.switch_branch(&primaries[i], side) {
                Ok(s) => s,
                Err(e) => {
                    notes.push(format!("switch at primary {} side {side:+}: {e}", i + 1));
                    continue;
                }
            };
            legs[i] -= 1;
            let tb = trace_one(&tracer, seed, i, side, &primaries, ts);
            let n_a = tb.anchors.len();
            for (k, &j) in tb.anchors.iter().enumerate().skip(1) {
                let closing = tb.end == TraceEnd::Closed && k == n_a - 1;
                legs[j] -= if closing { 1 } else { 2 };
            }
            for l in legs.iter_mut() {
                *l = (*l).max(0);
            }
            if let Some(n) = &tb.note {
                notes.push(format!("{}: {n}", tb.branch.label));
            }
            traced.push(tb);
        }
    }
    let report = ring_report(&traced);
    Ok(RingStudy { homogeneous, primaries, traced, report, notes })
}

/// Repeats a ring study over a relaxation ladder, returning the studies in
/// ladder order.
pub fn ring_sequence(
    mesh: &Mesh,
    ws: &FemWorkspace,
    params: Params,
    model: ModelKind,
    settings: ContinuationSettings,
    ts: &TraceSettings,
    eps_values: &[f64],
) -> Result<Vec<(f64, RingStudy)>> {
    let mut out = Vec::with_capacity(eps_values.len());
    for &eps in eps_values {
        let study = trace_rings(mesh, ws, params.with_eps(eps), model, settings, ts)?;
        out.push((eps, study));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diagram assembly and multistability
// ---------------------------------------------------------------------------

/// What `full_diagram` switches onto beyond the homogeneous trunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagramOptions {
    /// Primary branch points switched at, in trunk traversal order.
    pub n_primary: usize,
    /// Switch onto both kernel directions of each primary.
    pub both_sides: bool,
    /// Also switch at the first patterned branch point of the first
    /// offshoot.
    pub secondary: bool,
    /// Spread above which an offshoot event counts as patterned (filters
    /// out crossings back through the trunk).
    pub secondary_spread: f64,
}

impl Default for DiagramOptions {
    fn default() -> Self {
        DiagramOptions { n_primary: 3, both_sides: true, secondary: false, secondary_spread: 0.05 }
    }
}

/// A trunk-plus-offshoots bifurcation diagram.
#[derive(Debug, Clone)]
pub struct Diagram {
    pub trunk: Branch,
    pub offshoots: Vec<Branch>,
    /// Switches that failed, with the reason.
    pub notes: Vec<String>,
}

impl Diagram {
    /// Trunk and offshoots in output order.
    pub fn branches(&self) -> Vec<&Branch> {
        std::iter::once(&self.trunk).chain(self.offshoots.iter()).collect()
    }
}

/// Continues the homogeneous branch, switches at its first `n_primary`
/// branch points (both sides if asked), and optionally onto one secondary
/// branch of the first offshoot. Failed switches become notes, not errors.
pub fn full_diagram(
    mesh: &Mesh,
    ws: &FemWorkspace,
    params: Params,
    model: ModelKind,
    settings: ContinuationSettings,
    opts: &DiagramOptions,
) -> Result<Diagram> {
    let cont = Continuer::new(mesh, ws, params, model, settings)?;
    let trunk = cont.continue_branch(&cont.init_from_homogeneous()?, "homogeneous")?;
    let sides: &[f64] = if opts.both_sides { &[1.0, -1.0] } else { &[1.0] };
    let mut offshoots = Vec::new();
    let mut notes = Vec::new();
    let primaries: Vec<EventRecord> = trunk
        .events
        .iter()
        .filter(|e| e.kind == EventKind::BranchPoint)
        .take(opts.n_primary)
        .cloned()
        .collect();
    for (i, ev) in primaries.iter().enumerate() {
        for &side in sides {
            let label = format!("branch{}{}", i + 1, if side > 0.0 { "+" } else { "-" });
            match cont
                .switch_branch(ev, side)
                .and_then(|seed| cont.continue_branch(&seed, &label))
            {
                Ok(b) => offshoots.push(b),
                Err(e) => notes.push(format!("{label}: {e}")),
            }
        }
    }
    if opts.secondary {
        let secondary_ev = offshoots.first().and_then(|b| {
            b.events
                .iter()
                .find(|e| {
                    e.kind == EventKind::BranchPoint
                        && component_spread(&e.state) > opts.secondary_spread
                })
                .cloned()
        });
        match secondary_ev {
            Some(ev) => {
                for &side in sides {
                    let label = format!("secondary{}", if side > 0.0 { "+" } else { "-" });
                    match cont
                        .switch_branch(&ev, side)
                        .and_then(|seed| cont.continue_branch(&seed, &label))
                    {
                        Ok(b) => offshoots.push(b),
                        Err(e) => notes.push(format!("{label}: {e}")),
                    }
                }
            }
            None => notes.push("no patterned branch point on the first offshoot".into()),
        }
    }
    Ok(Diagram { trunk, offshoots, notes })
}

/// A maximal parameter window where at least `min_count` stable segments
/// coexist; `count` is the smallest coexistence depth inside the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableWindow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Stable parameter runs of one branch: maximal point ranges with no
/// unstable eigenvalue, as closed parameter intervals.
fn stable_runs(branch: &Branch) -> Vec<(f64, f64)> {
    let mut runs = Vec::new();
    let mut cur: Option<(f64, f64)> = None;
    for pt in &branch.points {
        if pt.n_unstable == 0 {
            let p = pt.state.param_value;
            cur = Some(match cur {
                Some((lo, hi)) => (lo.min(p), hi.max(p)),
                None => (p, p),
            });
        } else if let Some(r) = cur.take() {
            runs.push(r);
        }
    }
    if let Some(r) = cur {
        runs.push(r);
    }
    runs
}

fn windows_from_runs(runs: &[(f64, f64)], min_count: usize) -> Vec<StableWindow> {
    let mut bounds: Vec<f64> = runs.iter().flat_map(|&(a, b)| [a, b]).collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();
    let mut wins: Vec<StableWindow> = Vec::new();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let depth = runs.iter().filter(|&&(lo, hi)| lo <= mid && mid <= hi).count();
        if depth < min_count {
            continue;
        }
        match wins.last_mut() {
            Some(last) if last.hi == a => {
                last.hi = b;
                last.count = last.count.min(depth);
            }
            _ => wins.push(StableWindow { lo: a, hi: b, count: depth }),
        }
    }
    wins
}

/// Parameter windows where at least `min_count` stable segments from the
/// given branches overlap. Each segment counts as one state: symmetric
/// partner branches must be passed explicitly to be counted.
pub fn stable_windows(branches: &[&Branch], min_count: usize) -> Vec<StableWindow> {
    let runs: Vec<(f64, f64)> = branches.iter().flat_map(|b| stable_runs(b)).collect();
    windows_from_runs(&runs, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::turing::{char_det_fast, critical_d_fast};

    fn synthetic_sweep(law: impl Fn(f64) -> f64, eps: &[f64]) -> SweepResult {
        let reference = 0.0327884;
        let rows: Vec<SweepRow> = eps
            .iter()
            .map(|&e| SweepRow {
                eps: e,
                event: "B1".into(),
                kind: EventKind::BranchPoint,
                value: reference - law(e),
                reference,
                abs_diff: law(e),
            })
            .collect();
        SweepResult {
            param: ContinuationParam::D,
            rows,
            references: [("B1".to_string(), reference)].into(),
            monotone_flags: Vec::new(),
        }
    }

    #[test]
    fn order_fit_recovers_an_exact_power_law() {
        let sweep = synthetic_sweep(|e| 0.37 * e, &[0.05, 0.01, 0.005, 0.001]);
        let fits = fit_order(&sweep).unwrap();
        let fit = fits["B1"];
        assert!((fit.slope - 1.0).abs() < 1e-6, "slope {}", fit.slope);
        assert!((fit.intercept - 0.37f64.ln()).abs() < 1e-6);
        assert!(fit.r_squared > 1.0 - 1e-12);
        assert_eq!(fit.n_rows, 4);
    }

    #[test]
    fn order_fit_needs_three_usable_rows() {
        let sweep = synthetic_sweep(|e| e, &[0.01, 0.001]);
        assert!(matches!(fit_order(&sweep), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn anchor_walks_count_reference_topologies() {
        use TraceEnd::{Closed, Open};
        // two self-loops plus a two-arc ring traversed as one closed walk
        let split = [(vec![0, 0], Closed), (vec![1, 2, 1], Closed), (vec![3, 3], Closed)];
        let r = report_from_anchor_walks(&split);
        assert_eq!((r.loops, r.open_segments), (3, 0));
        assert_eq!((r.n_edges, r.n_vertices, r.n_components), (4, 4, 3));
        // a single ring through two branch points
        let ring = [(vec![0, 1, 0], Closed)];
        assert_eq!(report_from_anchor_walks(&ring).loops, 1);
        // an open walk alone carries no loop
        let open = [(vec![0], Open)];
        let r = report_from_anchor_walks(&open);
        assert_eq!((r.loops, r.open_segments), (0, 1));
        // a ring plus a dangling segment off a third point
        let mixed = [(vec![0, 1, 0], Closed), (vec![2], Open)];
        let r = report_from_anchor_walks(&mixed);
        assert_eq!((r.loops, r.open_segments), (1, 1));
    }

    #[test]
    fn stable_windows_take_the_minimum_overlap_depth() {
        let runs = [(0.0, 2.0), (1.0, 3.0), (1.5, 2.5)];
        let wins = windows_from_runs(&runs, 2);
        assert_eq!(wins.len(), 1);
        assert_eq!((wins[0].lo, wins[0].hi, wins[0].count), (1.0, 2.5, 2));
        assert!(windows_from_runs(&runs, 4).is_empty());
    }

    #[test]
    fn diffusion_sweep_rows_match_the_discrete_closed_form() {
        let mut cfg = SweepConfig::d_study();
        cfg.n_nodes = 31;
        cfg.eps_values = vec![0.05, 0.01];
        cfg.n_events = 2;
        cfg.threads = 2;
        let sweep = sweep_epsilon(&cfg).unwrap();
        assert_eq!(sweep.rows.len(), 4, "two slots at two ladder members");
        for row in &sweep.rows {
            let k: usize = row.event[1..].parse().unwrap();
            let lam = interval_laplace_exact(1.0, cfg.n_nodes, k);
            let oracle =
                critical_d_fast(&cfg.params.with_eps(row.eps), lam).unwrap().unwrap();
            assert!(
                (row.value - oracle).abs() < 1e-6,
                "{} at eps {}: {} vs {}",
                row.event,
                row.eps,
                row.value,
                oracle
            );
            let limit = critical_d(&cfg.params, lam).unwrap().unwrap();
            assert_eq!(row.reference, limit);
            assert_eq!(row.abs_diff, (row.value - row.reference).abs());
        }
        // the gap to the limit shrinks with eps for both modes
        assert!(sweep.monotone_flags.is_empty(), "{:?}", sweep.monotone_flags);

        // the assembled result does not depend on the thread count
        let mut serial = cfg.clone();
        serial.threads = 1;
        assert_eq!(sweep_epsilon(&serial).unwrap(), sweep);
    }

    #[test]
    fn growth_rate_ring_closes_through_both_primaries() {
        let mut cfg = SweepConfig::r1_study();
        cfg.n_nodes = 41;
        let (mesh, ws) = cfg.build_mesh().unwrap();
        let ts = TraceSettings { chunk_steps: 60, ..TraceSettings::default() };
        let study = trace_rings(
            &mesh,
            &ws,
            cfg.params.with_eps(0.01),
            ModelKind::Fast,
            cfg.settings,
            &ts,
        )
        .unwrap();

        // exactly the first mode destabilizes at this relaxation rate, at
        // the roots of the discrete dispersion relation
        assert_eq!(study.primaries.len(), 2, "notes: {:?}", study.notes);
        let lam = interval_laplace_exact(1.0, cfg.n_nodes, 1);
        let det_at = |r1: f64| {
            let p = cfg.params.with_eps(0.01).with_active(r1);
            char_det_fast(&p, lam, p.d1).unwrap()
        };
        for ev in &study.primaries {
            // bisect the dispersion root bracketing the detected point
            let (mut a, mut b) = (ev.param_value - 0.01, ev.param_value + 0.01);
            assert!(det_at(a) * det_at(b) < 0.0, "no dispersion root near {}", ev.param_value);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if det_at(a) * det_at(m) <= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            let root = 0.5 * (a + b);
            assert!(
                (ev.param_value - root).abs() < 1e-5,
                "primary {} vs dispersion root {root}",
                ev.param_value
            );
        }

        // the bifurcating curve leaves the lower point, crosses the upper
        // one, and closes: one loop, traced exactly once
        assert_eq!(study.report.loops, 1, "report {:?}, notes {:?}", study.report, study.notes);
        assert_eq!(study.report.open_segments, 0);
        assert_eq!(study.traced.len(), 1);
        let tb = &study.traced[0];
        assert_eq!(tb.end, TraceEnd::Closed);
        assert_eq!(tb.branch.status, BranchStatus::Closed);
        assert!(tb.anchors.first() == tb.anchors.last() && tb.anchors.len() >= 3);
    }
}
