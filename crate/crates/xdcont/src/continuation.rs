//! Pseudo-arclength continuation of steady states in one scalar parameter.
//!
//! The extended unknown is (x, p) with the Keller constraint
//! <x - x_k, tx>/n + (p - p_k) tp = ds, using the weighted inner product
//! that divides state components by their dimension so parameter and state
//! contributions balance on any mesh. Linear solves go through bordered
//! block elimination on the banded Jacobian; the sign of the bordered
//! determinant, the parameter component of the tangent, and the unstable
//! eigenvalue count form the test-function battery for event detection.
//! Events are localized by recursive bisection in the step length and the
//! localized points are inserted into the branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemWorkspace;
use crate::linalg::BandMatrix;
use crate::mesh::Mesh;
use crate::models::{
    block_mass, homogeneous_state, jacobian, measures, residual, residual_param_derivative,
    state_flags, ContinuationParam, Measures, ModelKind, Params, State, StateFlags,
};
use crate::stability::{classify, leading_spectrum, SpectrumSlice, STABILITY_TOL};

/// Step control, tolerances and event handling for one continuation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationSettings {
    /// Initial arclength step.
    pub ds0: f64,
    /// Step floor: a corrector failure below this aborts the branch.
    pub ds_min: f64,
    /// Step ceiling for the adaptive growth.
    pub ds_max: f64,
    /// Initial direction of the parameter (+1 or -1).
    pub direction: f64,
    pub max_steps: usize,
    /// Absolute max-norm tolerance on the extended residual.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// The run stops once the parameter leaves [param_min, param_max].
    pub param_min: f64,
    pub param_max: f64,
    /// Number of leading eigenvalues tracked along the branch.
    pub n_eigs: usize,
    /// Relative bisection tolerance (in units of the step) for events.
    pub event_refine: f64,
    /// Initial kernel amplitude when switching onto a bifurcating branch.
    pub switch_delta: f64,
    /// Parameter detuning used by branch switching to step off the exact
    /// bifurcation point before correcting at fixed parameter.
    pub switch_detune: f64,
    pub detect_events: bool,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        ContinuationSettings {
            ds0: 1e-3,
            ds_min: 1e-7,
            ds_max: 5e-3,
            direction: -1.0,
            max_steps: 400,
            newton_tol: 1e-10,
            newton_max_iter: 20,
            param_min: 1e-4,
            param_max: 10.0,
            n_eigs: 10,
            event_refine: 1e-9,
            switch_delta: 1e-2,
            switch_detune: 2e-4,
            detect_events: true,
        }
    }
}

impl ContinuationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds0 > 0.0 && self.ds_min > 0.0 && self.ds_max >= self.ds0) {
            return Err(Error::invalid(format!(
                "need 0 < ds_min, 0 < ds0 <= ds_max (got {}, {}, {})",
                self.ds_min, self.ds0, self.ds_max
            )));
        }
        if self.direction != 1.0 && self.direction != -1.0 {
            return Err(Error::invalid(format!("direction must be +1 or -1, got {}", self.direction)));
        }
        if self.param_min >= self.param_max {
            return Err(Error::invalid("empty parameter window"));
        }
        if self.newton_tol <= 0.0 || self.newton_max_iter == 0 {
            return Err(Error::invalid("newton tolerance and iteration budget must be positive"));
        }
        if self.n_eigs == 0 {
            return Err(Error::invalid("need at least one tracked eigenvalue"));
        }
        Ok(())
    }
}

/// What ended a continuation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    MaxSteps,
    LeftWindow,
    StepFailure { ds: f64, residual: f64 },
    /// Set by ring tracing when a branch returns to its starting branch
    /// point; plain continuation never emits this.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BranchPoint,
    Fold,
    Hopf,
}

impl EventKind {
    /// Flag value used in the branch CSV (0 marks a regular point).
    pub fn flag(self) -> u8 {
        match self {
            EventKind::BranchPoint => 1,
            EventKind::Fold => 2,
            EventKind::Hopf => 3,
        }
    }
}

/// Test-function values on both sides of a localized event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestValues {
    pub det_sign_before: i8,
    pub det_sign_after: i8,
    /// Sign of the bordered determinant det(J) * tau, which flips at branch
    /// points but stays put across folds.
    pub bordered_sign_before: i8,
    pub bordered_sign_after: i8,
    pub tangent_param_before: f64,
    pub tangent_param_after: f64,
    /// Real part of the leading complex pair at the event, or -1 when the
    /// leading eigenvalues are real (the no-Hopf sentinel).
    pub hopf_real: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub id: usize,
    pub kind: EventKind,
    pub param_value: f64,
    pub state: State,
    pub multiplicity: usize,
    pub n_unstable_before: usize,
    pub n_unstable_after: usize,
    pub test_values: TestValues,
}

/// One accepted point of a branch (or an inserted event point).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint {
    pub step_index: usize,
    pub state: State,
    pub measures: Measures,
    pub n_unstable: usize,
    pub marginal: bool,
    pub flags: StateFlags,
    pub det_sign: i8,
    pub tangent_x: Vec<f64>,
    pub tangent_p: f64,
    pub spectrum: Option<SpectrumSlice>,
    /// 0 for regular points, else the flag of the event localized here.
    pub event_flag: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub label: String,
    pub model: ModelKind,
    pub param: ContinuationParam,
    pub points: Vec<BranchPoint>,
    pub events: Vec<EventRecord>,
    pub status: BranchStatus,
}

impl Branch {
    /// Parameter values of all events of one kind, in branch order.
    pub fn event_params(&self, kind: EventKind) -> Vec<f64> {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.param_value).collect()
    }
}

/// A converged starting point plus the orientation the first tangent is
/// aligned against.
#[derive(Debug, Clone)]
pub struct BranchSeed {
    pub state: State,
    pub prev_tangent_x: Vec<f64>,
    pub prev_tangent_p: f64,
}

/// Everything continuation needs about one corrected point: factorization
/// byproducts, test functions, tangent and spectrum.
#[derive(Clone)]
struct PointCtx {
    x: Vec<f64>,
    p: f64,
    det_sign: i8,
    bordered_sign: i8,
    tangent_x: Vec<f64>,
    tangent_p: f64,
    spectrum: SpectrumSlice,
    n_unstable: usize,
}

impl PointCtx {
    fn state(&self, model: ModelKind) -> State {
        State::new(self.x.clone(), self.p, model)
    }
}

pub struct Continuer<'a> {
    pub mesh: &'a Mesh,
    pub ws: &'a FemWorkspace,
    pub params: Params,
    pub model: ModelKind,
    pub settings: ContinuationSettings,
    mass: BandMatrix,
    n_x: usize,
}

impl<'a> Continuer<'a> {
    pub fn new(
        mesh: &'a Mesh,
        ws: &'a FemWorkspace,
        params: Params,
        model: ModelKind,
        settings: ContinuationSettings,
    ) -> Result<Self> {
        params.validate(model)?;
        settings.validate()?;
        let nc = model.components();
        Ok(Continuer {
            mesh,
            ws,
            params,
            model,
            settings,
            mass: block_mass(ws, nc),
            n_x: nc * ws.node_count,
        })
    }

    /// Weighted inner product of extended vectors.
    fn wdot(&self, ax: &[f64], ap: f64, bx: &[f64], bp: f64) -> f64 {
        let mut s = 0.0;
        for (a, b) in ax.iter().zip(bx) {
            s += a * b;
        }
        s / self.n_x as f64 + ap * bp
    }

    /// Seed on the spatially homogeneous branch at the current parameters.
    pub fn init_from_homogeneous(&self) -> Result<BranchSeed> {
        let s = homogeneous_state(self.ws, &self.params, self.model)?;
        let g = residual(self.mesh, self.ws, &self.params, &s)?;
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm > self.settings.newton_tol.max(1e-9) {
            return Err(Error::NoStart(format!(
                "homogeneous state has residual {gnorm:.3e}; equilibrium may be inadmissible"
            )));
        }
        Ok(BranchSeed {
            state: s,
            prev_tangent_x: vec![0.0; self.n_x],
            prev_tangent_p: self.settings.direction,
        })
    }

    /// Corrects (x, p) onto the branch at pseudo-arclength `ds` from the
    /// anchor along `(tx, tp)`. Returns the corrected pair and the Newton
    /// iteration count.
    #[allow(clippy::too_many_arguments)]
    pub fn corrector(
        &self,
        anchor_x: &[f64],
        anchor_p: f64,
        tx: &[f64],
        tp: f64,
        ds: f64,
        x0: &[f64],
        p0: f64,
    ) -> Result<(Vec<f64>, f64, usize, f64)> {
        let mut x = x0.to_vec();
        let mut p = p0;
        let max_iter = self.settings.newton_max_iter;
        for it in 0..=max_iter {
            let prm = self.params.with_active(p);
            let s = State::new(x.clone(), p, self.model);
            let g = residual(self.mesh, self.ws, &prm, &s)?;
            let dx_anchor: Vec<f64> = x.iter().zip(anchor_x).map(|(a, b)| a - b).collect();
            let n_res = self.wdot(&dx_anchor, p - anchor_p, tx, tp) - ds;
            let gnorm = g.iter().fold(n_res.abs(), |m, v| m.max(v.abs()));
            if gnorm < self.settings.newton_tol {
                // a "success" far from the predictor is a slide onto a
                // different curve through the near-singular Jacobian at a
                // bifurcation point, not a continuation step
                let inv_n = 1.0 / x.len() as f64;
                let drift = (x
                    .iter()
                    .zip(x0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    * inv_n
                    + (p - p0) * (p - p0))
                    .sqrt();
                let allowed = 1e-3 + 20.0 * ds.abs();
                if drift > allowed {
                    return Err(Error::Jump { dist: drift, allowed });
                }
                return Ok((x, p, it, gnorm));
            }
            if !gnorm.is_finite() || gnorm > 1e8 {
                return Err(Error::Divergence(format!("extended residual {gnorm:.3e}")));
            }
            if it == max_iter {
                return Err(Error::StepFailure { max_iter, residual: gnorm });
            }
            let jac = jacobian(self.ws, &prm, &s)?;
            let lu = jac.factor()?;
            let b = residual_param_derivative(self.ws, &prm, &s)?;
            let (dx, dp) = self.bordered_solve(
                &lu, &jac, &b, tx, tp, &g.iter().map(|v| -v).collect::<Vec<_>>(), -n_res,
            )?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            p += dp;
        }
        unreachable!("loop returns on its last pass");
    }

    /// Solves [J b; c^T/n tp] (dx, dp) = (r1, r2) by block elimination with
    /// one pass of iterative refinement.
    fn bordered_solve(
        &self,
        lu: &crate::models::JacobianLu,
        jac: &crate::models::Jacobian,
        b: &[f64],
        cx: &[f64],
        cp: f64,
        r1: &[f64],
        r2: f64,
    ) -> Result<(Vec<f64>, f64)> {
        let solve_once = |rhs1: &[f64], rhs2: f64| -> Result<(Vec<f64>, f64)> {
            let z1 = lu.solve(b)?;
            let z2 = lu.solve(rhs1)?;
            let denom = cp - self.wdot(cx, 0.0, &z1, 0.0);
            if denom.abs() < 1e-300 {
                return Err(Error::Linear("singular bordered system".into()));
            }
            let dp = (rhs2 - self.wdot(cx, 0.0, &z2, 0.0)) / denom;
            let dx: Vec<f64> = z2.iter().zip(&z1).map(|(a, c)| a - dp * c).collect();
            Ok((dx, dp))
        };
        let (mut dx, mut dp) = solve_once(r1, r2)?;
        // one refinement pass against the exact bordered residual
        let jx = jac.apply(&dx);
        let res1: Vec<f64> = r1
            .iter()
            .zip(jx.iter().zip(b))
            .map(|(r, (a, bi))| r - a - bi * dp)
            .collect();
        let res2 = r2 - self.wdot(cx, 0.0, &dx, 0.0) - cp * dp;
        let (ex, ep) = solve_once(&res1, res2)?;
        for (d, e) in dx.iter_mut().zip(&ex) {
            *d += e;
        }
        dp += ep;
        Ok((dx, dp))
    }

    /// Unit tangent at (x, p) oriented along the previous tangent; also
    /// returns the raw bordering denominator whose sign, combined with
    /// det J, gives the bordered determinant test function.
    pub fn tangent(
        &self,
        lu: &crate::models::JacobianLu,
        b: &[f64],
        prev_tx: &[f64],
        prev_tp: f64,
    ) -> Result<(Vec<f64>, f64, f64)> {
        let z1 = lu.solve(b)?;
        let tau_raw = prev_tp - self.wdot(prev_tx, 0.0, &z1, 0.0);
        let (mut tx, mut tp);
        if tau_raw.abs() < 1e-12 {
            // tangent orthogonal to the previous constraint row: fall back
            // to the unnormalized direction (-z1, 1)
            tx = z1.iter().map(|v| -v).collect::<Vec<_>>();
            tp = 1.0;
        } else {
            tp = 1.0 / tau_raw;
            tx = z1.iter().map(|v| -tp * v).collect::<Vec<_>>();
        }
        let nrm = self.wdot(&tx, tp, &tx, tp).sqrt();
        tx.iter_mut().for_each(|v| *v /= nrm);
        tp /= nrm;
        if self.wdot(&tx, tp, prev_tx, prev_tp) < 0.0 {
            tx.iter_mut().for_each(|v| *v = -*v);
            tp = -tp;
        }
        Ok((tx, tp, tau_raw))
    }

    /// Factors the exact Jacobian at a corrected point and evaluates every
    /// test function there.
    fn make_ctx(&self, x: Vec<f64>, p: f64, prev_tx: &[f64], prev_tp: f64) -> Result<PointCtx> {
        let prm = self.params.with_active(p);
        let s = State::new(x, p, self.model);
        let jac = jacobian(self.ws, &prm, &s)?;
        let lu = jac.factor()?;
        let b = residual_param_derivative(self.ws, &prm, &s)?;
        let (tangent_x, tangent_p, tau_raw) = self.tangent(&lu, &b, prev_tx, prev_tp)?;
        let det_sign = lu.det_sign();
        let bordered_sign = det_sign * if tau_raw >= 0.0 { 1 } else { -1 };
        let spectrum = leading_spectrum(&jac, &self.mass, self.settings.n_eigs)?;
        let n_unstable = spectrum.n_unstable;
        Ok(PointCtx {
            x: s.fields,
            p,
            det_sign,
            bordered_sign,
            tangent_x,
            tangent_p,
            spectrum,
            n_unstable,
        })
    }

    fn branch_point_from_ctx(&self, ctx: &PointCtx, event_flag: u8) -> BranchPoint {
        let s = ctx.state(self.model);
        let prm = self.params.with_active(ctx.p);
        BranchPoint {
            step_index: 0,
            measures: measures(self.ws, &s),
            n_unstable: ctx.n_unstable,
            marginal: ctx.spectrum.marginal,
            flags: state_flags(self.mesh, &prm, &s),
            det_sign: ctx.det_sign,
            tangent_x: ctx.tangent_x.clone(),
            tangent_p: ctx.tangent_p,
            spectrum: Some(ctx.spectrum.clone()),
            event_flag,
            state: s,
        }
    }

    /// Runs the continuation from a seed until the parameter window, the
    /// step budget, or the corrector gives out.
    pub fn continue_branch(&self, seed: &BranchSeed, label: &str) -> Result<Branch> {
        let st = &self.settings;
        let mut points: Vec<BranchPoint> = Vec::new();
        let mut events: Vec<EventRecord> = Vec::new();

        let mut ctx = self.make_ctx(
            seed.state.fields.clone(),
            seed.state.param_value,
            &seed.prev_tangent_x,
            seed.prev_tangent_p,
        )?;
        points.push(self.branch_point_from_ctx(&ctx, 0));

        // geometric closure guard: a curve that wanders off and comes back
        // to its seed is a loop, and would otherwise cycle until the step
        // budget runs out
        let x0 = ctx.x.clone();
        let p0 = ctx.p;
        let arm = 10.0 * st.ds_max;
        let mut armed = false;

        let mut ds = st.ds0;
        let mut status = BranchStatus::MaxSteps;
        for _ in 0..st.max_steps {
            // predictor along the current tangent
            let mut accepted: Option<(PointCtx, usize)> = None;
            while ds >= st.ds_min {
                let x_pred: Vec<f64> =
                    ctx.x.iter().zip(&ctx.tangent_x).map(|(x, t)| x + ds * t).collect();
                let p_pred = ctx.p + ds * ctx.tangent_p;
                match self.corrector(
                    &ctx.x, ctx.p, &ctx.tangent_x, ctx.tangent_p, ds, &x_pred, p_pred,
                ) {
                    Ok((x, p, iters, _)) => {
                        let next = self.make_ctx(x, p, &ctx.tangent_x, ctx.tangent_p)?;
                        accepted = Some((next, iters));
                        break;
                    }
                    Err(Error::StepFailure { .. }) | Err(Error::Divergence(_))
                    | Err(Error::Linear(_)) | Err(Error::Jump { .. }) => {
                        ds *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
            let Some((next, iters)) = accepted else {
                let residual = f64::NAN;
                status = BranchStatus::StepFailure { ds, residual };
                break;
            };

            if st.detect_events {
                self.scan_events(&ctx, &next, ds, &mut points, &mut events)?;
            }
            points.push(self.branch_point_from_ctx(&next, 0));
            let p_now = next.p;
            let inv_n = 1.0 / next.x.len() as f64;
            let seed_dist = (next
                .x
                .iter()
                .zip(&x0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * inv_n
                + (p_now - p0) * (p_now - p0))
                .sqrt();
            ctx = next;
            if iters <= 3 {
                ds = (ds * 1.3).min(st.ds_max);
            }
            if !armed {
                armed = seed_dist > arm;
            } else if seed_dist < 2.0 * ds {
                status = BranchStatus::Closed;
                break;
            }
            if p_now < st.param_min || p_now > st.param_max {
                status = BranchStatus::LeftWindow;
                break;
            }
        }

        for (i, pt) in points.iter_mut().enumerate() {
            pt.step_index = i;
        }
        Ok(Branch {
            label: label.to_string(),
            model: self.model,
            param: self.params.active,
            points,
            events,
            status,
        })
    }

    /// Detects and localizes all events between two accepted points by
    /// recursive bisection in the step length, inserting localized points
    /// and event records.
    fn scan_events(
        &self,
        anchor: &PointCtx,
        end: &PointCtx,
        ds: f64,
        points: &mut Vec<BranchPoint>,
        events: &mut Vec<EventRecord>,
    ) -> Result<()> {
        #[derive(Clone, Copy)]
        struct SideVals {
            n_unstable: usize,
            det_sign: i8,
            bordered_sign: i8,
            tangent_p: f64,
        }
        impl SideVals {
            fn of(ctx: &PointCtx) -> Self {
                SideVals {
                    n_unstable: ctx.n_unstable,
                    det_sign: ctx.det_sign,
                    bordered_sign: ctx.bordered_sign,
                    tangent_p: ctx.tangent_p,
                }
            }
        }
        struct Probe {
            s: f64,
            vals: SideVals,
            ctx: Option<PointCtx>,
        }
        struct Bracket {
            s_lo: f64,
            s_hi: f64,
            a: SideVals,
            b: SideVals,
            ctx: PointCtx,
        }
        let lo = Probe { s: 0.0, vals: SideVals::of(anchor), ctx: None };
        let hi = Probe { s: ds, vals: SideVals::of(end), ctx: None };
        let tol = self.settings.event_refine * ds;
        let mut stack = vec![(lo, hi)];
        let mut found: Vec<Bracket> = Vec::new();
        let mut guard = 0usize;
        while let Some((a, b)) = stack.pop() {
            guard += 1;
            if guard > 4000 {
                return Err(Error::Divergence("event bisection failed to terminate".into()));
            }
            let differs = a.vals.n_unstable != b.vals.n_unstable
                || a.vals.det_sign != b.vals.det_sign
                || a.vals.tangent_p * b.vals.tangent_p < 0.0;
            if !differs {
                continue;
            }
            // a probe pinned against the singular point itself may be
            // uncorrectable; settle for the nearer full-step endpoint then
            let endpoint_ctx =
                |s: f64| if s < 0.5 * ds { anchor.clone() } else { end.clone() };
            if b.s - a.s < tol {
                let mid = 0.5 * (a.s + b.s);
                let ctx = match b.ctx {
                    Some(c) => c,
                    None => self.probe_soft(anchor, mid)?.unwrap_or_else(|| endpoint_ctx(mid)),
                };
                found.push(Bracket { s_lo: a.s, s_hi: b.s, a: a.vals, b: b.vals, ctx });
                continue;
            }
            // try off-center splits before giving up on a failing probe
            let mut split = None;
            for frac in [0.5, 0.382, 0.75] {
                let s = a.s + frac * (b.s - a.s);
                if let Some(ctx) = self.probe_soft(anchor, s)? {
                    split = Some((s, ctx));
                    break;
                }
            }
            match split {
                Some((mid_s, mid_ctx)) => {
                    let vals = SideVals::of(&mid_ctx);
                    let mid_a = Probe { s: mid_s, vals, ctx: None };
                    let mid_b = Probe { s: mid_s, vals, ctx: Some(mid_ctx) };
                    // push the far half first so events emerge ordered by s
                    stack.push((mid_a, b));
                    stack.push((a, mid_b));
                }
                None => {
                    let mid = 0.5 * (a.s + b.s);
                    let ctx = match b.ctx {
                        Some(c) => c,
                        None => endpoint_ctx(mid),
                    };
                    found.push(Bracket { s_lo: a.s, s_hi: b.s, a: a.vals, b: b.vals, ctx });
                }
            }
        }

        // One crossing produces several nearby sign-change loci: the count
        // flips where the eigenvalue passes the stability tolerance, the
        // determinant (and at folds the tangent) where it passes zero, and
        // at a branch point crossed along its bifurcating curve the
        // critical eigenvalue touches zero quadratically, dipping under the
        // tolerance and back. Brackets belong to one event when they are
        // closer than the merge width or the eigenvalue stays pinned to the
        // axis between them (the gap probe is marginal); the merged test
        // values span the cluster and its state comes from the singular
        // locus when one was bracketed.
        let merge_w = (1e-3 * ds).max(4.0 * tol);
        let mut merged: Vec<(SideVals, SideVals, PointCtx)> = Vec::new();
        let mut i = 0;
        while i < found.len() {
            let mut j = i;
            while j + 1 < found.len() {
                let (gap_lo, gap_hi) = (found[j].s_hi, found[j + 1].s_lo);
                let same_event = gap_hi - gap_lo < merge_w
                    || match self.probe_at(anchor, 0.5 * (gap_lo + gap_hi)) {
                        Ok(mid) => mid.spectrum.marginal,
                        // a corrector dying inside the gap means the gap
                        // sits on the singular structure itself
                        Err(_) => true,
                    };
                if !same_event {
                    break;
                }
                j += 1;
            }
            let rep = (i..=j)
                .find(|&k| {
                    let br = &found[k];
                    br.a.det_sign != br.b.det_sign || br.a.tangent_p * br.b.tangent_p < 0.0
                })
                .unwrap_or(j);
            let (av, bv) = (found[i].a, found[j].b);
            merged.push((av, bv, found[rep].ctx.clone()));
            i = j + 1;
        }

        for (av, bv, ctx) in merged {
            // events localized beyond the declared window belong to the
            // overshoot of the final step, not to the study
            if ctx.p < self.settings.param_min || ctx.p > self.settings.param_max {
                continue;
            }
            let hopf_real = leading_complex_re(&ctx.spectrum).unwrap_or(-1.0);
            let is_hopf = hopf_real != -1.0
                && bv.n_unstable.abs_diff(av.n_unstable) >= 2
                && ctx.spectrum.eigenvalues.iter().any(|z| z.im.abs() > 1e-8 && z.re.abs() < 1e-6);
            // the bordered determinant flips at branch points (including a
            // pitchfork crossed along its bifurcating curve, where neither
            // the count nor det J changes) but not at folds; a tangent
            // reversal without a bordered flip is a fold
            let kind = if is_hopf {
                EventKind::Hopf
            } else if av.bordered_sign != bv.bordered_sign {
                EventKind::BranchPoint
            } else if av.tangent_p * bv.tangent_p < 0.0 {
                EventKind::Fold
            } else {
                EventKind::BranchPoint
            };
            let multiplicity = bv.n_unstable.abs_diff(av.n_unstable).max(1);
            let record = EventRecord {
                id: events.len(),
                kind,
                param_value: ctx.p,
                state: ctx.state(self.model),
                multiplicity,
                n_unstable_before: av.n_unstable,
                n_unstable_after: bv.n_unstable,
                test_values: TestValues {
                    det_sign_before: av.det_sign,
                    det_sign_after: bv.det_sign,
                    bordered_sign_before: av.bordered_sign,
                    bordered_sign_after: bv.bordered_sign,
                    tangent_param_before: av.tangent_p,
                    tangent_param_after: bv.tangent_p,
                    hopf_real,
                },
            };
            events.push(record);
            points.push(self.branch_point_from_ctx(&ctx, kind.flag()));
        }
        Ok(())
    }

    /// Predicts and corrects a point at arclength `s` from the anchor.
    fn probe_at(&self, anchor: &PointCtx, s: f64) -> Result<PointCtx> {
        let x_pred: Vec<f64> =
            anchor.x.iter().zip(&anchor.tangent_x).map(|(x, t)| x + s * t).collect();
        let p_pred = anchor.p + s * anchor.tangent_p;
        let (x, p, _, _) = self.corrector(
            &anchor.x, anchor.p, &anchor.tangent_x, anchor.tangent_p, s, &x_pred, p_pred,
        )?;
        self.make_ctx(x, p, &anchor.tangent_x, anchor.tangent_p)
    }

    /// Like `probe_at`, but a corrector breakdown yields `None`: right next
    /// to a singular point the probe may legitimately fail to converge, and
    /// the bracket hunt has to degrade instead of abandoning the branch.
    fn probe_soft(&self, anchor: &PointCtx, s: f64) -> Result<Option<PointCtx>> {
        match self.probe_at(anchor, s) {
            Ok(ctx) => Ok(Some(ctx)),
            Err(Error::StepFailure { .. }) | Err(Error::Divergence(_)) | Err(Error::Linear(_))
            | Err(Error::Jump { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Localizes the first event within `ds` of the anchor point, if its
    /// test functions differ from the anchor's at full step. A thin public
    /// wrapper over the scan used internally by `continue_branch`.
    pub fn locate_event(&self, anchor: &BranchPoint, ds: f64) -> Result<Option<EventRecord>> {
        let a_ctx = self.make_ctx(
            anchor.state.fields.clone(),
            anchor.state.param_value,
            &anchor.tangent_x,
            anchor.tangent_p,
        )?;
        let end = self.probe_at(&a_ctx, ds)?;
        let mut points = Vec::new();
        let mut events = Vec::new();
        self.scan_events(&a_ctx, &end, ds, &mut points, &mut events)?;
        Ok(events.into_iter().next())
    }

    /// Plain Newton on G(x; p) = 0 at fixed parameter.
    pub fn fixed_param_newton(&self, x0: &[f64], p: f64) -> Result<(Vec<f64>, usize)> {
        self.fixed_param_newton_budget(x0, p, self.settings.newton_max_iter)
    }

    /// Fixed-parameter Newton with an explicit iteration budget. Branch
    /// switching passes a larger one: next to a pitchfork the Jacobian at
    /// the target solution is almost singular and the final contraction is
    /// linear, not quadratic.
    pub fn fixed_param_newton_budget(
        &self,
        x0: &[f64],
        p: f64,
        max_iter: usize,
    ) -> Result<(Vec<f64>, usize)> {
        let prm = self.params.with_active(p);
        let mut x = x0.to_vec();
        for it in 0..=max_iter {
            let s = State::new(x.clone(), p, self.model);
            let g = residual(self.mesh, self.ws, &prm, &s)?;
            let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm < self.settings.newton_tol {
                return Ok((x, it));
            }
            if !gnorm.is_finite() || gnorm > 1e8 {
                return Err(Error::Divergence(format!("residual {gnorm:.3e}")));
            }
            if it == max_iter {
                return Err(Error::StepFailure { max_iter, residual: gnorm });
            }
            let jac = jacobian(self.ws, &prm, &s)?;
            let lu = jac.factor()?;
            let dx = lu.solve(&g)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi -= di;
            }
        }
        unreachable!("loop returns on its last pass");
    }

    /// Approximate kernel vector of the Jacobian at a bifurcation point by
    /// inverse iteration from a deterministic start.
    fn kernel_vector(&self, state: &State) -> Result<Vec<f64>> {
        let prm = self.params.with_active(state.param_value);
        let jac = jacobian(self.ws, &prm, state)?;
        let lu = jac.factor()?;
        let mut w: Vec<f64> = (0..self.n_x).map(|i| (3.7 * (i + 1) as f64).sin()).collect();
        for _ in 0..12 {
            let mut y = lu.solve(&w)?;
            let nrm = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !nrm.is_finite() || nrm == 0.0 {
                return Err(Error::Linear("inverse iteration collapsed".into()));
            }
            y.iter_mut().for_each(|v| *v /= nrm);
            w = y;
        }
        Ok(w)
    }

    /// Builds a seed on a branch bifurcating at `event`. `side` (+1/-1)
    /// selects the kernel direction; for a pitchfork the two sides give the
    /// two half-branches. The parameter is detuned into the side of the
    /// event where the new branch exists before correcting at fixed
    /// parameter; both detuning sides and growing amplitudes are retried.
    pub fn switch_branch(&self, event: &EventRecord, side: f64) -> Result<BranchSeed> {
        if side != 1.0 && side != -1.0 {
            return Err(Error::invalid(format!("side must be +1 or -1, got {side}")));
        }
        if event.kind != EventKind::BranchPoint {
            return Err(Error::SwitchFailure(format!(
                "can only switch at branch points, event {} is {:?}",
                event.id, event.kind
            )));
        }
        let psi = self.kernel_vector(&event.state)?;
        let p_star = event.state.param_value;
        // amplitude scale: kernel has unit max-norm, fields are O(1)
        let mut delta = self.settings.switch_delta;
        let mut last_err: Option<Error> = None;
        for attempt in 0..4 {
            for detune_sign in [1.0, -1.0] {
                let p_try = p_star + detune_sign * self.settings.switch_detune;
                let x0: Vec<f64> = event
                    .state
                    .fields
                    .iter()
                    .zip(&psi)
                    .map(|(x, k)| x + side * delta * k)
                    .collect();
                match self.fixed_param_newton_budget(&x0, p_try, 40) {
                    Ok((x, _)) => {
                        // reject convergence back onto the branch we left
                        let dist = x
                            .iter()
                            .zip(&event.state.fields)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0f64, f64::max);
                        if dist < 0.05 * delta {
                            last_err = Some(Error::SwitchFailure(format!(
                                "corrector fell back onto the incoming branch at {p_try}"
                            )));
                            continue;
                        }
                        let tangent_p0 = 0.0;
                        let prev_tx: Vec<f64> = x
                            .iter()
                            .zip(&event.state.fields)
                            .map(|(a, b)| a - b)
                            .collect();
                        let state = State::new(x, p_try, self.model);
                        return Ok(BranchSeed {
                            state,
                            prev_tangent_x: prev_tx,
                            prev_tangent_p: tangent_p0,
                        });
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            delta *= 3.0;
            let _ = attempt;
        }
        Err(Error::SwitchFailure(format!(
            "no bifurcating solution found near event {} ({}); last error: {}",
            event.id,
            p_star,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

/// Re of the leading complex-conjugate pair, if the slice has one.
fn leading_complex_re(spec: &SpectrumSlice) -> Option<f64> {
    spec.eigenvalues.iter().find(|z| z.im.abs() > 1e-8).map(|z| z.re)
}

/// Convenience: unstable count of a state outside any continuation run.
pub fn n_unstable_of(
    ws: &FemWorkspace,
    params: &Params,
    state: &State,
    n_eigs: usize,
) -> Result<(usize, bool)> {
    let prm = params.with_active(state.param_value);
    let jac = jacobian(ws, &prm, state)?;
    let mass = block_mass(ws, state.components());
    let spec = leading_spectrum(&jac, &mass, n_eigs)?;
    Ok(classify(&spec.eigenvalues, STABILITY_TOL))
}
