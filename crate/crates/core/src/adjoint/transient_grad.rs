//! Reverse-mode differentiation of multi-step simulations under a snapshot
//! budget.
//!
//! A transient run is a chain `x_{i+1} = f_i(x_i, θ)` whose loss aggregates
//! small per-step observables `o_i = h_i(x_{i+1}, θ)` — probe samples, outlet
//! flows, and the like. Recording the whole chain on one tape costs memory
//! proportional to its length; [`differentiate_transient`] instead follows a
//! [`CheckpointPlan`]: one recording-free sweep collects the observable
//! values and deposits snapshots, then each step is re-recorded in isolation
//! while cotangents are carried backwards between the per-step tapes. Peak
//! memory is one step's tape plus the snapshot budget, and the result matches
//! the single-tape gradient of [`differentiate_full`] to roundoff.
//!
//! Losses need not decompose into per-step sums: the observables are spliced
//! into a dedicated aggregation tape, so quantities like a time-averaged flow
//! error differentiate correctly — the backward pass of that tape yields one
//! cotangent seed per observation.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::adjoint::checkpoint::{Action, CheckpointPlan};
use crate::error::Result;
use crate::fvops::{diffusion_coeffs, patch_diffusion_coeffs, DiffusionCorrection, FvCtx};
use crate::linalg::{csr_pattern, CsrPattern, KrylovMethod, SolveOpts};
use crate::math::Vec3;
use crate::solvers::uniform_mass_flux;
use crate::tape::{Buffer, GraphMap, Tape, Var};

/// A differentiable time integration, split into the pieces the checkpointed
/// reversal needs to drive separately.
///
/// The contract that makes checkpointing exact: [`advance`](Self::advance)
/// must reproduce bit-for-bit the state that running
/// [`step_taped`](Self::step_taped) and committing its values would give, and
/// both must depend on the step only through the `step` index (never through
/// accumulated mutable state), so a segment re-run from a snapshot retraces
/// the original sweep exactly.
pub trait TimeStepper {
    type State: Clone;
    type StateVars;
    type ParamVars;

    /// Leaf the differentiated parameters onto a tape.
    fn leaf_params(&self, tp: &mut Tape) -> Self::ParamVars;
    /// The parameter leaves gradients are reported for, in a fixed order.
    fn param_vars(&self, pv: &Self::ParamVars) -> Vec<Var>;
    /// Leaf a concrete state onto a tape.
    fn leaf_state(&self, tp: &mut Tape, state: &Self::State) -> Self::StateVars;
    /// Every state leaf/output that carries sensitivity, in a fixed order.
    fn state_vars(&self, sv: &Self::StateVars) -> Vec<Var>;
    /// Run step `step` without recording.
    fn advance(&self, state: &Self::State, step: usize) -> Result<Self::State>;
    /// Run step `step` on the tape.
    fn step_taped(
        &self,
        tp: &mut Tape,
        pv: &Self::ParamVars,
        sv: &Self::StateVars,
        step: usize,
    ) -> Result<Self::StateVars>;
    /// Record the step's observable from the post-step state, if this step
    /// contributes one.
    fn observe_taped(
        &self,
        tp: &mut Tape,
        pv: &Self::ParamVars,
        sv_after: &Self::StateVars,
        step: usize,
    ) -> Result<Option<Var>>;
    /// Aggregate the observables (labelled by step) into the scalar loss.
    fn loss_taped(&self, tp: &mut Tape, pv: &Self::ParamVars, obs: &[(usize, Var)])
        -> Result<Var>;
}

/// Loss and gradients of one differentiated run.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub loss: f64,
    /// One buffer per entry of [`TimeStepper::param_vars`].
    pub param_grads: Vec<Buffer>,
    /// One buffer per entry of [`TimeStepper::state_vars`] of the initial
    /// state.
    pub initial_state_grads: Vec<Buffer>,
    /// Most states held simultaneously; ≤ the plan's budget by construction
    /// (0 for the full-storage path, which snapshots nothing).
    pub peak_snapshots: usize,
}

fn grads_of(tp: &Tape, vars: &[Var]) -> Vec<Buffer> {
    vars.iter()
        .map(|&v| {
            tp.grad(v).cloned().unwrap_or_else(|| {
                let b = tp.val(v);
                Buffer::zeros(b.rows, b.comps)
            })
        })
        .collect()
}

fn accumulate(acc: &mut [Buffer], add: Vec<Buffer>) {
    assert_eq!(acc.len(), add.len());
    for (a, g) in acc.iter_mut().zip(add) {
        assert!(a.rows == g.rows && a.comps == g.comps);
        for (x, y) in a.data.iter_mut().zip(&g.data) {
            *x += y;
        }
    }
}

/// The step's observable as a plain value, via a non-recording tape so it is
/// bitwise the number the recorded pass would produce.
fn observe_value<S: TimeStepper>(
    sys: &S,
    state_after: &S::State,
    step: usize,
) -> Result<Option<Buffer>> {
    let mut tp = Tape::new_nograd();
    let pv = sys.leaf_params(&mut tp);
    let sv = sys.leaf_state(&mut tp, state_after);
    Ok(sys
        .observe_taped(&mut tp, &pv, &sv, step)?
        .map(|v| tp.val(v).clone()))
}

/// Loss of a forward run alone — the sweep phase without any reversal.
/// Useful as the function a finite-difference check perturbs.
pub fn evaluate_loss<S: TimeStepper>(sys: &S, initial: &S::State, n_steps: usize) -> Result<f64> {
    let mut state = initial.clone();
    let mut obs = Vec::new();
    for i in 0..n_steps {
        state = sys.advance(&state, i)?;
        if let Some(b) = observe_value(sys, &state, i)? {
            obs.push((i, b));
        }
    }
    let mut tp = Tape::new_nograd();
    let pv = sys.leaf_params(&mut tp);
    let leafed: Vec<(usize, Var)> = obs.into_iter().map(|(i, b)| (i, tp.leaf(b))).collect();
    let loss = sys.loss_taped(&mut tp, &pv, &leafed)?;
    Ok(tp.val(loss).as_scalar())
}

/// Gradient with the whole chain on a single tape. Memory grows with
/// `n_steps`; serves as the reference the checkpointed path must match.
pub fn differentiate_full<S: TimeStepper>(
    sys: &S,
    initial: &S::State,
    n_steps: usize,
) -> Result<GradientResult> {
    let mut tp = Tape::new();
    let pv = sys.leaf_params(&mut tp);
    let sv0 = sys.leaf_state(&mut tp, initial);
    let init_vars = sys.state_vars(&sv0);
    let mut sv = sv0;
    let mut obs = Vec::new();
    for i in 0..n_steps {
        sv = sys.step_taped(&mut tp, &pv, &sv, i)?;
        if let Some(o) = sys.observe_taped(&mut tp, &pv, &sv, i)? {
            obs.push((i, o));
        }
    }
    let loss = sys.loss_taped(&mut tp, &pv, &obs)?;
    let loss_val = tp.val(loss).as_scalar();
    tp.backward(loss)?;
    Ok(GradientResult {
        loss: loss_val,
        param_grads: grads_of(&tp, &sys.param_vars(&pv)),
        initial_state_grads: grads_of(&tp, &init_vars),
        peak_snapshots: 0,
    })
}

/// Gradient of an `n`-step run under a checkpoint schedule.
///
/// Equals [`differentiate_full`] to roundoff while holding at most one step's
/// tape plus `plan.n_snapshots` states. The per-step cotangent hand-off works
/// by backward-sweeping a pseudo-objective `Σ_k ⟨out_k, carried_k⟩ +
/// ⟨o_i, seed_i⟩` on each step's fresh tape: the dot products inject exactly
/// the carried cotangents, and the step inputs' gradients become the
/// cotangents carried to the step below.
pub fn differentiate_transient<S: TimeStepper>(
    sys: &S,
    initial: &S::State,
    plan: &CheckpointPlan,
) -> Result<GradientResult> {
    let n = plan.n_steps;
    if n == 0 {
        let mut tp = Tape::new();
        let pv = sys.leaf_params(&mut tp);
        let loss = sys.loss_taped(&mut tp, &pv, &[])?;
        let loss_val = tp.val(loss).as_scalar();
        tp.backward(loss)?;
        let param_grads = grads_of(&tp, &sys.param_vars(&pv));
        let mut tz = Tape::new_nograd();
        let _ = sys.leaf_params(&mut tz);
        let sv = sys.leaf_state(&mut tz, initial);
        let initial_state_grads = sys
            .state_vars(&sv)
            .iter()
            .map(|&v| {
                let b = tz.val(v);
                Buffer::zeros(b.rows, b.comps)
            })
            .collect();
        return Ok(GradientResult {
            loss: loss_val,
            param_grads,
            initial_state_grads,
            peak_snapshots: 0,
        });
    }

    let mut obs_vals: Vec<Option<Buffer>> = vec![None; n];
    let mut obs_done = vec![false; n];
    let mut snapshots: BTreeMap<usize, S::State> = BTreeMap::new();
    let mut peak = 0usize;
    let mut cur: Option<(usize, S::State)> = Some((0, initial.clone()));

    let mut loss_val: Option<f64> = None;
    let mut seeds: Vec<Option<Buffer>> = vec![None; n];
    let mut param_acc: Option<Vec<Buffer>> = None;
    // Cotangent of the state flowing INTO the most recently reversed step;
    // None until the last step has been reversed (the loss reaches the final
    // state only through its observable).
    let mut carried: Option<Vec<Buffer>> = None;
    let mut initial_grads: Option<Vec<Buffer>> = None;

    for action in &plan.actions {
        match *action {
            Action::Store { step } => {
                let (pos, state) = cur.as_ref().expect("store without a state in hand");
                assert_eq!(*pos, step, "schedule stores a state it does not hold");
                snapshots.insert(step, state.clone());
                peak = peak.max(snapshots.len());
                assert!(
                    snapshots.len() <= plan.n_snapshots,
                    "snapshot budget exceeded: {} > {}",
                    snapshots.len(),
                    plan.n_snapshots
                );
            }
            Action::Restore { step } => {
                let state = snapshots
                    .get(&step)
                    .expect("restore of a missing snapshot")
                    .clone();
                cur = Some((step, state));
            }
            Action::Discard { step } => {
                snapshots.remove(&step).expect("discard of a missing snapshot");
            }
            Action::Advance { from, to } => {
                let (pos, mut state) = cur.take().expect("advance without a state in hand");
                assert_eq!(pos, from, "schedule advances from a state it does not hold");
                for i in from..to {
                    state = sys.advance(&state, i)?;
                    if !obs_done[i] {
                        obs_vals[i] = observe_value(sys, &state, i)?;
                        obs_done[i] = true;
                    }
                }
                cur = Some((to, state));
            }
            Action::Reverse { step } => {
                if loss_val.is_none() {
                    // First reversal: the sweep is complete, so aggregate the
                    // collected observables into the loss and pull one
                    // cotangent seed per observation out of its backward
                    // sweep.
                    assert!(
                        obs_done.iter().all(|&d| d),
                        "reversal started before the sweep finished"
                    );
                    let mut tp = Tape::new();
                    let pv = sys.leaf_params(&mut tp);
                    let mut leafed = Vec::new();
                    for (i, ob) in obs_vals.iter().enumerate() {
                        if let Some(b) = ob {
                            leafed.push((i, tp.leaf(b.clone())));
                        }
                    }
                    let loss = sys.loss_taped(&mut tp, &pv, &leafed)?;
                    loss_val = Some(tp.val(loss).as_scalar());
                    tp.backward(loss)?;
                    for &(i, v) in &leafed {
                        seeds[i] = tp.grad(v).cloned();
                    }
                    param_acc = Some(grads_of(&tp, &sys.param_vars(&pv)));
                }
                let (pos, state) = cur.take().expect("reverse without the step's state");
                assert_eq!(pos, step, "schedule reverses a step whose state it lacks");
                let mut tp = Tape::new();
                let pv = sys.leaf_params(&mut tp);
                let sv_in = sys.leaf_state(&mut tp, &state);
                let in_vars = sys.state_vars(&sv_in);
                let sv_out = sys.step_taped(&mut tp, &pv, &sv_in, step)?;
                let obs_var = sys.observe_taped(&mut tp, &pv, &sv_out, step)?;
                let mut pseudo = tp.scalar(0.0);
                if let Some(cot) = &carried {
                    let out_vars = sys.state_vars(&sv_out);
                    assert_eq!(out_vars.len(), cot.len());
                    for (v, c) in out_vars.iter().zip(cot) {
                        let cl = tp.leaf(c.clone());
                        let term = tp.dot(*v, cl);
                        pseudo = tp.add(pseudo, term);
                    }
                }
                if let (Some(ov), Some(seed)) = (obs_var, &seeds[step]) {
                    let sl = tp.leaf(seed.clone());
                    let term = tp.dot(ov, sl);
                    pseudo = tp.add(pseudo, term);
                }
                tp.backward(pseudo)?;
                accumulate(
                    param_acc.as_mut().expect("loss pass ran before any reversal"),
                    grads_of(&tp, &sys.param_vars(&pv)),
                );
                let state_grads = grads_of(&tp, &in_vars);
                if step == 0 {
                    initial_grads = Some(state_grads.clone());
                }
                carried = Some(state_grads);
            }
        }
    }
    assert!(snapshots.is_empty(), "schedule left snapshots behind");
    Ok(GradientResult {
        loss: loss_val.expect("schedule contained no reversal"),
        param_grads: param_acc.expect("schedule contained no reversal"),
        initial_state_grads: initial_grads.expect("step 0 was never reversed"),
        peak_snapshots: peak,
    })
}

/// Backward-Euler scalar transport with implicit upwind convection and
/// two-point diffusion on an orthogonal mesh, carried by a uniform prescribed
/// velocity. One patch holds a Dirichlet value — the differentiated
/// parameter; every other patch is zero-gradient. The observable is the
/// solution sampled at probe cells every step, and the loss is the mean
/// squared mismatch against fixed targets.
///
/// The matrix is constant in time, so it is assembled once here and leafed
/// onto each tape as data; only the right-hand side depends on the state and
/// the inlet value.
#[derive(Clone)]
pub struct ScalarTransportSystem {
    ctx: FvCtx,
    pat: Arc<CsrPattern>,
    diag: Arc<Vec<f64>>,
    upper: Arc<Vec<f64>>,
    lower: Arc<Vec<f64>>,
    /// V/Δt per cell: the transient term and the old-state RHS weight.
    vdt: Arc<Vec<f64>>,
    /// RHS factor per inlet face: γα_b − min(ṁ_b, 0), multiplying the inlet
    /// value.
    inlet_factor: Arc<Vec<f64>>,
    inlet_patch: usize,
    pub inlet_value: f64,
    opts: SolveOpts,
    probes: Arc<Vec<u32>>,
    neg_targets: Arc<Vec<f64>>,
}

pub struct TransportParams {
    inlet: Var,
    diag: Var,
    upper: Var,
    lower: Var,
}

impl ScalarTransportSystem {
    pub fn new(
        ctx: FvCtx,
        u: Vec3,
        gamma: f64,
        dt: f64,
        inlet_patch: &str,
        inlet_value: f64,
        probes: Vec<u32>,
        targets: Vec<f64>,
    ) -> Result<ScalarTransportSystem> {
        assert_eq!(probes.len(), targets.len());
        let graph = Arc::clone(&ctx.graph);
        let n = graph.n_cells;
        let ne = graph.n_edges();
        let inlet = graph
            .patch_index(inlet_patch)
            .unwrap_or_else(|| panic!("mesh has no patch named '{inlet_patch}'"));
        let (mdot, patch_mdot) = uniform_mass_flux(&ctx, u);
        let (alpha, _) = diffusion_coeffs(&graph, DiffusionCorrection::None)?;
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; ne];
        let mut lower = vec![0.0; ne];
        for e in 0..ne {
            let (o, nb) = (graph.owner[e] as usize, graph.neighbour[e] as usize);
            let m = mdot[e];
            diag[o] += m.max(0.0);
            upper[e] += m.min(0.0);
            diag[nb] -= m.min(0.0);
            lower[e] -= m.max(0.0);
            let a = gamma * alpha[e];
            diag[o] += a;
            upper[e] -= a;
            diag[nb] += a;
            lower[e] -= a;
        }
        let mut inlet_factor = Vec::new();
        for (pi, patch) in graph.patches.iter().enumerate() {
            let pm = &patch_mdot[pi];
            if pi == inlet {
                let (alpha_b, _) = patch_diffusion_coeffs(patch, DiffusionCorrection::None)?;
                for (f, &c) in patch.cells.iter().enumerate() {
                    let ab = gamma * alpha_b[f];
                    diag[c as usize] += pm[f].max(0.0) + ab;
                    inlet_factor.push(ab - pm[f].min(0.0));
                }
            } else {
                // Zero-gradient: the face value is the cell value, so the
                // signed boundary flux lands on the diagonal.
                for (f, &c) in patch.cells.iter().enumerate() {
                    diag[c as usize] += pm[f];
                }
            }
        }
        let mut vdt = vec![0.0; n];
        for c in 0..n {
            vdt[c] = graph.volume[c] / dt;
            diag[c] += vdt[c];
        }
        Ok(ScalarTransportSystem {
            pat: csr_pattern(&graph),
            ctx,
            diag: Arc::new(diag),
            upper: Arc::new(upper),
            lower: Arc::new(lower),
            vdt: Arc::new(vdt),
            inlet_factor: Arc::new(inlet_factor),
            inlet_patch: inlet,
            inlet_value,
            opts: SolveOpts {
                method: KrylovMethod::BiCgStab,
                tol: 1e-12,
                max_iter: 500,
            },
            probes: Arc::new(probes),
            neg_targets: Arc::new(targets.into_iter().map(|t| -t).collect()),
        })
    }

    /// Uniform initial field.
    pub fn initial_state(&self, value: f64) -> Vec<f64> {
        vec![value; self.ctx.n_cells()]
    }
}

impl TimeStepper for ScalarTransportSystem {
    type State = Vec<f64>;
    type StateVars = Var;
    type ParamVars = TransportParams;

    fn leaf_params(&self, tp: &mut Tape) -> TransportParams {
        TransportParams {
            inlet: tp.leaf(Buffer::scalar(self.inlet_value)),
            diag: tp.leaf(Buffer::from_vec((*self.diag).clone(), 1)),
            upper: tp.leaf(Buffer::from_vec((*self.upper).clone(), 1)),
            lower: tp.leaf(Buffer::from_vec((*self.lower).clone(), 1)),
        }
    }

    fn param_vars(&self, pv: &TransportParams) -> Vec<Var> {
        vec![pv.inlet]
    }

    fn leaf_state(&self, tp: &mut Tape, state: &Vec<f64>) -> Var {
        tp.leaf(Buffer::from_vec(state.clone(), 1))
    }

    fn state_vars(&self, sv: &Var) -> Vec<Var> {
        vec![*sv]
    }

    fn advance(&self, state: &Vec<f64>, step: usize) -> Result<Vec<f64>> {
        let mut tp = Tape::new_nograd();
        let pv = self.leaf_params(&mut tp);
        let sv = self.leaf_state(&mut tp, state);
        let next = self.step_taped(&mut tp, &pv, &sv, step)?;
        Ok(tp.val(next).data.clone())
    }

    fn step_taped(
        &self,
        tp: &mut Tape,
        pv: &TransportParams,
        sv: &Var,
        _step: usize,
    ) -> Result<Var> {
        let old_term = tp.mul_const_arr(*sv, Arc::clone(&self.vdt));
        let nf = self.inlet_factor.len();
        let rhs = if nf > 0 {
            let face_theta = tp.broadcast(pv.inlet, nf);
            let face_src = tp.mul_const_arr(face_theta, Arc::clone(&self.inlet_factor));
            let src = tp.scatter_add(
                &self.ctx.graph,
                GraphMap::Patch(self.inlet_patch),
                face_src,
            );
            tp.add(old_term, src)
        } else {
            old_term
        };
        let (next, _) = tp.linear_solve(&self.pat, self.opts, pv.diag, pv.upper, pv.lower, rhs)?;
        Ok(next)
    }

    fn observe_taped(
        &self,
        tp: &mut Tape,
        _pv: &TransportParams,
        sv_after: &Var,
        _step: usize,
    ) -> Result<Option<Var>> {
        Ok(Some(tp.gather_idx(Arc::clone(&self.probes), *sv_after)))
    }

    fn loss_taped(
        &self,
        tp: &mut Tape,
        _pv: &TransportParams,
        obs: &[(usize, Var)],
    ) -> Result<Var> {
        let mut acc = tp.scalar(0.0);
        for &(_, o) in obs {
            let d = tp.add_const_arr(o, Arc::clone(&self.neg_targets));
            let sq = tp.dot(d, d);
            acc = tp.add(acc, sq);
        }
        let denom = (obs.len().max(1) * self.probes.len()) as f64;
        Ok(tp.scale_const(acc, 1.0 / denom))
    }
}
