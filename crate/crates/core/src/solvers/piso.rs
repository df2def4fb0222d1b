//! Incompressible Navier–Stokes pressure–velocity coupling on collocated
//! fields: implicit backward-Euler momentum predictor, then repeated
//! pressure corrections on the momentum-weighted graph Laplacian with
//! momentum-interpolated face fluxes, so the corrected flux field is
//! discretely divergence-free to solver tolerance.
//!
//! The whole step is expressed as tape operations; the plain entry point
//! runs the same code on a non-recording tape, so forward simulation and
//! reverse-mode differentiation share one implementation.

use std::sync::Arc;

use crate::bc::{boundary_face_values, BcContext, BcKind, BcSet, BcValue, WindkesselState};
use crate::error::{Error, Result};
use crate::fvops::{
    convective_face_value, diffusion_coeffs, diffusive_flux, green_gauss_from_face_values,
    green_gauss_gradient, interpolate_linear, patch_diffusion_coeffs, surface_sum,
    ConvectionScheme, DiffusionCorrection, FvCtx,
};
use crate::linalg::{csr_pattern, KrylovMethod, SolveOpts, SolveReport};
use crate::math::Vec3;
use crate::tape::{Buffer, GraphMap, Tape, Var, WindkesselScheme};

#[derive(Clone, Copy, Debug)]
pub struct PisoConfig {
    /// Kinematic viscosity ν.
    pub nu: f64,
    pub scheme: ConvectionScheme,
    pub correction: DiffusionCorrection,
    pub n_correctors: usize,
    /// Extra pressure passes per corrector refreshing the non-orthogonal
    /// correction; skipped automatically on orthogonal meshes.
    pub n_nonortho: usize,
    pub momentum_solve: SolveOpts,
    pub pressure_solve: SolveOpts,
    /// Continuity acceptance: max cell |Σṁ_f| ≤ factor × pressure abs tol.
    pub div_limit_factor: f64,
}

impl PisoConfig {
    pub fn new(nu: f64) -> PisoConfig {
        PisoConfig {
            nu,
            scheme: ConvectionScheme::Upwind,
            correction: DiffusionCorrection::OverRelaxed,
            n_correctors: 2,
            n_nonortho: 1,
            momentum_solve: SolveOpts {
                method: KrylovMethod::BiCgStab,
                tol: 1e-7,
                max_iter: 500,
            },
            pressure_solve: SolveOpts {
                method: KrylovMethod::Cg,
                tol: 1e-8,
                max_iter: 1000,
            },
            div_limit_factor: 10.0,
        }
    }
}

/// Collocated flow state: cell velocity and kinematic pressure plus the face
/// mass fluxes they imply, and one lumped outlet state per windkessel patch.
#[derive(Clone, Debug)]
pub struct FieldState {
    pub u: Vec<Vec3>,
    pub p: Vec<f64>,
    /// ṁ per internal edge, oriented owner → neighbour.
    pub phi: Vec<f64>,
    /// ṁ per boundary face, outward, one vector per patch.
    pub patch_phi: Vec<Vec<f64>>,
    pub t: f64,
    pub windkessel: Vec<Option<WindkesselState>>,
}

impl FieldState {
    /// Zero flow at t = 0 with windkessel capacitors discharged.
    pub fn at_rest(ctx: &FvCtx, bcs: &BcSet) -> Result<FieldState> {
        let graph = &ctx.graph;
        let classes = classify_patches(ctx, bcs)?;
        let windkessel = classes
            .iter()
            .map(|c| match &c.pres {
                PresBc::Windkessel { scheme, .. } => Some(WindkesselState::new(0.0, *scheme)),
                _ => None,
            })
            .collect();
        Ok(FieldState {
            u: vec![Vec3::ZERO; graph.n_cells],
            p: vec![0.0; graph.n_cells],
            phi: vec![0.0; graph.n_edges()],
            patch_phi: graph.patches.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0.0,
            windkessel,
        })
    }
}

/// The same state as tape variables, for chaining steps inside one tape.
pub struct PisoStateVars {
    pub u: Var,
    pub p: Var,
    pub phi: Var,
    pub patch_phi: Vec<Var>,
    pub windkessel_pc: Vec<Option<Var>>,
}

impl PisoStateVars {
    pub fn leaf(tp: &mut Tape, state: &FieldState) -> PisoStateVars {
        PisoStateVars {
            u: tp.leaf(Buffer::from_vec3(&state.u)),
            p: tp.leaf(Buffer::from_vec(state.p.clone(), 1)),
            phi: tp.leaf(Buffer::from_vec(state.phi.clone(), 1)),
            patch_phi: state
                .patch_phi
                .iter()
                .map(|f| tp.leaf(Buffer::from_vec(f.clone(), 1)))
                .collect(),
            windkessel_pc: state
                .windkessel
                .iter()
                .map(|w| w.as_ref().map(|w| tp.leaf(Buffer::scalar(w.pc))))
                .collect(),
        }
    }
}

/// Differentiable stand-ins for boundary data: a `("U", patch)` entry
/// replaces the prescribed face velocity with a uniform 1×3 variable; a
/// `("p", patch)` entry on a windkessel patch supplies (Rp, C, Rd) as 1×3.
#[derive(Default)]
pub struct PisoOverrides {
    entries: Vec<(String, String, Var)>,
}

impl PisoOverrides {
    pub fn new() -> PisoOverrides {
        PisoOverrides::default()
    }

    pub fn set(&mut self, field: &str, patch: &str, v: Var) {
        self.entries.push((field.into(), patch.into(), v));
    }

    fn get(&self, field: &str, patch: &str) -> Option<Var> {
        self.entries
            .iter()
            .find(|(f, p, _)| f == field && p == patch)
            .map(|(_, _, v)| *v)
    }
}

enum VelBc {
    /// Face velocity known from the boundary condition.
    Fixed,
    ZeroGrad,
    Empty,
}

enum PresBc {
    Fixed(f64),
    Windkessel {
        params: crate::bc::WindkesselParams,
        scheme: WindkesselScheme,
    },
    ZeroGrad,
    Empty,
}

struct PatchClass {
    vel: VelBc,
    pres: PresBc,
}

impl PatchClass {
    fn vel_fixed(&self) -> bool {
        matches!(self.vel, VelBc::Fixed)
    }

    /// Pressure-corrected boundary: the face flux responds to the solve.
    fn pres_corrected(&self) -> bool {
        matches!(self.pres, PresBc::Fixed(_) | PresBc::Windkessel { .. })
    }
}

fn classify_patches(ctx: &FvCtx, bcs: &BcSet) -> Result<Vec<PatchClass>> {
    let unsupported = |kind: &BcKind, field: &str, patch: &str, supported: &str| {
        Error::UnsupportedScheme {
            keyword: kind.name().into(),
            context: format!("{field} boundary on patch '{patch}' in the flow solver"),
            supported: supported.into(),
        }
    };
    let mut out = Vec::with_capacity(ctx.graph.patches.len());
    for patch in &ctx.graph.patches {
        let uspec = bcs.get("U", &patch.name)?;
        let vel = match &uspec.kind {
            BcKind::FixedValue(BcValue::Vector(_))
            | BcKind::ParabolicInflow { .. }
            | BcKind::TimeVaryingInflow { shape: BcValue::Vector(_), .. } => VelBc::Fixed,
            BcKind::FixedValue(BcValue::Scalar(_))
            | BcKind::TimeVaryingInflow { shape: BcValue::Scalar(_), .. } => {
                return Err(Error::ShapeError {
                    context: format!("velocity boundary on patch '{}'", patch.name),
                    expected: "vector value".into(),
                    got: "scalar".into(),
                })
            }
            BcKind::ZeroGradient => VelBc::ZeroGrad,
            BcKind::Empty => VelBc::Empty,
            other => {
                return Err(unsupported(
                    other,
                    "U",
                    &patch.name,
                    "fixedValue, parabolicInflow, timeVaryingInflow, zeroGradient, empty",
                ))
            }
        };
        let pspec = bcs.get("p", &patch.name)?;
        let pres = match &pspec.kind {
            BcKind::FixedValue(BcValue::Scalar(v)) => PresBc::Fixed(*v),
            BcKind::FixedValue(BcValue::Vector(_)) => {
                return Err(Error::ShapeError {
                    context: format!("pressure boundary on patch '{}'", patch.name),
                    expected: "scalar value".into(),
                    got: "vector".into(),
                })
            }
            BcKind::WindkesselRcr { params, scheme } => {
                params.validate()?;
                PresBc::Windkessel { params: *params, scheme: *scheme }
            }
            BcKind::ZeroGradient => PresBc::ZeroGrad,
            BcKind::Empty => PresBc::Empty,
            other => {
                return Err(unsupported(
                    other,
                    "p",
                    &patch.name,
                    "fixedValue, windkesselRCR, zeroGradient, empty",
                ))
            }
        };
        let class = PatchClass { vel, pres };
        let bad_combo = |hint: &str| Error::UnsupportedScheme {
            keyword: format!("{} + {}", uspec.kind.name(), pspec.kind.name()),
            context: format!("U/p pairing on patch '{}'", patch.name),
            supported: hint.into(),
        };
        let vel_empty = matches!(class.vel, VelBc::Empty);
        let pres_empty = matches!(class.pres, PresBc::Empty);
        if vel_empty != pres_empty {
            return Err(bad_combo("empty must apply to both fields"));
        }
        if class.vel_fixed() && class.pres_corrected() {
            return Err(bad_combo(
                "pressure-corrected patches need zero-gradient velocity",
            ));
        }
        out.push(class);
    }
    Ok(out)
}

/// Momentum system for one backward-Euler step: shared matrix (a_P, upper,
/// lower over the cell graph) and per-component right-hand sides, split so
/// H(u)/a_P can be re-evaluated during the correctors.
pub struct MomentumSystem {
    /// Matrix diagonal a_P.
    pub a_p: Var,
    pub upper: Var,
    pub lower: Var,
    /// Per-component rhs without the explicit pressure gradient.
    pub rhs_nopress: [Var; 3],
    /// Full rhs, −Σ p_f Sf included.
    pub rhs: [Var; 3],
    /// Prescribed boundary fluxes u_b·Sf per fixed-velocity patch.
    face_mdot: Vec<Option<Var>>,
    /// Old-time outlet pressure per windkessel patch.
    po_old: Vec<Option<Var>>,
    /// Windkessel parameter variables (rp, c, rd) per windkessel patch.
    wk_params: Vec<Option<[Var; 3]>>,
}

fn windkessel_param_vars(
    tp: &mut Tape,
    overrides: &PisoOverrides,
    patch_name: &str,
    params: &crate::bc::WindkesselParams,
) -> [Var; 3] {
    match overrides.get("p", patch_name) {
        Some(v) => {
            let rp = tp.comp(v, 0);
            let c = tp.comp(v, 1);
            let rd = tp.comp(v, 2);
            [rp, c, rd]
        }
        None => [
            tp.leaf(Buffer::scalar(params.rp)),
            tp.leaf(Buffer::scalar(params.c)),
            tp.leaf(Buffer::scalar(params.rd)),
        ],
    }
}

/// Assemble the implicit momentum system about the current state. The matrix
/// couples through the upwinded old fluxes and the two-point viscous part;
/// deferred corrections, boundary constants and the explicit −Σ p_f Sf land
/// in the rhs.
pub fn assemble_momentum(
    tp: &mut Tape,
    ctx: &FvCtx,
    cfg: &PisoConfig,
    bcs: &BcSet,
    overrides: &PisoOverrides,
    state: &PisoStateVars,
    dt: f64,
    t_new: f64,
) -> Result<MomentumSystem> {
    let graph = &ctx.graph;
    let n = graph.n_cells;
    let ne = graph.n_edges();
    assert!(dt > 0.0);
    let classes = classify_patches(ctx, bcs)?;

    let (alpha, _) = diffusion_coeffs(graph, cfg.correction)?;
    let vdt: Arc<Vec<f64>> = Arc::new(graph.volume.iter().map(|&v| v / dt).collect());

    // Constant diagonal part: V/dt, interior viscosity, Dirichlet viscosity.
    let mut diag_const = vec![0.0; n];
    for i in 0..n {
        diag_const[i] += vdt[i];
    }
    for e in 0..ne {
        let c = cfg.nu * alpha[e];
        diag_const[graph.owner[e] as usize] += c;
        diag_const[graph.neighbour[e] as usize] += c;
    }
    let mut nualpha_b: Vec<Option<Arc<Vec<f64>>>> = vec![None; graph.patches.len()];
    let mut k_b: Vec<Option<Arc<Vec<Vec3>>>> = vec![None; graph.patches.len()];
    for (p, patch) in graph.patches.iter().enumerate() {
        if classes[p].vel_fixed() {
            let (coeff, k) = patch_diffusion_coeffs(patch, cfg.correction)?;
            let scaled: Vec<f64> = coeff.iter().map(|c| cfg.nu * c).collect();
            for (f, &cell) in patch.cells.iter().enumerate() {
                diag_const[cell as usize] += scaled[f];
            }
            nualpha_b[p] = Some(Arc::new(scaled));
            k_b[p] = Some(Arc::new(k));
        }
    }

    // Flux-dependent convection.
    let m_out = tp.max_zero(state.phi);
    let m_in = tp.min_zero(state.phi);
    let diag_o = tp.scatter_add(graph, GraphMap::Owner, m_out);
    let diag_n = tp.scatter_add(graph, GraphMap::Neighbour, m_in);
    let mut diag = tp.sub(diag_o, diag_n);
    for (p, class) in classes.iter().enumerate() {
        if matches!(class.vel, VelBc::ZeroGrad) {
            let s = tp.scatter_add(graph, GraphMap::Patch(p), state.patch_phi[p]);
            diag = tp.add(diag, s);
        }
    }
    let diag = tp.add_const_arr(diag, Arc::new(diag_const));
    let neg_nual: Arc<Vec<f64>> = Arc::new(alpha.iter().map(|a| -cfg.nu * a).collect());
    let upper = tp.add_const_arr(m_in, Arc::clone(&neg_nual));
    let neg_out = tp.neg(m_out);
    let lower = tp.add_const_arr(neg_out, neg_nual);

    {
        let dv = tp.val(diag);
        let mut worst = (0usize, f64::INFINITY);
        for (i, &v) in dv.data.iter().enumerate() {
            if v < worst.1 {
                worst = (i, v);
            }
        }
        if worst.1 < 1e-300 {
            return Err(Error::InvalidCoefficients { cell: worst.0, value: worst.1 });
        }
    }

    // Prescribed face velocities and their fluxes, plus the lagged outlet
    // pressure of windkessel patches (recomputed from the stored capacitor
    // state and incoming fluxes).
    let np = graph.patches.len();
    let mut face_u: Vec<Option<Var>> = vec![None; np];
    let mut face_mdot: Vec<Option<Var>> = vec![None; np];
    let mut po_old: Vec<Option<Var>> = vec![None; np];
    let mut wk_params: Vec<Option<[Var; 3]>> = vec![None; np];
    for (p, patch) in graph.patches.iter().enumerate() {
        match &classes[p].pres {
            PresBc::Windkessel { params, .. } => {
                let vars = windkessel_param_vars(tp, overrides, &patch.name, params);
                let pc = state.windkessel_pc[p]
                    .expect("windkessel patch requires a capacitor state");
                let q = tp.sum_all(state.patch_phi[p]);
                let rp_q = tp.mul(vars[0], q);
                po_old[p] = Some(tp.add(pc, rp_q));
                wk_params[p] = Some(vars);
            }
            _ => {}
        }
        if classes[p].vel_fixed() {
            let v = match overrides.get("U", &patch.name) {
                Some(ov) => {
                    let cx = tp.comp(ov, 0);
                    let cy = tp.comp(ov, 1);
                    let cz = tp.comp(ov, 2);
                    let bx = tp.broadcast(cx, patch.len());
                    let by = tp.broadcast(cy, patch.len());
                    let bz = tp.broadcast(cz, patch.len());
                    tp.join3(bx, by, bz)
                }
                None => {
                    let spec = bcs.get("U", &patch.name)?;
                    let zeros = vec![0.0; patch.len() * 3];
                    let bctx = BcContext { t: t_new, ..Default::default() };
                    let vals = boundary_face_values(spec, patch, &zeros, 3, bctx)?;
                    tp.leaf(Buffer::from_vec(vals, 3))
                }
            };
            face_mdot[p] = Some(tp.dot_vec_const(v, Arc::clone(&ctx.patch_sf[p])));
            face_u[p] = Some(v);
        }
    }

    // Cell gradients per component for the deferred corrections.
    let needs_grad = matches!(cfg.scheme, ConvectionScheme::Sou | ConvectionScheme::Quick)
        || (cfg.nu > 0.0 && cfg.correction != DiffusionCorrection::None);
    let needs_corr = cfg.scheme != ConvectionScheme::Upwind
        || (cfg.nu > 0.0 && cfg.correction != DiffusionCorrection::None);
    let mut grads: [Option<Var>; 3] = [None; 3];
    if needs_grad {
        for k in 0..3 {
            let uk = tp.comp(state.u, k);
            let mut pvals = Vec::with_capacity(np);
            for (p, _) in graph.patches.iter().enumerate() {
                let v = match face_u[p] {
                    Some(fu) => tp.comp(fu, k),
                    None => tp.gather(graph, GraphMap::Patch(p), uk),
                };
                pvals.push(v);
            }
            grads[k] = Some(green_gauss_gradient(tp, ctx, uk, &pvals));
        }
    }

    // Old-pressure face values and the explicit cell gradient term Σ p_f Sf.
    let mut p_face_patches = Vec::with_capacity(np);
    for (p, _) in graph.patches.iter().enumerate() {
        let v = match &classes[p].pres {
            PresBc::Fixed(pb) => {
                let arr = vec![*pb; graph.patches[p].len()];
                tp.leaf(Buffer::from_vec(arr, 1))
            }
            PresBc::Windkessel { .. } => {
                let po = po_old[p].expect("windkessel pressure prepared above");
                tp.broadcast(po, graph.patches[p].len())
            }
            _ => tp.gather(graph, GraphMap::Patch(p), state.p),
        };
        p_face_patches.push(v);
    }
    let p_f = interpolate_linear(tp, ctx, state.p);
    let gp = green_gauss_from_face_values(tp, ctx, p_f, &p_face_patches);
    let vgradp = tp.mul_const_arr(gp, Arc::new(graph.volume.clone()));

    let mut rhs_nopress = [state.u; 3];
    let mut rhs = [state.u; 3];
    for k in 0..3 {
        let uk = tp.comp(state.u, k);
        let mut r = tp.mul_const_arr(uk, Arc::clone(&vdt));
        if needs_corr {
            let (_, conv_corr) =
                convective_face_value(tp, ctx, cfg.scheme, uk, grads[k], state.phi);
            let mut internal = conv_corr;
            let mut patch_corr: Vec<Option<Var>> = vec![None; np];
            if cfg.nu > 0.0 && cfg.correction != DiffusionCorrection::None {
                let (_, expl) = diffusive_flux(tp, ctx, grads[k], cfg.nu, cfg.correction)?;
                internal = tp.sub(internal, expl.expect("correcting mode"));
                for (p, kb) in k_b.iter().enumerate() {
                    if let Some(kb) = kb {
                        let g = grads[k].expect("gradient computed for correcting mode");
                        let gc = tp.gather(graph, GraphMap::Patch(p), g);
                        let kd = tp.dot_vec_const(gc, Arc::clone(kb));
                        patch_corr[p] = Some(tp.scale_const(kd, -cfg.nu));
                    }
                }
            }
            let s_corr = surface_sum(tp, ctx, internal, &patch_corr);
            r = tp.sub(r, s_corr);
        }
        for (p, fu) in face_u.iter().enumerate() {
            let Some(fu) = fu else { continue };
            let ubk = tp.comp(*fu, k);
            let visc = match &nualpha_b[p] {
                Some(arr) => Some(tp.mul_const_arr(ubk, Arc::clone(arr))),
                None => None,
            };
            let conv = tp.mul(ubk, face_mdot[p].expect("fixed patches carry fluxes"));
            let term = match visc {
                Some(v) => tp.sub(v, conv),
                None => tp.neg(conv),
            };
            let s = tp.scatter_add(graph, GraphMap::Patch(p), term);
            r = tp.add(r, s);
        }
        rhs_nopress[k] = r;
        let gpk = tp.comp(vgradp, k);
        rhs[k] = tp.sub(r, gpk);
    }

    Ok(MomentumSystem {
        a_p: diag,
        upper,
        lower,
        rhs_nopress,
        rhs,
        face_mdot,
        po_old,
        wk_params,
    })
}

pub struct PisoReport {
    pub momentum: Vec<SolveReport>,
    pub pressure: Vec<SolveReport>,
    pub max_div: f64,
    pub div_limit: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Make a cell field mean-free: the consistency projection for the singular
/// pressure system.
fn remove_mean(tp: &mut Tape, v: Var, n_cells: usize) -> Var {
    let s = tp.sum_all(v);
    let m = tp.scale_const(s, 1.0 / n_cells as f64);
    let mb = tp.broadcast(m, n_cells);
    tp.sub(v, mb)
}

/// One full PISO step as tape operations: predictor, `n_correctors` pressure
/// corrections with windkessel outlet pressures lagged one corrector, and the
/// continuity check on the corrected fluxes. `t_old` is the time the input
/// state belongs to; prescribed boundaries evaluate at `t_old + dt`.
#[allow(clippy::too_many_arguments)]
pub fn piso_step_taped(
    tp: &mut Tape,
    ctx: &FvCtx,
    cfg: &PisoConfig,
    bcs: &BcSet,
    overrides: &PisoOverrides,
    state: &PisoStateVars,
    t_old: f64,
    dt: f64,
    step: usize,
) -> Result<(PisoStateVars, PisoReport)> {
    assert!(cfg.n_correctors >= 1);
    let graph = &ctx.graph;
    let np = graph.patches.len();
    let classes = classify_patches(ctx, bcs)?;
    let t_new = t_old + dt;

    let sys = assemble_momentum(tp, ctx, cfg, bcs, overrides, state, dt, t_new)?;
    let pat = csr_pattern(graph);

    // Predictor. The solver starts from zero, so its report's initial
    // residual says nothing about the flow; overwrite it with the momentum
    // residual of the old field — the quantity residual logs track.
    let mut momentum_reports = Vec::with_capacity(3);
    let mut u_comp = [state.u; 3];
    for k in 0..3 {
        let uk = tp.comp(state.u, k);
        let ax = tp.spmv(&pat, sys.a_p, sys.upper, sys.lower, uk);
        let r0 = tp.sub(sys.rhs[k], ax);
        let bn = norm2(&tp.val(sys.rhs[k]).data);
        let rn = norm2(&tp.val(r0).data);
        let (x, mut rep) =
            tp.linear_solve(&pat, cfg.momentum_solve, sys.a_p, sys.upper, sys.lower, sys.rhs[k])?;
        rep.initial_residual = if bn > 0.0 { rn / bn } else { 0.0 };
        u_comp[k] = x;
        momentum_reports.push(rep);
    }

    // Pressure-equation constants.
    let (alpha_p, k_p) = diffusion_coeffs(graph, cfg.correction)?;
    let has_nonortho = k_p
        .iter()
        .zip(&graph.sf)
        .any(|(k, sf)| k.norm() > 1e-12 * sf.norm());
    let recip_ap = tp.recip(sys.a_p);
    let ap_o = tp.gather(graph, GraphMap::Owner, sys.a_p);
    let ap_n = tp.gather(graph, GraphMap::Neighbour, sys.a_p);
    let ap_f = tp.weighted_sum(ap_o, ap_n, Arc::clone(&ctx.w));
    let inv_apf = tp.recip(ap_f);
    let c_e = tp.mul_const_arr(inv_apf, Arc::new(alpha_p.clone()));
    let k_p_arc = Arc::new(k_p);

    // Per-patch pressure pieces: c_b and the boundary remainder for
    // pressure-corrected patches.
    let mut c_b: Vec<Option<Var>> = vec![None; np];
    let mut inv_ap_b: Vec<Option<Var>> = vec![None; np];
    let mut k_pb: Vec<Option<Arc<Vec<Vec3>>>> = vec![None; np];
    for (p, patch) in graph.patches.iter().enumerate() {
        if classes[p].pres_corrected() {
            let (coeff, k) = patch_diffusion_coeffs(patch, cfg.correction)?;
            let ga = tp.gather(graph, GraphMap::Patch(p), sys.a_p);
            let inv = tp.recip(ga);
            c_b[p] = Some(tp.mul_const_arr(inv, Arc::new(coeff)));
            inv_ap_b[p] = Some(inv);
            k_pb[p] = Some(Arc::new(k));
        }
    }

    // Null-space handling: with no pressure-setting patch the Laplacian is
    // singular with a constant null space. Solving the projected system
    // (mean-free rhs) keeps the residual bound valid for every cell —
    // including the reference cell — and the level is anchored afterwards
    // by subtracting the cell-0 value.
    let has_reference = classes.iter().any(|c| c.pres_corrected());
    let n_cells = graph.n_cells;
    let neg_c = tp.neg(c_e);
    let (p_upper, p_lower) = (neg_c, neg_c);
    let diag_own = tp.scatter_add(graph, GraphMap::Owner, c_e);
    let diag_nb = tp.scatter_add(graph, GraphMap::Neighbour, c_e);
    let mut p_diag = tp.add(diag_own, diag_nb);
    for (p, cb) in c_b.iter().enumerate() {
        if let Some(cb) = cb {
            let s = tp.scatter_add(graph, GraphMap::Patch(p), *cb);
            p_diag = tp.add(p_diag, s);
        }
    }

    // Corrector loop state.
    let mut u_cur = tp.join3(u_comp[0], u_comp[1], u_comp[2]);
    let mut p_cur = state.p;
    let mut phi_cur = state.phi;
    let mut patch_phi_cur = state.patch_phi.clone();
    let mut pressure_reports = Vec::new();
    let mut po_cur: Vec<Option<Var>> = sys.po_old.clone();
    let mut q_cur: Vec<Option<Var>> = vec![None; np];

    for _corrector in 0..cfg.n_correctors {
        // Lagged windkessel outlet pressure from the latest fluxes.
        for (p, class) in classes.iter().enumerate() {
            if let PresBc::Windkessel { scheme, .. } = &class.pres {
                let [rp, c, rd] = sys.wk_params[p].expect("windkessel params prepared");
                let pc = state.windkessel_pc[p].expect("windkessel state present");
                let q = tp.sum_all(patch_phi_cur[p]);
                let pc_next = tp.windkessel_step(*scheme, dt, pc, q, rd, c);
                let rp_q = tp.mul(rp, q);
                po_cur[p] = Some(tp.add(pc_next, rp_q));
                q_cur[p] = Some(q);
            }
        }

        // H(u)/a_P and its face fluxes.
        let mut h_comp = [u_cur; 3];
        for k in 0..3 {
            let xk = tp.comp(u_cur, k);
            let ax = tp.spmv(&pat, sys.a_p, sys.upper, sys.lower, xk);
            let resid = tp.sub(sys.rhs_nopress[k], ax);
            let scaled = tp.mul(resid, recip_ap);
            h_comp[k] = tp.add(xk, scaled);
        }
        let hby = tp.join3(h_comp[0], h_comp[1], h_comp[2]);
        let h_o = tp.gather(graph, GraphMap::Owner, hby);
        let h_n = tp.gather(graph, GraphMap::Neighbour, hby);
        let h_f = tp.weighted_sum(h_o, h_n, Arc::clone(&ctx.w));
        let phi_a = tp.dot_vec_const(h_f, Arc::clone(&ctx.sf));
        let mut phi_a_b: Vec<Option<Var>> = vec![None; np];
        for (p, class) in classes.iter().enumerate() {
            phi_a_b[p] = match (&class.vel, &class.pres) {
                (VelBc::Empty, _) => None,
                (VelBc::Fixed, _) => sys.face_mdot[p],
                _ => {
                    let hb = tp.gather(graph, GraphMap::Patch(p), hby);
                    Some(tp.dot_vec_const(hb, Arc::clone(&ctx.patch_sf[p])))
                }
            };
        }

        // Base rhs: −Σ φ_A plus the fixed boundary pressure terms.
        let div_a = surface_sum(tp, ctx, phi_a, &phi_a_b);
        let mut rhs0 = tp.neg(div_a);
        for (p, class) in classes.iter().enumerate() {
            let Some(cb) = c_b[p] else { continue };
            let term = match &class.pres {
                PresBc::Fixed(pb) => {
                    let arr: Arc<Vec<f64>> =
                        Arc::new(vec![*pb; graph.patches[p].len()]);
                    tp.mul_const_arr(cb, arr)
                }
                PresBc::Windkessel { .. } => {
                    let po = po_cur[p].expect("windkessel pressure prepared");
                    let pb = tp.broadcast(po, graph.patches[p].len());
                    tp.mul(cb, pb)
                }
                _ => unreachable!("c_b built only for pressure-corrected patches"),
            };
            let s = tp.scatter_add(graph, GraphMap::Patch(p), term);
            rhs0 = tp.add(rhs0, s);
        }
        if !has_reference {
            rhs0 = remove_mean(tp, rhs0, n_cells);
        }

        // Pressure solves: plain two-point system, then non-orthogonal
        // refreshes on meshes that need them.
        let passes = if has_nonortho { cfg.n_nonortho } else { 0 };
        let (mut p_new, rep) =
            tp.linear_solve(&pat, cfg.pressure_solve, p_diag, p_upper, p_lower, rhs0)?;
        pressure_reports.push(rep);
        let mut n_int: Option<Var> = None;
        let mut n_b: Vec<Option<Var>> = vec![None; np];
        for _pass in 0..passes {
            // Face values of the current pressure iterate.
            let mut pvals = Vec::with_capacity(np);
            for (p, class) in classes.iter().enumerate() {
                let v = match &class.pres {
                    PresBc::Fixed(pb) => {
                        tp.leaf(Buffer::from_vec(vec![*pb; graph.patches[p].len()], 1))
                    }
                    PresBc::Windkessel { .. } => {
                        let po = po_cur[p].expect("windkessel pressure prepared");
                        tp.broadcast(po, graph.patches[p].len())
                    }
                    _ => tp.gather(graph, GraphMap::Patch(p), p_new),
                };
                pvals.push(v);
            }
            let grad_p = green_gauss_gradient(tp, ctx, p_new, &pvals);
            let g_o = tp.gather(graph, GraphMap::Owner, grad_p);
            let g_n = tp.gather(graph, GraphMap::Neighbour, grad_p);
            let g_f = tp.weighted_sum(g_o, g_n, Arc::clone(&ctx.w));
            let kdot = tp.dot_vec_const(g_f, Arc::clone(&k_p_arc));
            n_int = Some(tp.mul(inv_apf, kdot));
            for (p, kb) in k_pb.iter().enumerate() {
                let Some(kb) = kb else { continue };
                let gc = tp.gather(graph, GraphMap::Patch(p), grad_p);
                let kd = tp.dot_vec_const(gc, Arc::clone(kb));
                let inv = inv_ap_b[p].expect("inverse diagonal prepared");
                n_b[p] = Some(tp.mul(inv, kd));
            }
            let n_sum = surface_sum(tp, ctx, n_int.expect("just set"), &n_b);
            let mut rhs_j = tp.add(rhs0, n_sum);
            if !has_reference {
                rhs_j = remove_mean(tp, rhs_j, n_cells);
            }
            let (px, rep) =
                tp.linear_solve(&pat, cfg.pressure_solve, p_diag, p_upper, p_lower, rhs_j)?;
            p_new = px;
            pressure_reports.push(rep);
        }
        if !has_reference {
            let p0 = tp.gather_idx(Arc::new(vec![0u32]), p_new);
            let pb = tp.broadcast(p0, n_cells);
            p_new = tp.sub(p_new, pb);
        }

        // Corrected face fluxes: ṁ = φ_A + c(p_O − p_N) − N.
        let p_o = tp.gather(graph, GraphMap::Owner, p_new);
        let p_n = tp.gather(graph, GraphMap::Neighbour, p_new);
        let dp = tp.sub(p_o, p_n);
        let corr = tp.mul(c_e, dp);
        let mut phi_new = tp.add(phi_a, corr);
        if let Some(nv) = n_int {
            phi_new = tp.sub(phi_new, nv);
        }
        let mut patch_new: Vec<Var> = Vec::with_capacity(np);
        for (p, class) in classes.iter().enumerate() {
            let v = if let Some(cb) = c_b[p] {
                let pc_cell = tp.gather(graph, GraphMap::Patch(p), p_new);
                let pb = match &class.pres {
                    PresBc::Fixed(pbv) => {
                        tp.leaf(Buffer::from_vec(vec![*pbv; graph.patches[p].len()], 1))
                    }
                    PresBc::Windkessel { .. } => {
                        let po = po_cur[p].expect("windkessel pressure prepared");
                        tp.broadcast(po, graph.patches[p].len())
                    }
                    _ => unreachable!(),
                };
                let d = tp.sub(pc_cell, pb);
                let cd = tp.mul(cb, d);
                let base = phi_a_b[p].expect("corrected patches carry a flux");
                let mut v = tp.add(base, cd);
                if let Some(nb) = n_b[p] {
                    v = tp.sub(v, nb);
                }
                v
            } else {
                match phi_a_b[p] {
                    Some(v) => v,
                    None => tp.leaf(Buffer::zeros(graph.patches[p].len(), 1)),
                }
            };
            patch_new.push(v);
        }

        // Velocity correction u = H/a_P − (Σ p_f Sf)/a_P with the new p.
        let mut pvals = Vec::with_capacity(np);
        for (p, class) in classes.iter().enumerate() {
            let v = match &class.pres {
                PresBc::Fixed(pb) => {
                    tp.leaf(Buffer::from_vec(vec![*pb; graph.patches[p].len()], 1))
                }
                PresBc::Windkessel { .. } => {
                    let po = po_cur[p].expect("windkessel pressure prepared");
                    tp.broadcast(po, graph.patches[p].len())
                }
                _ => tp.gather(graph, GraphMap::Patch(p), p_new),
            };
            pvals.push(v);
        }
        let pf_new = interpolate_linear(tp, ctx, p_new);
        let gp_new = green_gauss_from_face_values(tp, ctx, pf_new, &pvals);
        let vgp = tp.mul_const_arr(gp_new, Arc::new(graph.volume.clone()));
        let scaled = tp.mul_col_broadcast(vgp, recip_ap);
        u_cur = tp.sub(hby, scaled);

        p_cur = p_new;
        phi_cur = phi_new;
        patch_phi_cur = patch_new;
    }

    // Commit windkessel states from the final fluxes.
    let mut wk_new: Vec<Option<Var>> = vec![None; np];
    for (p, class) in classes.iter().enumerate() {
        if let PresBc::Windkessel { scheme, .. } = &class.pres {
            let [_, c, rd] = sys.wk_params[p].expect("windkessel params prepared");
            let pc = state.windkessel_pc[p].expect("windkessel state present");
            let q = tp.sum_all(patch_phi_cur[p]);
            wk_new[p] = Some(tp.windkessel_step(*scheme, dt, pc, q, rd, c));
        }
    }

    // Continuity of the corrected fluxes, checked on values.
    let abs_tol = pressure_reports
        .last()
        .map(|r| r.abs_tol)
        .unwrap_or(0.0);
    let limit = cfg.div_limit_factor * abs_tol;
    let max_div = {
        let mut div = vec![0.0; graph.n_cells];
        let phi_v = tp.val(phi_cur);
        for e in 0..graph.n_edges() {
            let m = phi_v.data[e];
            div[graph.owner[e] as usize] += m;
            div[graph.neighbour[e] as usize] -= m;
        }
        for (p, patch) in graph.patches.iter().enumerate() {
            let fv = tp.val(patch_phi_cur[p]);
            for (f, &cell) in patch.cells.iter().enumerate() {
                div[cell as usize] += fv.data[f];
            }
        }
        div.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    };
    let global: f64 = (0..np)
        .map(|p| tp.val(patch_phi_cur[p]).data.iter().sum::<f64>())
        .sum();
    if max_div > limit || global.abs() > limit {
        return Err(Error::ContinuityViolation {
            step,
            max_div: max_div.max(global.abs()),
            limit,
        });
    }

    let next = PisoStateVars {
        u: u_cur,
        p: p_cur,
        phi: phi_cur,
        patch_phi: patch_phi_cur,
        windkessel_pc: wk_new,
    };
    let report = PisoReport {
        momentum: momentum_reports,
        pressure: pressure_reports,
        max_div,
        div_limit: limit,
    };
    Ok((next, report))
}

/// Advance one PISO step on plain field data. Forward-only: runs the taped
/// implementation on a non-recording tape.
pub fn piso_step(
    ctx: &FvCtx,
    cfg: &PisoConfig,
    bcs: &BcSet,
    state: &FieldState,
    dt: f64,
    step: usize,
) -> Result<(FieldState, PisoReport)> {
    let mut tp = Tape::new_nograd();
    let vars = PisoStateVars::leaf(&mut tp, state);
    let overrides = PisoOverrides::new();
    let (next, report) =
        piso_step_taped(&mut tp, ctx, cfg, bcs, &overrides, &vars, state.t, dt, step)?;
    let u = tp.val(next.u).to_vec3();
    let p = tp.val(next.p).data.clone();
    let phi = tp.val(next.phi).data.clone();
    let patch_phi: Vec<Vec<f64>> =
        next.patch_phi.iter().map(|&v| tp.val(v).data.clone()).collect();
    if let Some(bad) = u
        .iter()
        .flat_map(|v| [v.x, v.y, v.z])
        .chain(p.iter().copied())
        .find(|x| !x.is_finite())
    {
        return Err(Error::NumericalBlowup {
            step,
            msg: format!("non-finite flow value {bad}"),
        });
    }
    let windkessel = state
        .windkessel
        .iter()
        .enumerate()
        .map(|(pi, w)| match (w, next.windkessel_pc[pi]) {
            (Some(old), Some(pcv)) => {
                let pc = tp.val(pcv).as_scalar();
                let q: f64 = patch_phi[pi].iter().sum();
                let rp = windkessel_rp(bcs, &ctx.graph.patches[pi].name);
                Some(WindkesselState { pc, po: pc + rp * q, scheme: old.scheme })
            }
            _ => None,
        })
        .collect();
    Ok((
        FieldState { u, p, phi, patch_phi, t: state.t + dt, windkessel },
        report,
    ))
}

fn windkessel_rp(bcs: &BcSet, patch: &str) -> f64 {
    match bcs.get("p", patch) {
        Ok(spec) => match &spec.kind {
            BcKind::WindkesselRcr { params, .. } => params.rp,
            _ => 0.0,
        },
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::{BoundarySpec, WindkesselParams};
    use crate::fixtures::{quad_graph, slab_graph};
    use crate::solvers::uniform_mass_flux;
    use crate::tape::windkessel_forward;

    fn spec(field: &str, patch: &str, kind: BcKind) -> BoundarySpec {
        BoundarySpec { patch: patch.into(), field: field.into(), kind }
    }

    fn vel(patch: &str, v: Vec3) -> BoundarySpec {
        spec("U", patch, BcKind::FixedValue(BcValue::Vector(v)))
    }

    fn zg(field: &str, patch: &str) -> BoundarySpec {
        spec(field, patch, BcKind::ZeroGradient)
    }

    fn fixed_p(patch: &str, v: f64) -> BoundarySpec {
        spec("p", patch, BcKind::FixedValue(BcValue::Scalar(v)))
    }

    fn tight(mut cfg: PisoConfig) -> PisoConfig {
        cfg.momentum_solve.tol = 1e-12;
        cfg.momentum_solve.max_iter = 2000;
        cfg.pressure_solve.tol = 1e-12;
        cfg.pressure_solve.max_iter = 2000;
        cfg
    }

    // One unit cube, no-slip everywhere, dt = 0.5, nu = 0.01:
    // a_P = V/dt + sum(nu * |Sf|/|d_bf|) = 1/0.5 + 6 * 0.01 * (1/0.5) = 2.12.
    #[test]
    fn single_cell_momentum_diagonal_matches_hand_value() {
        let ctx = FvCtx::new(slab_graph(1));
        let bcs = BcSet::new(vec![
            vel("left", Vec3::ZERO),
            vel("right", Vec3::ZERO),
            vel("sides", Vec3::ZERO),
            zg("p", "left"),
            zg("p", "right"),
            zg("p", "sides"),
        ]);
        let cfg = PisoConfig::new(0.01);
        let state = FieldState::at_rest(&ctx, &bcs).unwrap();
        let mut tp = Tape::new_nograd();
        let vars = PisoStateVars::leaf(&mut tp, &state);
        let ov = PisoOverrides::new();
        let sys =
            assemble_momentum(&mut tp, &ctx, &cfg, &bcs, &ov, &vars, 0.5, 0.5).unwrap();
        let a = tp.val(sys.a_p).data[0];
        assert!((a - 2.12).abs() < 1e-12, "a_P = {a}, expected 2.12");
    }

    // No time derivative (dt = inf), no viscosity, no flux: the diagonal
    // vanishes and assembly must refuse rather than hand a singular matrix
    // to the solver.
    #[test]
    fn vanishing_diagonal_is_rejected() {
        let ctx = FvCtx::new(slab_graph(1));
        let bcs = BcSet::new(vec![
            zg("U", "left"),
            zg("U", "right"),
            zg("U", "sides"),
            zg("p", "left"),
            zg("p", "right"),
            zg("p", "sides"),
        ]);
        let cfg = PisoConfig::new(0.0);
        let state = FieldState::at_rest(&ctx, &bcs).unwrap();
        let mut tp = Tape::new_nograd();
        let vars = PisoStateVars::leaf(&mut tp, &state);
        let ov = PisoOverrides::new();
        let err = assemble_momentum(&mut tp, &ctx, &cfg, &bcs, &ov, &vars, f64::INFINITY, 1.0)
            .err()
            .expect("singular diagonal must be rejected");
        match err {
            Error::InvalidCoefficients { cell, value } => {
                assert_eq!(cell, 0);
                assert!(value.abs() < 1e-300);
            }
            other => panic!("expected InvalidCoefficients, got {other:?}"),
        }
    }

    // Plug flow down a channel that already satisfies the equations exactly:
    // one step must return the same velocity and a zero pressure field.
    #[test]
    fn uniform_channel_flow_is_a_fixed_point() {
        let ctx = FvCtx::new(slab_graph(8));
        let u0 = Vec3::new(1.0, 0.0, 0.0);
        let bcs = BcSet::new(vec![
            vel("left", u0),
            zg("U", "right"),
            zg("U", "sides"),
            zg("p", "left"),
            fixed_p("right", 0.0),
            zg("p", "sides"),
        ]);
        let cfg = tight(PisoConfig::new(0.01));
        let (mdot, patch_mdot) = uniform_mass_flux(&ctx, u0);
        let state = FieldState {
            u: vec![u0; ctx.n_cells()],
            p: vec![0.0; ctx.n_cells()],
            phi: (*mdot).clone(),
            patch_phi: patch_mdot.iter().map(|a| (**a).clone()).collect(),
            t: 0.0,
            windkessel: vec![None; ctx.graph.patches.len()],
        };
        let (next, report) = piso_step(&ctx, &cfg, &bcs, &state, 0.1, 0).unwrap();
        let du = next
            .u
            .iter()
            .map(|v| (*v - u0).norm())
            .fold(0.0f64, f64::max);
        let pmax = next.p.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(du <= 1e-9, "velocity drift {du}");
        assert!(pmax <= 1e-9, "pressure deviation {pmax}");
        assert!(report.max_div <= report.div_limit);
    }

    fn cavity_bcs(lid: Vec3) -> BcSet {
        BcSet::new(vec![
            vel("lid", lid),
            vel("walls", Vec3::ZERO),
            spec("U", "front", BcKind::Empty),
            spec("U", "back", BcKind::Empty),
            zg("p", "lid"),
            zg("p", "walls"),
            spec("p", "front", BcKind::Empty),
            spec("p", "back", BcKind::Empty),
        ])
    }

    fn run_cavity(n: usize, lid: Vec3, dt: f64, steps: usize) -> (FieldState, f64) {
        let ctx = FvCtx::new(quad_graph(n));
        let bcs = cavity_bcs(lid);
        let cfg = PisoConfig::new(0.01);
        let mut state = FieldState::at_rest(&ctx, &bcs).unwrap();
        let mut worst_margin = f64::INFINITY;
        for step in 0..steps {
            let (next, report) = piso_step(&ctx, &cfg, &bcs, &state, dt, step).unwrap();
            assert!(
                report.max_div <= report.div_limit,
                "step {step}: divergence {} over limit {}",
                report.max_div,
                report.div_limit
            );
            worst_margin = worst_margin.min(report.div_limit - report.max_div);
            state = next;
        }
        (state, worst_margin)
    }

    // Every corrected step of a lid-driven cavity keeps each cell's net mass
    // flux inside the solver-tolerance budget (including the pinned cell),
    // stirs up motion, and reruns bit-identically.
    #[test]
    fn cavity_steps_conserve_mass_and_rerun_identically() {
        let (a, _) = run_cavity(8, Vec3::new(1.0, 0.0, 0.0), 0.01, 20);
        let speed = a.u.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        assert!(speed > 1e-3, "lid failed to stir the cavity, max |u| = {speed}");

        let (b, _) = run_cavity(8, Vec3::new(1.0, 0.0, 0.0), 0.01, 20);
        assert!(a
            .u
            .iter()
            .zip(&b.u)
            .all(|(x, y)| x.x.to_bits() == y.x.to_bits()
                && x.y.to_bits() == y.y.to_bits()
                && x.z.to_bits() == y.z.to_bits()));
        assert!(a.p.iter().zip(&b.p).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.phi.iter().zip(&b.phi).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn cavity_objective(lid_x: f64, dt: f64, steps: usize) -> f64 {
        let ctx = FvCtx::new(quad_graph(4));
        let bcs = cavity_bcs(Vec3::new(lid_x, 0.0, 0.0));
        let cfg = tight(PisoConfig::new(0.01));
        let mut state = FieldState::at_rest(&ctx, &bcs).unwrap();
        for step in 0..steps {
            let (next, _) = piso_step(&ctx, &cfg, &bcs, &state, dt, step).unwrap();
            state = next;
        }
        state.u.iter().map(|v| v.dot(*v)).sum()
    }

    // Reverse-mode sensitivity of sum(|u|^2) after two steps with respect to
    // the lid speed, checked against central finite differences of the plain
    // solver.
    #[test]
    fn lid_speed_gradient_matches_finite_differences() {
        let dt = 0.02;
        let steps = 2;
        let ctx = FvCtx::new(quad_graph(4));
        let bcs = cavity_bcs(Vec3::new(2.0, 0.0, 0.0));
        let cfg = tight(PisoConfig::new(0.01));
        let state = FieldState::at_rest(&ctx, &bcs).unwrap();

        let mut tp = Tape::new();
        let lid = tp.leaf(Buffer::from_vec(vec![2.0, 0.0, 0.0], 3));
        let mut ov = PisoOverrides::new();
        ov.set("U", "lid", lid);
        let mut vars = PisoStateVars::leaf(&mut tp, &state);
        for step in 0..steps {
            let (next, _) = piso_step_taped(
                &mut tp,
                &ctx,
                &cfg,
                &bcs,
                &ov,
                &vars,
                step as f64 * dt,
                dt,
                step,
            )
            .unwrap();
            vars = next;
        }
        let j = tp.dot(vars.u, vars.u);
        tp.backward(j).unwrap();
        let g = tp.grad(lid).expect("lid is a leaf with gradient").data[0];

        let h = 1e-5;
        let fd = (cavity_objective(2.0 + h, dt, steps)
            - cavity_objective(2.0 - h, dt, steps))
            / (2.0 * h);
        let rel = (g - fd).abs() / fd.abs().max(1e-30);
        assert!(
            rel < 1e-4,
            "adjoint {g} vs finite difference {fd}, rel err {rel}"
        );
    }

    // Prescribed inflow of 1 into an RCR outlet: the outlet flow equals the
    // inflow once the step's continuity is enforced, and the committed
    // capacitor pressure follows the lumped update driven by that flow.
    #[test]
    fn windkessel_outlet_charges_like_the_lumped_model() {
        let ctx = FvCtx::new(slab_graph(4));
        let params = WindkesselParams { rp: 1.0, c: 0.5, rd: 2.0 };
        let bcs = BcSet::new(vec![
            vel("left", Vec3::new(1.0, 0.0, 0.0)),
            zg("U", "right"),
            zg("U", "sides"),
            zg("p", "left"),
            spec(
                "p",
                "right",
                BcKind::WindkesselRcr { params, scheme: WindkesselScheme::Exact },
            ),
            zg("p", "sides"),
        ]);
        let cfg = tight(PisoConfig::new(0.01));
        let right = ctx
            .graph
            .patches
            .iter()
            .position(|p| p.name == "right")
            .unwrap();
        let dt = 0.1;
        let mut state = FieldState::at_rest(&ctx, &bcs).unwrap();
        let mut pc_hand = 0.0;
        for step in 0..3 {
            let (next, _) = piso_step(&ctx, &cfg, &bcs, &state, dt, step).unwrap();
            let q: f64 = next.patch_phi[right].iter().sum();
            assert!((q - 1.0).abs() < 1e-6, "step {step}: outlet flow {q}");
            pc_hand = windkessel_forward(WindkesselScheme::Exact, dt, pc_hand, q, 2.0, 0.5);
            let wk = next.windkessel[right].as_ref().unwrap();
            assert!(
                (wk.pc - pc_hand).abs() < 1e-12,
                "step {step}: pc {} vs hand {pc_hand}",
                wk.pc
            );
            assert!((wk.po - (wk.pc + 1.0 * q)).abs() < 1e-12);
            state = next;
        }
        assert!(state.windkessel[right].as_ref().unwrap().pc > 0.1);
    }
}
