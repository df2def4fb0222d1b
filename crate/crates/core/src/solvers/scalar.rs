//! Transient scalar advection–diffusion with prescribed face mass fluxes.
//! Upwind convection and two-point diffusion are implicit; higher-order
//! convection and the non-orthogonal diffusion remainder enter as lagged
//! explicit deferred corrections, so every time scheme shares one matrix.

use std::sync::Arc;

use crate::bc::{boundary_face_values, BcContext, BcKind, BcSet, BcValue};
use crate::error::{Error, Result};
use crate::fvops::{
    convective_face_value, diffusion_coeffs, diffusive_flux, face_mass_flux,
    green_gauss_gradient, patch_diffusion_coeffs, surface_sum, ConvectionScheme,
    DiffusionCorrection, FvCtx,
};
use crate::linalg::{
    assemble, csr_pattern, ilu0, solve, CsrMatrix, Ilu0, KrylovMethod, SolveOpts, SolveReport,
};
use crate::math::Vec3;
use crate::mesh::PatchKind;
use crate::solvers::TimeScheme;
use crate::tape::{Buffer, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct TransportConfig {
    pub scheme: ConvectionScheme,
    pub time: TimeScheme,
    /// Diffusivity Γ; zero disables the diffusion terms entirely.
    pub gamma: f64,
    pub correction: DiffusionCorrection,
    pub solve: SolveOpts,
}

impl Default for TransportConfig {
    fn default() -> TransportConfig {
        TransportConfig {
            scheme: ConvectionScheme::Upwind,
            time: TimeScheme::BackwardEuler,
            gamma: 0.0,
            correction: DiffusionCorrection::OverRelaxed,
            solve: SolveOpts {
                method: KrylovMethod::BiCgStab,
                tol: 1e-12,
                max_iter: 2000,
            },
        }
    }
}

/// How one patch enters the transport stencil.
enum Role {
    /// Face value known from the boundary condition (possibly time-varying):
    /// convection is a source, diffusion couples implicitly to the cell.
    Dirichlet,
    /// Face value extrapolated from the cell (zero or fixed gradient):
    /// convection couples implicitly, diffusion is zero or a fixed source.
    Extrapolated,
    Empty,
}

struct PatchData {
    role: Role,
    cells: Arc<Vec<u32>>,
    /// Dirichlet rhs weight γα_b − ṁ_b per face, applied to the face value.
    s0_factor: Vec<f64>,
    /// Explicit diffusion-correction remainder per Dirichlet face.
    k: Arc<Vec<Vec3>>,
    /// g·|d| per face: the extrapolation offset of a fixed-gradient patch.
    offset: Option<Arc<Vec<f64>>>,
}

/// One scalar transport equation on a fixed mesh with a fixed flux field and
/// step size: the implicit operator is factored once and reused every step.
pub struct ScalarProblem<'a> {
    ctx: &'a FvCtx,
    cfg: TransportConfig,
    bcs: &'a BcSet,
    field: String,
    mdot: Arc<Vec<f64>>,
    dt: f64,
    patches: Vec<PatchData>,
    /// Steady operator M: (Mφ − s0)_i = Σ_f (outward flux), split over the
    /// CSR edge layout.
    diag_m: Vec<f64>,
    upper_m: Vec<f64>,
    lower_m: Vec<f64>,
    /// Time-independent part of s0 (fixed-gradient boundary sources).
    s0_const: Vec<f64>,
    /// V/dt per cell.
    vdt: Vec<f64>,
    /// (V/dt)I + θM, factored; absent for the fully explicit scheme.
    system: Option<(CsrMatrix, Ilu0)>,
    needs_tape: bool,
    needs_grad: bool,
}

impl<'a> ScalarProblem<'a> {
    pub fn new(
        ctx: &'a FvCtx,
        cfg: TransportConfig,
        bcs: &'a BcSet,
        field: &str,
        mdot: Arc<Vec<f64>>,
        patch_mdot: &[Arc<Vec<f64>>],
        dt: f64,
    ) -> Result<ScalarProblem<'a>> {
        let graph = &ctx.graph;
        let n = graph.n_cells;
        let ne = graph.n_edges();
        assert_eq!(mdot.len(), ne);
        assert_eq!(patch_mdot.len(), graph.patches.len());
        assert!(dt > 0.0);

        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; ne];
        let mut lower = vec![0.0; ne];
        let mut s0_const = vec![0.0; n];

        // Internal upwind convection: flux out of the owner is ṁ φ_up.
        for e in 0..ne {
            let o = graph.owner[e] as usize;
            let nb = graph.neighbour[e] as usize;
            let m = mdot[e];
            diag[o] += m.max(0.0);
            upper[e] += m.min(0.0);
            diag[nb] -= m.min(0.0);
            lower[e] -= m.max(0.0);
        }
        // Internal two-point diffusion.
        if cfg.gamma > 0.0 {
            let (alpha, _) = diffusion_coeffs(graph, cfg.correction)?;
            for e in 0..ne {
                let c = cfg.gamma * alpha[e];
                diag[graph.owner[e] as usize] += c;
                diag[graph.neighbour[e] as usize] += c;
                upper[e] -= c;
                lower[e] -= c;
            }
        }

        let mut patches = Vec::with_capacity(graph.patches.len());
        for (p, patch) in graph.patches.iter().enumerate() {
            let spec = bcs.get(field, &patch.name)?;
            let mb = &patch_mdot[p];
            assert_eq!(mb.len(), patch.len());
            let cells = Arc::new(patch.cells.clone());
            let scalar_only = |v: &BcValue, what: &str| -> Result<f64> {
                match v {
                    BcValue::Scalar(s) => Ok(*s),
                    BcValue::Vector(_) => Err(Error::ShapeError {
                        context: format!("{what} on patch '{}'", patch.name),
                        expected: "scalar value".into(),
                        got: "vector".into(),
                    }),
                }
            };
            let data = match &spec.kind {
                BcKind::Empty => PatchData {
                    role: Role::Empty,
                    cells,
                    s0_factor: Vec::new(),
                    k: Arc::new(Vec::new()),
                    offset: None,
                },
                BcKind::ZeroGradient => {
                    for (f, &cell) in patch.cells.iter().enumerate() {
                        diag[cell as usize] += mb[f];
                    }
                    PatchData {
                        role: Role::Extrapolated,
                        cells,
                        s0_factor: Vec::new(),
                        k: Arc::new(Vec::new()),
                        offset: None,
                    }
                }
                BcKind::FixedGradient(g) => {
                    let g = scalar_only(g, "fixed gradient")?;
                    let mut offset = Vec::with_capacity(patch.len());
                    for (f, &cell) in patch.cells.iter().enumerate() {
                        let c = cell as usize;
                        let gd = g * patch.d[f].norm();
                        diag[c] += mb[f];
                        s0_const[c] += -mb[f] * gd + cfg.gamma * g * patch.area[f];
                        offset.push(gd);
                    }
                    PatchData {
                        role: Role::Extrapolated,
                        cells,
                        s0_factor: Vec::new(),
                        k: Arc::new(Vec::new()),
                        offset: Some(Arc::new(offset)),
                    }
                }
                BcKind::FixedValue(v) | BcKind::TimeVaryingInflow { shape: v, .. } => {
                    scalar_only(v, spec.kind.name())?;
                    let (coeff, k) = if cfg.gamma > 0.0 {
                        patch_diffusion_coeffs(patch, cfg.correction)?
                    } else {
                        (vec![0.0; patch.len()], vec![Vec3::ZERO; patch.len()])
                    };
                    let mut s0_factor = Vec::with_capacity(patch.len());
                    for (f, &cell) in patch.cells.iter().enumerate() {
                        let gc = cfg.gamma * coeff[f];
                        diag[cell as usize] += gc;
                        s0_factor.push(gc - mb[f]);
                    }
                    PatchData {
                        role: Role::Dirichlet,
                        cells,
                        s0_factor,
                        k: Arc::new(k),
                        offset: None,
                    }
                }
                other => {
                    return Err(Error::UnsupportedScheme {
                        keyword: other.name().into(),
                        context: format!(
                            "scalar transport boundary on patch '{}'",
                            patch.name
                        ),
                        supported:
                            "fixedValue, timeVaryingInflow, fixedGradient, zeroGradient, empty"
                                .into(),
                    })
                }
            };
            patches.push(data);
        }

        let vdt: Vec<f64> = graph.volume.iter().map(|&v| v / dt).collect();
        let theta = cfg.time.theta();
        let system = if theta > 0.0 {
            let a_diag: Vec<f64> =
                (0..n).map(|i| vdt[i] + theta * diag[i]).collect();
            let a_upper: Vec<f64> = upper.iter().map(|&u| theta * u).collect();
            let a_lower: Vec<f64> = lower.iter().map(|&l| theta * l).collect();
            let pat = csr_pattern(graph);
            let a = assemble(&pat, &a_diag, &a_upper, &a_lower)?;
            let ilu = ilu0(&a)?;
            Some((a, ilu))
        } else {
            None
        };

        let needs_grad = matches!(cfg.scheme, ConvectionScheme::Sou | ConvectionScheme::Quick)
            || (cfg.gamma > 0.0 && cfg.correction != DiffusionCorrection::None);
        let needs_tape = cfg.scheme != ConvectionScheme::Upwind
            || (cfg.gamma > 0.0 && cfg.correction != DiffusionCorrection::None);

        Ok(ScalarProblem {
            ctx,
            cfg,
            bcs,
            field: field.into(),
            mdot,
            dt,
            patches,
            diag_m: diag,
            upper_m: upper,
            lower_m: lower,
            s0_const,
            vdt,
            system,
            needs_tape,
            needs_grad,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn apply_m(&self, phi: &[f64]) -> Vec<f64> {
        let graph = &self.ctx.graph;
        let mut y: Vec<f64> = (0..graph.n_cells)
            .map(|i| self.diag_m[i] * phi[i])
            .collect();
        for e in 0..graph.n_edges() {
            let o = graph.owner[e] as usize;
            let nb = graph.neighbour[e] as usize;
            y[o] += self.upper_m[e] * phi[nb];
            y[nb] += self.lower_m[e] * phi[o];
        }
        y
    }

    /// Boundary source at time `t`: the constant fixed-gradient part plus the
    /// Dirichlet face values weighted by γα_b − ṁ_b.
    fn eval_s0(&self, t: f64) -> Result<Vec<f64>> {
        let mut s0 = self.s0_const.clone();
        for (p, patch) in self.ctx.graph.patches.iter().enumerate() {
            let pd = &self.patches[p];
            if !matches!(pd.role, Role::Dirichlet) {
                continue;
            }
            let spec = self.bcs.get(&self.field, &patch.name)?;
            let zeros = vec![0.0; patch.len()];
            let ctx = BcContext { t, ..Default::default() };
            let vals = boundary_face_values(spec, patch, &zeros, 1, ctx)?;
            for (f, &cell) in patch.cells.iter().enumerate() {
                s0[cell as usize] += pd.s0_factor[f] * vals[f];
            }
        }
        Ok(s0)
    }

    /// Deferred corrections at the lagged state: Σ_f of the higher-order
    /// convection increment ṁ(φ_HO − φ_U) minus the non-orthogonal diffusion
    /// remainder γ(∇φ)_f·k_f, as outward flux per cell.
    fn explicit_correction(&self, phi: &[f64], t: f64) -> Result<Vec<f64>> {
        let graph = &self.ctx.graph;
        let mut tp = Tape::new_nograd();
        let phi_v = tp.leaf(Buffer::from_vec(phi.to_vec(), 1));
        let mdot_v = tp.leaf(Buffer::from_vec(self.mdot.as_ref().clone(), 1));

        let grad = if self.needs_grad {
            let mut pvals = Vec::with_capacity(graph.patches.len());
            for (p, patch) in graph.patches.iter().enumerate() {
                let pd = &self.patches[p];
                let v = match pd.role {
                    Role::Dirichlet => {
                        let spec = self.bcs.get(&self.field, &patch.name)?;
                        let zeros = vec![0.0; patch.len()];
                        let ctx = BcContext { t, ..Default::default() };
                        let vals = boundary_face_values(spec, patch, &zeros, 1, ctx)?;
                        tp.leaf(Buffer::from_vec(vals, 1))
                    }
                    Role::Extrapolated | Role::Empty => {
                        let g = tp.gather_idx(Arc::clone(&pd.cells), phi_v);
                        match &pd.offset {
                            Some(o) => tp.add_const_arr(g, Arc::clone(o)),
                            None => g,
                        }
                    }
                };
                pvals.push(v);
            }
            Some(green_gauss_gradient(&mut tp, self.ctx, phi_v, &pvals))
        } else {
            None
        };

        let (_, conv_corr) =
            convective_face_value(&mut tp, self.ctx, self.cfg.scheme, phi_v, grad, mdot_v);
        let mut internal = conv_corr;
        let mut patch_corr: Vec<Option<Var>> = vec![None; graph.patches.len()];
        if self.cfg.gamma > 0.0 && self.cfg.correction != DiffusionCorrection::None {
            let (_, expl) =
                diffusive_flux(&mut tp, self.ctx, grad, self.cfg.gamma, self.cfg.correction)?;
            internal = tp.sub(internal, expl.expect("correcting mode yields explicit flux"));
            let g = grad.expect("correcting mode computed the gradient");
            for (p, pd) in self.patches.iter().enumerate() {
                if matches!(pd.role, Role::Dirichlet) {
                    let gc = tp.gather_idx(Arc::clone(&pd.cells), g);
                    let kdot = tp.dot_vec_const(gc, Arc::clone(&pd.k));
                    patch_corr[p] = Some(tp.scale_const(kdot, -self.cfg.gamma));
                }
            }
        }
        let s = surface_sum(&mut tp, self.ctx, internal, &patch_corr);
        Ok(tp.val(s).data.clone())
    }

    /// Advance one step from `phi` at time `t`. `step` only labels blow-up
    /// reports. Returns the new field and the linear solve report (absent for
    /// the explicit scheme).
    pub fn step(
        &self,
        phi: &[f64],
        t: f64,
        step: usize,
    ) -> Result<(Vec<f64>, Option<SolveReport>)> {
        let n = self.ctx.n_cells();
        assert_eq!(phi.len(), n);
        let theta = self.cfg.time.theta();

        let corr = if self.needs_tape {
            self.explicit_correction(phi, t)?
        } else {
            vec![0.0; n]
        };
        let s0_new = if theta > 0.0 { self.eval_s0(t + self.dt)? } else { Vec::new() };
        let s0_old = if theta < 1.0 { self.eval_s0(t)? } else { Vec::new() };
        let m_phi = if theta < 1.0 { self.apply_m(phi) } else { Vec::new() };

        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let mut r = self.vdt[i] * phi[i] - corr[i];
                if theta > 0.0 {
                    r += theta * s0_new[i];
                }
                if theta < 1.0 {
                    r += (1.0 - theta) * (s0_old[i] - m_phi[i]);
                }
                r
            })
            .collect();

        let (next, report) = match &self.system {
            None => ((0..n).map(|i| rhs[i] / self.vdt[i]).collect::<Vec<f64>>(), None),
            Some((a, ilu)) => {
                let (x, rep) = solve(a, ilu, &rhs, Some(phi), self.cfg.solve)?;
                (x, Some(rep))
            }
        };
        if let Some(bad) = next.iter().find(|x| !x.is_finite()) {
            return Err(Error::NumericalBlowup {
                step,
                msg: format!("non-finite scalar value {bad} in field '{}'", self.field),
            });
        }
        Ok((next, report))
    }
}

/// March from `phi` until ‖Δφ‖∞/dt drops to `rate_tol`, starting at t = 0.
/// Returns the steady field and the number of steps taken; exceeding
/// `max_steps` is a convergence failure carrying the last iterate.
pub fn march_scalar_to_steady(
    prob: &ScalarProblem,
    mut phi: Vec<f64>,
    rate_tol: f64,
    max_steps: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut t = 0.0;
    let mut rate = f64::INFINITY;
    for k in 0..max_steps {
        let (next, _) = prob.step(&phi, t, k)?;
        rate = phi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / prob.dt;
        phi = next;
        t += prob.dt;
        if rate <= rate_tol {
            return Ok((phi, k + 1));
        }
    }
    Err(Error::NotConverged {
        method: "pseudo-time march".into(),
        residual: rate,
        iterations: max_steps,
        best: phi,
    })
}

/// Face mass fluxes of a uniform prescribed velocity: every internal edge and
/// non-empty patch sees the same u; empty patches carry no flux.
pub fn uniform_mass_flux(ctx: &FvCtx, u: Vec3) -> (Arc<Vec<f64>>, Vec<Arc<Vec<f64>>>) {
    let mut tp = Tape::new_nograd();
    let uc = tp.leaf(Buffer::from_vec3(&vec![u; ctx.n_cells()]));
    let patch_u: Vec<Option<Var>> = ctx
        .graph
        .patches
        .iter()
        .map(|p| {
            if matches!(p.kind, PatchKind::Empty) {
                None
            } else {
                Some(tp.leaf(Buffer::from_vec3(&vec![u; p.len()])))
            }
        })
        .collect();
    let (m, pm) = face_mass_flux(&mut tp, ctx, uc, &patch_u);
    let mdot = Arc::new(tp.val(m).data.clone());
    let patch_mdot = pm
        .iter()
        .enumerate()
        .map(|(p, v)| {
            Arc::new(match v {
                Some(v) => tp.val(*v).data.clone(),
                None => vec![0.0; ctx.graph.patches[p].len()],
            })
        })
        .collect();
    (mdot, patch_mdot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::{BcValue, BoundarySpec, TimeTable};
    use crate::fixtures::{slab_graph, tri_graph, two_cube_graph};

    fn spec(field: &str, patch: &str, kind: BcKind) -> BoundarySpec {
        BoundarySpec { patch: patch.into(), field: field.into(), kind }
    }

    fn fixed(field: &str, patch: &str, v: f64) -> BoundarySpec {
        spec(field, patch, BcKind::FixedValue(BcValue::Scalar(v)))
    }

    fn zero_flux_patches(ctx: &FvCtx) -> Vec<Arc<Vec<f64>>> {
        ctx.graph
            .patches
            .iter()
            .map(|p| Arc::new(vec![0.0; p.len()]))
            .collect()
    }

    #[test]
    fn no_flux_no_diffusion_leaves_field_unchanged() {
        let ctx = FvCtx::new(two_cube_graph());
        let bcs = BcSet::new(vec![spec("phi", "walls", BcKind::ZeroGradient)]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let cfg = TransportConfig::default();
        let prob = ScalarProblem::new(&ctx, cfg, &bcs, "phi", mdot, &pm, 0.5).unwrap();
        let phi = vec![3.0, -1.5];
        let (next, _) = prob.step(&phi, 0.0, 0).unwrap();
        for (a, b) in phi.iter().zip(&next) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn explicit_diffusion_step_matches_hand_update() {
        // Two unit cubes, Γ = 1, α = 1 on the shared face: one forward-Euler
        // step moves dt·(φ_0 − φ_1) between the cells.
        let ctx = FvCtx::new(two_cube_graph());
        let bcs = BcSet::new(vec![spec("phi", "walls", BcKind::ZeroGradient)]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let cfg = TransportConfig {
            gamma: 1.0,
            time: TimeScheme::ForwardEuler,
            ..TransportConfig::default()
        };
        let prob = ScalarProblem::new(&ctx, cfg, &bcs, "phi", mdot, &pm, 0.1).unwrap();
        let (next, report) = prob.step(&[1.0, 0.0], 0.0, 0).unwrap();
        assert!(report.is_none());
        assert!((next[0] - 0.9).abs() < 1e-14);
        assert!((next[1] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn explicit_overstep_blows_up_with_step_index() {
        let ctx = FvCtx::new(two_cube_graph());
        let bcs = BcSet::new(vec![spec("phi", "walls", BcKind::ZeroGradient)]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let cfg = TransportConfig {
            gamma: 1.0,
            time: TimeScheme::ForwardEuler,
            ..TransportConfig::default()
        };
        let prob = ScalarProblem::new(&ctx, cfg, &bcs, "phi", mdot, &pm, 1000.0).unwrap();
        let mut phi = vec![1.0, 0.0];
        let mut failed_at = None;
        for k in 0..200 {
            match prob.step(&phi, 0.0, k) {
                Ok((next, _)) => phi = next,
                Err(Error::NumericalBlowup { step, .. }) => {
                    failed_at = Some(step);
                    break;
                }
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
        let step = failed_at.expect("unstable explicit step must blow up");
        assert!(step > 0, "growth takes several steps to overflow");
    }

    #[test]
    fn implicit_step_with_time_varying_inlet_matches_hand_solve() {
        // Two-cell slab, Γ = 1: V = 1/2, α_int = 2, α_b = 4. Left value ramps
        // 0→2 over t ∈ [0, 1]; one backward-Euler step of dt = 1/2 from φ = 0
        // solves [[7, −2], [−2, 7]]φ = [4·1, 0] (the dt-scaled system ×dt).
        let ctx = FvCtx::new(slab_graph(2));
        let table = TimeTable::new(vec![0.0, 1.0], vec![0.0, 2.0], false).unwrap();
        let bcs = BcSet::new(vec![
            spec(
                "phi",
                "left",
                BcKind::TimeVaryingInflow { table, shape: BcValue::Scalar(1.0) },
            ),
            fixed("phi", "right", 0.0),
            spec("phi", "sides", BcKind::ZeroGradient),
        ]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let cfg = TransportConfig { gamma: 1.0, ..TransportConfig::default() };
        let prob = ScalarProblem::new(&ctx, cfg, &bcs, "phi", mdot, &pm, 0.5).unwrap();
        let (next, report) = prob.step(&[0.0, 0.0], 0.0, 0).unwrap();
        assert!(report.is_some());
        assert!((next[0] - 28.0 / 45.0).abs() < 1e-10, "{}", next[0]);
        assert!((next[1] - 8.0 / 45.0).abs() < 1e-10, "{}", next[1]);
    }

    fn step_problem_bcs() -> BcSet {
        BcSet::new(vec![
            fixed("phi", "inlet-lower", 1.0),
            fixed("phi", "inlet-upper", 0.0),
            spec("phi", "outlet", BcKind::ZeroGradient),
            spec("phi", "walls", BcKind::ZeroGradient),
            spec("phi", "front", BcKind::Empty),
            spec("phi", "back", BcKind::Empty),
        ])
    }

    fn steady_step_solution(ctx: &FvCtx, scheme: ConvectionScheme) -> Vec<f64> {
        let u = Vec3::new(2.0, 1.0, 0.0);
        let (mdot, pm) = uniform_mass_flux(ctx, u);
        let bcs = step_problem_bcs();
        let cfg = TransportConfig {
            scheme,
            gamma: 1e-3,
            ..TransportConfig::default()
        };
        let n = ctx.n_cells();
        let h = 1.0 / 16.0;
        let prob = ScalarProblem::new(ctx, cfg, &bcs, "phi", mdot, &pm, 0.25 * h).unwrap();
        let (phi, steps) =
            march_scalar_to_steady(&prob, vec![0.0; n], 1e-7, 4000).unwrap();
        assert!(steps < 4000);
        phi
    }

    /// Oblique step transport: bounded first-order solution, sharper
    /// second-order solution whose front overshoots it.
    #[test]
    fn oblique_step_is_bounded_upwind_and_sharper_with_sou() {
        let ctx = FvCtx::new(tri_graph(16));
        let up = steady_step_solution(&ctx, ConvectionScheme::Upwind);
        let (lo, hi) = up
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(lo >= -1e-9 && hi <= 1.0 + 1e-9, "upwind out of bounds: [{lo}, {hi}]");

        let sou = steady_step_solution(&ctx, ConvectionScheme::Sou);
        // Sample the vertical line x = 0.3 (cells within half a spacing).
        let h = 1.0 / 16.0;
        let peak = |phi: &[f64]| {
            ctx.graph
                .centroid
                .iter()
                .zip(phi)
                .filter(|(c, _)| (c.x - 0.3).abs() <= 0.5 * h)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (pu, ps) = (peak(&up), peak(&sou));
        println!("line peaks: upwind {pu:.6}, second-order {ps:.6}");
        assert!(ps > pu, "second-order peak {ps} must exceed upwind peak {pu}");
    }

    /// Temporal accuracy against a fine-step reference on the same mesh:
    /// backward Euler first order, Crank–Nicolson second order.
    #[test]
    fn time_scheme_orders_match_on_diffusion_decay() {
        let ctx = FvCtx::new(slab_graph(16));
        let bcs = BcSet::new(vec![
            fixed("phi", "left", 0.0),
            fixed("phi", "right", 0.0),
            spec("phi", "sides", BcKind::ZeroGradient),
        ]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let phi0: Vec<f64> = ctx
            .graph
            .centroid
            .iter()
            .map(|c| (std::f64::consts::PI * c.x).sin())
            .collect();
        let horizon = 0.5;
        let run = |time: TimeScheme, steps: usize| -> Vec<f64> {
            let cfg = TransportConfig { gamma: 0.05, time, ..TransportConfig::default() };
            let dt = horizon / steps as f64;
            let prob = ScalarProblem::new(&ctx, cfg, &bcs, "phi", Arc::clone(&mdot), &pm, dt)
                .unwrap();
            let mut phi = phi0.clone();
            for k in 0..steps {
                let (next, _) = prob.step(&phi, k as f64 * dt, k).unwrap();
                phi = next;
            }
            phi
        };
        let reference = run(TimeScheme::CrankNicolson, 4096);
        let err = |phi: &[f64]| {
            phi.iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        for (scheme, lo, hi) in [
            (TimeScheme::BackwardEuler, 0.9, 1.1),
            (TimeScheme::CrankNicolson, 1.8, 2.2),
        ] {
            let e1 = err(&run(scheme, 10));
            let e2 = err(&run(scheme, 20));
            let e4 = err(&run(scheme, 40));
            let p12 = (e1 / e2).log2();
            let p24 = (e2 / e4).log2();
            println!("{}: errors {e1:.3e} {e2:.3e} {e4:.3e}, orders {p12:.3} {p24:.3}", scheme.name());
            assert!(e1 > e2 && e2 > e4, "errors must shrink with dt");
            assert!(p24 >= lo && p24 <= hi, "{} order {p24}", scheme.name());
        }
    }

    #[test]
    fn uniform_field_with_matching_inlets_is_steady() {
        let ctx = FvCtx::new(tri_graph(8));
        let (mdot, pm) = uniform_mass_flux(&ctx, Vec3::new(2.0, 1.0, 0.0));
        let bcs = BcSet::new(vec![
            fixed("phi", "inlet-lower", 2.5),
            fixed("phi", "inlet-upper", 2.5),
            spec("phi", "outlet", BcKind::ZeroGradient),
            spec("phi", "walls", BcKind::ZeroGradient),
            spec("phi", "front", BcKind::Empty),
            spec("phi", "back", BcKind::Empty),
        ]);
        for (scheme, time) in [
            (ConvectionScheme::Upwind, TimeScheme::ForwardEuler),
            (ConvectionScheme::Sou, TimeScheme::BackwardEuler),
            (ConvectionScheme::Quick, TimeScheme::CrankNicolson),
        ] {
            let cfg = TransportConfig {
                scheme,
                time,
                gamma: 1e-3,
                ..TransportConfig::default()
            };
            let prob = ScalarProblem::new(
                &ctx, cfg, &bcs, "phi", Arc::clone(&mdot), &pm, 0.01,
            )
            .unwrap();
            let phi = vec![2.5; ctx.n_cells()];
            let (next, _) = prob.step(&phi, 0.0, 0).unwrap();
            let worst = next.iter().map(|x| (x - 2.5).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-9, "{} drifted by {worst}", scheme.name());
        }
    }

    #[test]
    fn vector_valued_boundary_is_rejected() {
        let ctx = FvCtx::new(two_cube_graph());
        let bcs = BcSet::new(vec![spec(
            "phi",
            "walls",
            BcKind::FixedValue(BcValue::Vector(Vec3::new(1.0, 0.0, 0.0))),
        )]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let err = ScalarProblem::new(&ctx, TransportConfig::default(), &bcs, "phi", mdot, &pm, 0.1)
            .err()
            .expect("vector value on a scalar field must fail");
        assert!(matches!(err, Error::ShapeError { .. }), "{err:?}");
    }

    #[test]
    fn flow_rate_boundary_kind_is_rejected() {
        use crate::bc::WindkesselParams;
        use crate::tape::WindkesselScheme;
        let ctx = FvCtx::new(two_cube_graph());
        let bcs = BcSet::new(vec![spec(
            "phi",
            "walls",
            BcKind::WindkesselRcr {
                params: WindkesselParams { rp: 1.0, c: 1.0, rd: 1.0 },
                scheme: WindkesselScheme::Exact,
            },
        )]);
        let mdot = Arc::new(vec![0.0; ctx.n_edges()]);
        let pm = zero_flux_patches(&ctx);
        let err = ScalarProblem::new(&ctx, TransportConfig::default(), &bcs, "phi", mdot, &pm, 0.1)
            .err()
            .expect("flow-rate boundary kind must fail on a scalar field");
        assert!(matches!(err, Error::UnsupportedScheme { .. }), "{err:?}");
    }
}
