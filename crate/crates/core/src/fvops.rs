//! Differentiable finite-volume face operators.
//!
//! Every operator is expressed through tape primitives (gather, scatter-add,
//! elementwise maps), so a forward evaluation records exactly the nodes the
//! reverse sweep needs. Mesh geometry enters as constant payloads; only the
//! fields being differentiated are tape variables.
//!
//! Convection uses deferred correction: the implicit part is always the
//! first-order upwind face value, and each scheme contributes an explicit
//! correction ṁ(φ_HO − φ_U) toward its high-order value. Diffusion splits
//! each face vector into an implicit two-point component aligned with the
//! cell-to-cell direction and an explicit non-orthogonal remainder.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{GraphPatch, MeshGraph};
use crate::math::Vec3;
use crate::tape::{Buffer, GraphMap, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvectionScheme {
    Upwind,
    Central,
    /// Second-order upwind: upwind cell value plus its gradient extrapolated
    /// to the face centroid.
    Sou,
    /// Gradient-based QUICK for unstructured meshes.
    Quick,
}

impl ConvectionScheme {
    pub fn name(self) -> &'static str {
        match self {
            ConvectionScheme::Upwind => "upwind",
            ConvectionScheme::Central => "central",
            ConvectionScheme::Sou => "SOU",
            ConvectionScheme::Quick => "QUICK",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionCorrection {
    /// Two-point coefficient |Sf|/|d| with no explicit correction.
    None,
    /// Δ_f = (Sf·d̂)d̂.
    Minimum,
    /// Δ_f = |Sf|d̂.
    Orthogonal,
    /// Δ_f = (|Sf|/(Ŝ·d̂))d̂.
    OverRelaxed,
}

impl DiffusionCorrection {
    pub fn name(self) -> &'static str {
        match self {
            DiffusionCorrection::None => "none",
            DiffusionCorrection::Minimum => "minimum",
            DiffusionCorrection::Orthogonal => "orthogonal",
            DiffusionCorrection::OverRelaxed => "over-relaxed",
        }
    }
}

/// Precomputed constant geometry shared by the operators, in the `Arc` form
/// tape ops take. Build once per mesh and reuse across time steps.
#[derive(Clone)]
pub struct FvCtx {
    pub graph: Arc<MeshGraph>,
    /// Owner interpolation weight per edge.
    pub w: Arc<Vec<f64>>,
    pub sf: Arc<Vec<Vec3>>,
    pub vol: Arc<Vec<f64>>,
    pub inv_vol: Arc<Vec<f64>>,
    /// Owner centroid → face centroid per edge.
    pub d_of: Arc<Vec<Vec3>>,
    /// Neighbour centroid → face centroid per edge.
    pub d_nf: Arc<Vec<Vec3>>,
    /// (d_of·d)/|d|² per edge, the QUICK curvature factor seen from the owner.
    pub quick_own: Arc<Vec<f64>>,
    /// (d_nf·(−d))/|d|² per edge, the same factor seen from the neighbour.
    pub quick_nb: Arc<Vec<f64>>,
    pub patch_sf: Vec<Arc<Vec<Vec3>>>,
}

impl FvCtx {
    pub fn new(graph: Arc<MeshGraph>) -> FvCtx {
        let ne = graph.n_edges();
        let mut d_of = Vec::with_capacity(ne);
        let mut d_nf = Vec::with_capacity(ne);
        let mut quick_own = Vec::with_capacity(ne);
        let mut quick_nb = Vec::with_capacity(ne);
        for e in 0..ne {
            let xo = graph.centroid[graph.owner[e] as usize];
            let xn = graph.centroid[graph.neighbour[e] as usize];
            let dof = graph.xf[e] - xo;
            let dnf = graph.xf[e] - xn;
            let d = graph.d[e];
            let dd = d.dot(d);
            d_of.push(dof);
            d_nf.push(dnf);
            quick_own.push(dof.dot(d) / dd);
            quick_nb.push(-dnf.dot(d) / dd);
        }
        let inv_vol = graph.volume.iter().map(|&v| 1.0 / v).collect();
        let patch_sf = graph.patches.iter().map(|p| Arc::new(p.sf.clone())).collect();
        FvCtx {
            w: Arc::new(graph.w.clone()),
            sf: Arc::new(graph.sf.clone()),
            vol: Arc::new(graph.volume.clone()),
            inv_vol: Arc::new(inv_vol),
            d_of: Arc::new(d_of),
            d_nf: Arc::new(d_nf),
            quick_own: Arc::new(quick_own),
            quick_nb: Arc::new(quick_nb),
            patch_sf,
            graph,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.graph.n_cells
    }

    pub fn n_edges(&self) -> usize {
        self.graph.n_edges()
    }
}

/// φ_f = w φ_owner + (1−w) φ_neighbour on internal edges.
pub fn interpolate_linear(t: &mut Tape, ctx: &FvCtx, phi: Var) -> Var {
    let po = t.gather(&ctx.graph, GraphMap::Owner, phi);
    let pn = t.gather(&ctx.graph, GraphMap::Neighbour, phi);
    t.weighted_sum(po, pn, Arc::clone(&ctx.w))
}

/// (∇φ)_i = (1/V_i) Σ_f φ_f Sf from already-evaluated face values.
/// `patch_vals` supplies a face-value variable for every patch (including
/// empty patches, whose paired faces cancel in the sum).
pub fn green_gauss_from_face_values(
    t: &mut Tape,
    ctx: &FvCtx,
    phi_f: Var,
    patch_vals: &[Var],
) -> Var {
    assert_eq!(patch_vals.len(), ctx.graph.patches.len());
    let flux = t.mul_vec_const(phi_f, Arc::clone(&ctx.sf));
    let pos = t.scatter_add(&ctx.graph, GraphMap::Owner, flux);
    let neg = t.scatter_add(&ctx.graph, GraphMap::Neighbour, flux);
    let mut acc = t.sub(pos, neg);
    for (p, &pv) in patch_vals.iter().enumerate() {
        let f = t.mul_vec_const(pv, Arc::clone(&ctx.patch_sf[p]));
        let s = t.scatter_add(&ctx.graph, GraphMap::Patch(p), f);
        acc = t.add(acc, s);
    }
    t.mul_const_arr(acc, Arc::clone(&ctx.inv_vol))
}

/// Green–Gauss cell gradient with linearly interpolated internal faces.
pub fn green_gauss_gradient(t: &mut Tape, ctx: &FvCtx, phi: Var, patch_vals: &[Var]) -> Var {
    let phi_f = interpolate_linear(t, ctx, phi);
    green_gauss_from_face_values(t, ctx, phi_f, patch_vals)
}

/// ṁ_f = U_f·Sf with linearly interpolated face velocity. Boundary fluxes
/// are produced for each patch with a supplied face velocity; `None` entries
/// yield `None` (no flux through that patch, e.g. walls handled implicitly).
pub fn face_mass_flux(
    t: &mut Tape,
    ctx: &FvCtx,
    u: Var,
    patch_u: &[Option<Var>],
) -> (Var, Vec<Option<Var>>) {
    assert_eq!(patch_u.len(), ctx.graph.patches.len());
    let uo = t.gather(&ctx.graph, GraphMap::Owner, u);
    let un = t.gather(&ctx.graph, GraphMap::Neighbour, u);
    let uf = t.weighted_sum(uo, un, Arc::clone(&ctx.w));
    let mdot = t.dot_vec_const(uf, Arc::clone(&ctx.sf));
    let patch_mdot = patch_u
        .iter()
        .enumerate()
        .map(|(p, ub)| ub.map(|ub| t.dot_vec_const(ub, Arc::clone(&ctx.patch_sf[p]))))
        .collect();
    (mdot, patch_mdot)
}

/// Upwind implicit face value plus the explicit deferred correction
/// ṁ(φ_HO − φ_U) for the chosen scheme. `grad_phi` (cells×3) is required
/// for SOU and QUICK. The ṁ = 0 tie takes the owner value.
pub fn convective_face_value(
    t: &mut Tape,
    ctx: &FvCtx,
    scheme: ConvectionScheme,
    phi: Var,
    grad_phi: Option<Var>,
    mdot: Var,
) -> (Var, Var) {
    let po = t.gather(&ctx.graph, GraphMap::Owner, phi);
    let pn = t.gather(&ctx.graph, GraphMap::Neighbour, phi);
    let upwind = t.upwind_select(mdot, po, pn);
    let high_order = match scheme {
        ConvectionScheme::Upwind => {
            let zero = t.leaf(Buffer::zeros(ctx.n_edges(), 1));
            return (upwind, zero);
        }
        ConvectionScheme::Central => t.weighted_sum(po, pn, Arc::clone(&ctx.w)),
        ConvectionScheme::Sou => {
            let grad = grad_phi.expect("SOU needs the cell gradient");
            let go = t.gather(&ctx.graph, GraphMap::Owner, grad);
            let gn = t.gather(&ctx.graph, GraphMap::Neighbour, grad);
            let ext_o = t.dot_vec_const(go, Arc::clone(&ctx.d_of));
            let ext_n = t.dot_vec_const(gn, Arc::clone(&ctx.d_nf));
            let ho_o = t.add(po, ext_o);
            let ho_n = t.add(pn, ext_n);
            t.upwind_select(mdot, ho_o, ho_n)
        }
        ConvectionScheme::Quick => {
            let grad = grad_phi.expect("QUICK needs the cell gradient");
            let go = t.gather(&ctx.graph, GraphMap::Owner, grad);
            let gn = t.gather(&ctx.graph, GraphMap::Neighbour, grad);
            // Owner upwind: φ_O + ½[(∇φ)_O·d_of + (φ_N−φ_O)(d_of·d)/|d|²].
            let ext_o = t.dot_vec_const(go, Arc::clone(&ctx.d_of));
            let jump_on = t.sub(pn, po);
            let curv_o = t.mul_const_arr(jump_on, Arc::clone(&ctx.quick_own));
            let sum_o = t.add(ext_o, curv_o);
            let half_o = t.scale_const(sum_o, 0.5);
            let ho_o = t.add(po, half_o);
            // Neighbour upwind, mirrored.
            let ext_n = t.dot_vec_const(gn, Arc::clone(&ctx.d_nf));
            let jump_no = t.sub(po, pn);
            let curv_n = t.mul_const_arr(jump_no, Arc::clone(&ctx.quick_nb));
            let sum_n = t.add(ext_n, curv_n);
            let half_n = t.scale_const(sum_n, 0.5);
            let ho_n = t.add(pn, half_n);
            t.upwind_select(mdot, ho_o, ho_n)
        }
    };
    let delta = t.sub(high_order, upwind);
    let correction = t.mul(mdot, delta);
    (upwind, correction)
}

/// Split one face vector into the implicit two-point coefficient |Δ|/|d| and
/// the explicit remainder k = Sf − Δ. `face` is only for error reporting.
pub fn decompose_face(
    sf: Vec3,
    d: Vec3,
    mode: DiffusionCorrection,
    face: usize,
) -> Result<(f64, Vec3)> {
    let dn = d.norm();
    let dhat = d / dn;
    let sn = sf.norm();
    let delta = match mode {
        DiffusionCorrection::None => return Ok((sn / dn, Vec3::ZERO)),
        DiffusionCorrection::Minimum => dhat * sf.dot(dhat),
        DiffusionCorrection::Orthogonal => dhat * sn,
        DiffusionCorrection::OverRelaxed => {
            let cosine = sf.dot(dhat) / sn;
            if cosine.abs() < 1e-6 {
                return Err(Error::ExtremeNonOrthogonality { face, cosine });
            }
            dhat * (sn / cosine)
        }
    };
    Ok((delta.norm() / dn, sf - delta))
}

/// Per-edge implicit coefficients and explicit remainder vectors for the
/// internal faces.
pub fn diffusion_coeffs(
    graph: &MeshGraph,
    mode: DiffusionCorrection,
) -> Result<(Vec<f64>, Vec<Vec3>)> {
    let ne = graph.n_edges();
    let mut coeff = Vec::with_capacity(ne);
    let mut k = Vec::with_capacity(ne);
    for e in 0..ne {
        let (c, kf) = decompose_face(graph.sf[e], graph.d[e], mode, e)?;
        coeff.push(c);
        k.push(kf);
    }
    Ok((coeff, k))
}

/// Same decomposition for one patch's boundary faces (d runs cell → face).
pub fn patch_diffusion_coeffs(
    patch: &GraphPatch,
    mode: DiffusionCorrection,
) -> Result<(Vec<f64>, Vec<Vec3>)> {
    let nf = patch.len();
    let mut coeff = Vec::with_capacity(nf);
    let mut k = Vec::with_capacity(nf);
    for f in 0..nf {
        let (c, kf) = decompose_face(patch.sf[f], patch.d[f], mode, patch.face_ids[f])?;
        coeff.push(c);
        k.push(kf);
    }
    Ok((coeff, k))
}

/// Implicit two-point diffusion coefficients γ|Δ|/|d| (constant geometry)
/// and, for correcting modes, the taped explicit flux γ(∇φ)_f·k_f with the
/// face gradient linearly interpolated.
pub fn diffusive_flux(
    t: &mut Tape,
    ctx: &FvCtx,
    grad_phi: Option<Var>,
    gamma: f64,
    mode: DiffusionCorrection,
) -> Result<(Arc<Vec<f64>>, Option<Var>)> {
    let (mut coeff, k) = diffusion_coeffs(&ctx.graph, mode)?;
    for c in coeff.iter_mut() {
        *c *= gamma;
    }
    let coeff = Arc::new(coeff);
    if mode == DiffusionCorrection::None {
        return Ok((coeff, None));
    }
    let grad = grad_phi.expect("correcting diffusion modes need the cell gradient");
    let go = t.gather(&ctx.graph, GraphMap::Owner, grad);
    let gn = t.gather(&ctx.graph, GraphMap::Neighbour, grad);
    let gf = t.weighted_sum(go, gn, Arc::clone(&ctx.w));
    let kdot = t.dot_vec_const(gf, Arc::new(k));
    let explicit = t.scale_const(kdot, gamma);
    Ok((coeff, Some(explicit)))
}

/// Weighted least-squares cell gradient: minimises Σ_f |φ_nb − φ_c − g·d|²/|d|²
/// over every face of the cell. Unlike the Green–Gauss form it is exact for
/// linear fields on arbitrary cell shapes. `patch_deltas` supplies the
/// boundary jump φ_face − φ_cell per patch face (zero for zero-gradient and
/// empty faces, whose zero jump is itself first-order boundary data).
///
/// Not differentiable — used by forward-only paths such as the Poisson
/// Picard correction.
pub fn lsq_gradient(graph: &MeshGraph, phi: &[f64], patch_deltas: &[Vec<f64>]) -> Vec<Vec3> {
    assert_eq!(patch_deltas.len(), graph.patches.len());
    let n = graph.n_cells;
    // Symmetric normal matrix per cell (xx, xy, xz, yy, yz, zz) and rhs.
    let mut m = vec![[0.0f64; 6]; n];
    let mut r = vec![Vec3::ZERO; n];
    let mut add = |cell: usize, d: Vec3, dphi: f64| {
        let w = 1.0 / d.dot(d);
        let mm = &mut m[cell];
        mm[0] += w * d.x * d.x;
        mm[1] += w * d.x * d.y;
        mm[2] += w * d.x * d.z;
        mm[3] += w * d.y * d.y;
        mm[4] += w * d.y * d.z;
        mm[5] += w * d.z * d.z;
        r[cell] = r[cell] + d * (w * dphi);
    };
    for e in 0..graph.n_edges() {
        let o = graph.owner[e] as usize;
        let nb = graph.neighbour[e] as usize;
        let d = graph.d[e];
        let jump = phi[nb] - phi[o];
        add(o, d, jump);
        add(nb, -d, -jump);
    }
    for (p, patch) in graph.patches.iter().enumerate() {
        for (f, &cell) in patch.cells.iter().enumerate() {
            add(cell as usize, patch.d[f], patch_deltas[p][f]);
        }
    }
    (0..n)
        .map(|i| {
            let [xx, xy, xz, yy, yz, zz] = m[i];
            let det = xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz)
                + xz * (xy * yz - yy * xz);
            let b = r[i];
            Vec3::new(
                (b.x * (yy * zz - yz * yz) + b.y * (xz * yz - xy * zz)
                    + b.z * (xy * yz - xz * yy))
                    / det,
                (b.x * (yz * xz - xy * zz) + b.y * (xx * zz - xz * xz)
                    + b.z * (xy * xz - xx * yz))
                    / det,
                (b.x * (xy * yz - yy * xz) + b.y * (xz * xy - xx * yz)
                    + b.z * (xx * yy - xy * xy))
                    / det,
            )
        })
        .collect()
}

/// Σ_f v_f per cell with outward orientation (no volume division).
pub fn surface_sum(t: &mut Tape, ctx: &FvCtx, internal: Var, patch_vals: &[Option<Var>]) -> Var {
    assert_eq!(patch_vals.len(), ctx.graph.patches.len());
    let pos = t.scatter_add(&ctx.graph, GraphMap::Owner, internal);
    let neg = t.scatter_add(&ctx.graph, GraphMap::Neighbour, internal);
    let mut acc = t.sub(pos, neg);
    for (p, pv) in patch_vals.iter().enumerate() {
        if let Some(pv) = pv {
            let s = t.scatter_add(&ctx.graph, GraphMap::Patch(p), *pv);
            acc = t.add(acc, s);
        }
    }
    acc
}

/// div_i = (Σ_f ṁ_f)/V_i with outward orientation.
pub fn divergence(t: &mut Tape, ctx: &FvCtx, mdot: Var, patch_mdot: &[Option<Var>]) -> Var {
    let sums = surface_sum(t, ctx, mdot, patch_mdot);
    t.mul_const_arr(sums, Arc::clone(&ctx.inv_vol))
}
