//! Graph view of a polyhedral mesh.
//!
//! Internal faces become edges between owner and neighbour cells; boundary
//! faces are kept in per-patch lists attached to their owner cells. All
//! discrete operators in this crate reduce to three primitives on this
//! structure: gather (cells → edges), a per-edge map, and scatter-add
//! (edges → cells).
//!
//! Scatter-add is the floating-point-sensitive primitive: the result must
//! not depend on scheduling. Plans therefore pre-sort edge indices by
//! target cell (stable, so contributions keep ascending edge order) and
//! each cell's contributions are summed left to right. This makes results
//! bit-reproducible and is also the layout a per-cell parallel backend
//! would use; atomics are deliberately not part of the design.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::{MeshGeometry, PatchKind, RawMesh};

/// Deterministic scatter-add plan for a fixed edge → target index map.
#[derive(Clone, Debug)]
pub struct ScatterPlan {
    pub n_out: usize,
    /// Edge indices grouped by target, ascending within each group.
    order: Vec<u32>,
    /// Start of each target's group in `order` (length `n_out + 1`).
    offsets: Vec<u32>,
}

impl ScatterPlan {
    pub fn new(index: &[u32], n_out: usize) -> ScatterPlan {
        let mut counts = vec![0u32; n_out + 1];
        for &t in index {
            counts[t as usize + 1] += 1;
        }
        for i in 0..n_out {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut order = vec![0u32; index.len()];
        for (e, &t) in index.iter().enumerate() {
            order[cursor[t as usize] as usize] = e as u32;
            cursor[t as usize] += 1;
        }
        ScatterPlan { n_out, order, offsets }
    }

    /// `out[t] += sum of vals[e]` over edges mapping to `t`, summed in
    /// ascending edge order.
    pub fn add_into(&self, vals: &[f64], comps: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_out * comps);
        debug_assert_eq!(vals.len(), self.order.len() * comps);
        for t in 0..self.n_out {
            let lo = self.offsets[t] as usize;
            let hi = self.offsets[t + 1] as usize;
            for k in 0..comps {
                let mut acc = out[t * comps + k];
                for &e in &self.order[lo..hi] {
                    acc += vals[e as usize * comps + k];
                }
                out[t * comps + k] = acc;
            }
        }
    }

    pub fn execute(&self, vals: &[f64], comps: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out * comps];
        self.add_into(vals, comps, &mut out);
        out
    }
}

/// `out[e] = field[index[e]]` (componentwise).
pub fn gather(field: &[f64], comps: usize, index: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; index.len() * comps];
    for (e, &c) in index.iter().enumerate() {
        let src = c as usize * comps;
        out[e * comps..e * comps + comps].copy_from_slice(&field[src..src + comps]);
    }
    out
}

/// One-off deterministic scatter-add; builds a plan internally. Prefer the
/// prebuilt plans on [`MeshGraph`] in hot paths.
pub fn scatter_add(vals: &[f64], comps: usize, index: &[u32], n_out: usize) -> Vec<f64> {
    ScatterPlan::new(index, n_out).execute(vals, comps)
}

/// Boundary patch in graph form: one entry per boundary face.
#[derive(Clone, Debug)]
pub struct GraphPatch {
    pub name: String,
    pub kind: PatchKind,
    /// Owner cell of each face.
    pub cells: Vec<u32>,
    /// Outward area vectors.
    pub sf: Vec<Vec3>,
    pub area: Vec<f64>,
    pub xf: Vec<Vec3>,
    /// Cell centroid → face centroid.
    pub d: Vec<Vec3>,
    /// Original face index in the mesh, for writers.
    pub face_ids: Vec<usize>,
    pub plan: ScatterPlan,
}

impl GraphPatch {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.area.iter().sum()
    }
}

/// Mesh as a cell graph with per-edge geometry.
#[derive(Clone, Debug)]
pub struct MeshGraph {
    pub n_cells: usize,
    pub owner: Vec<u32>,
    pub neighbour: Vec<u32>,
    /// Area vector per edge, oriented owner → neighbour.
    pub sf: Vec<Vec3>,
    pub area: Vec<f64>,
    pub xf: Vec<Vec3>,
    /// Centroid offset x_N − x_O per edge.
    pub d: Vec<Vec3>,
    /// Linear interpolation weight of the owner value.
    pub w: Vec<f64>,
    pub volume: Vec<f64>,
    pub centroid: Vec<Vec3>,
    pub patches: Vec<GraphPatch>,
    pub owner_plan: ScatterPlan,
    pub neighbour_plan: ScatterPlan,
}

impl MeshGraph {
    pub fn n_edges(&self) -> usize {
        self.owner.len()
    }

    pub fn patch_index(&self, name: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.name == name)
    }

    pub fn gather_owner(&self, field: &[f64], comps: usize) -> Vec<f64> {
        gather(field, comps, &self.owner)
    }

    pub fn gather_neighbour(&self, field: &[f64], comps: usize) -> Vec<f64> {
        gather(field, comps, &self.neighbour)
    }
}

pub fn build_graph(mesh: &RawMesh, geom: &MeshGeometry) -> Result<MeshGraph> {
    let ne = mesh.n_internal_faces();
    let owner: Vec<u32> = mesh.owner[..ne].to_vec();
    let neighbour: Vec<u32> = mesh.neighbour.clone();
    let mut sf = Vec::with_capacity(ne);
    let mut area = Vec::with_capacity(ne);
    let mut xf = Vec::with_capacity(ne);
    let mut d = Vec::with_capacity(ne);
    let mut w = Vec::with_capacity(ne);
    for e in 0..ne {
        let (o, n) = (owner[e] as usize, neighbour[e] as usize);
        let s = geom.sf[e];
        let dd = geom.centroid[n] - geom.centroid[o];
        let dot = s.dot(dd);
        if dot <= 0.0 {
            return Err(Error::NonConvexPairError { edge: e, dot });
        }
        let x = geom.xf[e];
        let do_ = (x - geom.centroid[o]).norm();
        let dn = (x - geom.centroid[n]).norm();
        sf.push(s);
        area.push(s.norm());
        xf.push(x);
        d.push(dd);
        w.push(dn / (do_ + dn));
    }

    let mut patches = Vec::with_capacity(mesh.patches.len());
    for p in &mesh.patches {
        let mut cells = Vec::with_capacity(p.count);
        let mut psf = Vec::with_capacity(p.count);
        let mut parea = Vec::with_capacity(p.count);
        let mut pxf = Vec::with_capacity(p.count);
        let mut pd = Vec::with_capacity(p.count);
        let mut ids = Vec::with_capacity(p.count);
        for f in p.start..p.start + p.count {
            let c = mesh.owner[f] as usize;
            cells.push(c as u32);
            psf.push(geom.sf[f]);
            parea.push(geom.sf[f].norm());
            pxf.push(geom.xf[f]);
            pd.push(geom.xf[f] - geom.centroid[c]);
            ids.push(f);
        }
        let plan = ScatterPlan::new(&cells, mesh.n_cells);
        patches.push(GraphPatch {
            name: p.name.clone(),
            kind: p.kind,
            cells,
            sf: psf,
            area: parea,
            xf: pxf,
            d: pd,
            face_ids: ids,
            plan,
        });
    }

    let owner_plan = ScatterPlan::new(&owner, mesh.n_cells);
    let neighbour_plan = ScatterPlan::new(&neighbour, mesh.n_cells);
    Ok(MeshGraph {
        n_cells: mesh.n_cells,
        owner,
        neighbour,
        sf,
        area,
        xf,
        d,
        w,
        volume: geom.volume.clone(),
        centroid: geom.centroid.clone(),
        patches,
        owner_plan,
        neighbour_plan,
    })
}

/// Generic residual assembly: apply `msg(edge, phi_owner, phi_neighbour)`
/// per edge and accumulate the result with + into the owner and − into the
/// neighbour. Boundary contributions are left to the caller, which knows
/// the boundary conditions.
pub fn fvm_residual_assemble(
    graph: &MeshGraph,
    phi: &[f64],
    msg: impl Fn(usize, f64, f64) -> f64,
) -> Vec<f64> {
    let po = graph.gather_owner(phi, 1);
    let pn = graph.gather_neighbour(phi, 1);
    let vals: Vec<f64> = (0..graph.n_edges()).map(|e| msg(e, po[e], pn[e])).collect();
    let mut out = graph.owner_plan.execute(&vals, 1);
    let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
    graph.neighbour_plan.add_into(&neg, 1, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{compute_geometry, generate_mesh, mesh_from_cell_faces, MeshKind};
    use proptest::prelude::*;

    fn two_cube_graph() -> MeshGraph {
        let mut points = Vec::new();
        for ix in 0..3 {
            for iy in 0..2 {
                for iz in 0..2 {
                    points.push(Vec3::new(ix as f64, iy as f64, iz as f64));
                }
            }
        }
        let idx = |ix: u32, iy: u32, iz: u32| -> u32 { ix * 4 + iy * 2 + iz };
        let hex = |ix: u32| -> Vec<Vec<u32>> {
            let v = |dx: u32, dy: u32, dz: u32| idx(ix + dx, dy, dz);
            vec![
                vec![v(0, 0, 0), v(0, 1, 0), v(1, 1, 0), v(1, 0, 0)],
                vec![v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)],
                vec![v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)],
                vec![v(0, 1, 0), v(0, 1, 1), v(1, 1, 1), v(1, 1, 0)],
                vec![v(0, 0, 0), v(0, 0, 1), v(0, 1, 1), v(0, 1, 0)],
                vec![v(1, 0, 0), v(1, 1, 0), v(1, 1, 1), v(1, 0, 1)],
            ]
        };
        let mesh = mesh_from_cell_faces(
            points,
            vec![hex(0), hex(1)],
            &[("walls", PatchKind::Wall)],
            |_| 0,
        )
        .unwrap();
        let geom = compute_geometry(&mesh).unwrap();
        build_graph(&mesh, &geom).unwrap()
    }

    #[test]
    fn two_cubes_edge_geometry() {
        let g = two_cube_graph();
        assert_eq!(g.n_edges(), 1);
        assert!((g.w[0] - 0.5).abs() < 1e-14);
        assert!((g.d[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-14);
        assert!((g.sf[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn anisotropic_pair_weight_favours_nearer_cell() {
        // 1x1x1 cube against a 1x1x4 box: the shared face sits 0.5 from the
        // small cell's centroid and 2.0 from the large one's, so the owner
        // weight is 2 / (0.5 + 2) = 0.8.
        let points = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::new(5.0, 1.0, 0.0),
            Vec3::new(5.0, 0.0, 1.0),
            Vec3::new(5.0, 1.0, 1.0),
        ];
        let cube: Vec<Vec<u32>> = vec![
            vec![0, 3, 2, 1],
            vec![4, 5, 6, 7],
            vec![0, 1, 5, 4],
            vec![2, 3, 7, 6],
            vec![0, 4, 7, 3],
            vec![1, 2, 6, 5],
        ];
        let slab: Vec<Vec<u32>> = vec![
            vec![1, 2, 9, 8],
            vec![5, 10, 11, 6],
            vec![1, 8, 10, 5],
            vec![2, 6, 11, 9],
            vec![1, 5, 6, 2], // shared face, outward -x from the slab
            vec![8, 9, 11, 10],
        ];
        let mesh = mesh_from_cell_faces(
            points,
            vec![cube, slab],
            &[("walls", PatchKind::Wall)],
            |_| 0,
        )
        .unwrap();
        let geom = compute_geometry(&mesh).unwrap();
        let g = build_graph(&mesh, &geom).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert!((g.w[0] - 0.8).abs() < 1e-12, "w = {}", g.w[0]);
    }

    #[test]
    fn scatter_add_is_left_to_right() {
        // Cancellation order matters: summing in ascending edge order gives
        // (1e16 + 1.0) - 1e16 = 0.0, not 1.0.
        let out = scatter_add(&[1e16, 1.0, -1e16], 1, &[0, 0, 0], 1);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn residual_assembly_on_two_cubes() {
        let g = two_cube_graph();
        let phi = vec![3.0, 5.0];
        let r = fvm_residual_assemble(&g, &phi, |_, po, pn| pn - po);
        assert_eq!(r, vec![2.0, -2.0]);
    }

    #[test]
    fn boundary_cells_and_areas() {
        let mesh = generate_mesh(MeshKind::CavityQuad, 4).unwrap();
        let geom = compute_geometry(&mesh).unwrap();
        let g = build_graph(&mesh, &geom).unwrap();
        let lid = &g.patches[g.patch_index("lid").unwrap()];
        assert_eq!(lid.len(), 4);
        // Lid faces point +y.
        for s in &lid.sf {
            assert!(s.y > 0.0 && s.x.abs() < 1e-14);
        }
    }

    proptest! {
        /// <scatter_add(e), c> == <e, gather(c)> for random values: the two
        /// primitives are exact adjoints.
        #[test]
        fn gather_scatter_adjoint(
            evals in proptest::collection::vec(-1e3f64..1e3, 24),
            cvals in proptest::collection::vec(-1e3f64..1e3, 7),
            idx in proptest::collection::vec(0u32..7, 24),
        ) {
            let scattered = scatter_add(&evals, 1, &idx, 7);
            let gathered = gather(&cvals, 1, &idx);
            let lhs: f64 = scattered.iter().zip(&cvals).map(|(a, b)| a * b).sum();
            let rhs: f64 = evals.iter().zip(&gathered).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        /// Plan-based scatter matches a sequential loop exactly (same
        /// per-target summation order), regardless of index pattern.
        #[test]
        fn plan_matches_sequential_loop(
            evals in proptest::collection::vec(-1e6f64..1e6, 40),
            idx in proptest::collection::vec(0u32..11, 40),
        ) {
            let planned = scatter_add(&evals, 1, &idx, 11);
            let mut serial = vec![0.0; 11];
            for (e, &t) in idx.iter().enumerate() {
                serial[t as usize] += evals[e];
            }
            prop_assert_eq!(planned, serial);
        }
    }
}
