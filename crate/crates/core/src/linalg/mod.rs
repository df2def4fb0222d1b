//! Sparse linear algebra on the mesh graph.
//!
//! Matrices use a fixed CSR pattern derived from the cell graph: one
//! diagonal entry per cell plus one entry per internal edge and side. The
//! pattern is structurally symmetric, so a transpose solve just swaps the
//! upper/lower edge coefficient arrays.

mod ilu;
mod krylov;

pub use ilu::*;
pub use krylov::*;

use crate::error::{Error, Result};
use crate::graph::MeshGraph;
use std::sync::Arc;

/// CSR sparsity pattern with precomputed slots for the diagonal and for the
/// two sides of every internal edge.
#[derive(Debug)]
pub struct CsrPattern {
    pub n: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    /// Value slot of A[i][i].
    pub diag_pos: Vec<u32>,
    /// Value slot of A[owner][neighbour] per edge.
    pub upper_pos: Vec<u32>,
    /// Value slot of A[neighbour][owner] per edge.
    pub lower_pos: Vec<u32>,
    /// Row of each upper slot (edge owner), for transpose products.
    pub owner: Vec<u32>,
    /// Row of each lower slot (edge neighbour).
    pub neighbour: Vec<u32>,
}

impl CsrPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Value slot of A[row][col], if the entry exists.
    pub fn pos(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.row_ptr[row] as usize;
        let hi = self.row_ptr[row + 1] as usize;
        self.col_idx[lo..hi].binary_search(&(col as u32)).ok().map(|k| lo + k)
    }
}

pub fn csr_pattern(graph: &MeshGraph) -> Arc<CsrPattern> {
    let n = graph.n_cells;
    let ne = graph.n_edges();
    let mut counts = vec![1u32; n]; // diagonal
    for e in 0..ne {
        counts[graph.owner[e] as usize] += 1;
        counts[graph.neighbour[e] as usize] += 1;
    }
    let mut row_ptr = vec![0u32; n + 1];
    for i in 0..n {
        row_ptr[i + 1] = row_ptr[i] + counts[i];
    }
    let nnz = row_ptr[n] as usize;
    let mut col_idx = vec![0u32; nnz];
    let mut cursor: Vec<u32> = row_ptr[..n].to_vec();
    let mut push = |cursor: &mut Vec<u32>, col_idx: &mut Vec<u32>, row: usize, col: u32| {
        col_idx[cursor[row] as usize] = col;
        cursor[row] += 1;
    };
    for i in 0..n {
        push(&mut cursor, &mut col_idx, i, i as u32);
    }
    for e in 0..ne {
        let (o, nb) = (graph.owner[e] as usize, graph.neighbour[e] as usize);
        push(&mut cursor, &mut col_idx, o, nb as u32);
        push(&mut cursor, &mut col_idx, nb, o as u32);
    }
    for i in 0..n {
        let lo = row_ptr[i] as usize;
        let hi = row_ptr[i + 1] as usize;
        col_idx[lo..hi].sort_unstable();
    }
    let pat = CsrPattern {
        n,
        diag_pos: vec![0; n],
        upper_pos: vec![0; ne],
        lower_pos: vec![0; ne],
        owner: graph.owner.clone(),
        neighbour: graph.neighbour.clone(),
        row_ptr,
        col_idx,
    };
    let mut pat = pat;
    for i in 0..n {
        pat.diag_pos[i] = pat.pos(i, i).unwrap() as u32;
    }
    for e in 0..ne {
        let (o, nb) = (graph.owner[e] as usize, graph.neighbour[e] as usize);
        pat.upper_pos[e] = pat.pos(o, nb).unwrap() as u32;
        pat.lower_pos[e] = pat.pos(nb, o).unwrap() as u32;
    }
    Arc::new(pat)
}

#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub pat: Arc<CsrPattern>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pat;
        for i in 0..p.n {
            let lo = p.row_ptr[i] as usize;
            let hi = p.row_ptr[i + 1] as usize;
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.vals[k] * x[p.col_idx[k] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.pat.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn residual(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut r = self.matvec(x);
        for i in 0..r.len() {
            r[i] = b[i] - r[i];
        }
        r
    }
}

/// Build a matrix from the per-cell diagonal and per-edge off-diagonal
/// coefficient arrays. `upper[e]` lands in the owner row (neighbour
/// column), `lower[e]` in the neighbour row.
pub fn assemble(
    pat: &Arc<CsrPattern>,
    diag: &[f64],
    upper: &[f64],
    lower: &[f64],
) -> Result<CsrMatrix> {
    assert_eq!(diag.len(), pat.n);
    assert_eq!(upper.len(), pat.upper_pos.len());
    assert_eq!(lower.len(), pat.lower_pos.len());
    let mut vals = vec![0.0; pat.nnz()];
    for (i, &d) in diag.iter().enumerate() {
        if d == 0.0 {
            return Err(Error::SingularDiagonal { row: i });
        }
        vals[pat.diag_pos[i] as usize] = d;
    }
    for (e, &u) in upper.iter().enumerate() {
        vals[pat.upper_pos[e] as usize] = u;
    }
    for (e, &l) in lower.iter().enumerate() {
        vals[pat.lower_pos[e] as usize] = l;
    }
    Ok(CsrMatrix { pat: Arc::clone(pat), vals })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullspaceMode {
    /// Replace the reference cell's equation by x[0] = 0. The column is
    /// zeroed as well so symmetric solvers stay applicable; the solution is
    /// unchanged because the pinned value is exactly zero.
    PinCell,
    /// Remove the mean from the rhs; the caller shifts the solution to zero
    /// mean after the solve.
    ProjectMean,
}

/// Handle the all-Neumann pressure nullspace. Modifies `a` and `b` in
/// place; see [`NullspaceMode`].
pub fn deflate_nullspace(a: &mut CsrMatrix, b: &mut [f64], mode: NullspaceMode) {
    match mode {
        NullspaceMode::PinCell => {
            let pat = Arc::clone(&a.pat);
            let lo = pat.row_ptr[0] as usize;
            let hi = pat.row_ptr[1] as usize;
            for k in lo..hi {
                a.vals[k] = if pat.col_idx[k] == 0 { 1.0 } else { 0.0 };
            }
            // Structural symmetry: every neighbour of cell 0 has a col-0 slot.
            for k in lo..hi {
                let j = pat.col_idx[k] as usize;
                if j != 0 {
                    if let Some(p) = pat.pos(j, 0) {
                        a.vals[p] = 0.0;
                    }
                }
            }
            b[0] = 0.0;
        }
        NullspaceMode::ProjectMean => {
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            for v in b.iter_mut() {
                *v -= mean;
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{compute_geometry, generate_mesh, MeshKind};

    pub(crate) fn small_graph() -> MeshGraph {
        let mesh = generate_mesh(MeshKind::CavityQuad, 3).unwrap();
        let geom = compute_geometry(&mesh).unwrap();
        crate::graph::build_graph(&mesh, &geom).unwrap()
    }

    #[test]
    fn pattern_has_diag_and_edge_slots() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        assert_eq!(pat.n, 9);
        assert_eq!(pat.nnz(), 9 + 2 * g.n_edges());
        for e in 0..g.n_edges() {
            let (o, nb) = (g.owner[e] as usize, g.neighbour[e] as usize);
            assert_eq!(pat.col_idx[pat.upper_pos[e] as usize] as usize, nb);
            assert_eq!(pat.col_idx[pat.lower_pos[e] as usize] as usize, o);
        }
    }

    #[test]
    fn zero_diagonal_is_rejected() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let mut diag = vec![1.0; 9];
        diag[4] = 0.0;
        let upper = vec![0.0; g.n_edges()];
        let err = assemble(&pat, &diag, &upper, &upper).unwrap_err();
        assert!(matches!(err, Error::SingularDiagonal { row: 4 }));
    }

    #[test]
    fn pin_cell_matches_hand_result() {
        // Singular 2-cell graph Laplacian [[1,-1],[-1,1]], b = [1,-1]:
        // pinning cell 0 gives x = [0, -1].
        let g = two_cell_graph();
        let pat = csr_pattern(&g);
        let mut a = assemble(&pat, &[1.0, 1.0], &[-1.0], &[-1.0]).unwrap();
        let mut b = vec![1.0, -1.0];
        deflate_nullspace(&mut a, &mut b, NullspaceMode::PinCell);
        let dense = dense::from_csr(&a);
        let x = dense::solve(&dense, &b);
        assert!((x[0] - 0.0).abs() < 1e-14);
        assert!((x[1] - -1.0).abs() < 1e-14);
    }

    /// Two unit cubes sharing one face: the smallest two-cell graph.
    pub(crate) fn two_cell_graph() -> MeshGraph {
        let mut points = Vec::new();
        for ix in 0..3 {
            for iy in 0..2 {
                for iz in 0..2 {
                    points.push(crate::math::Vec3::new(ix as f64, iy as f64, iz as f64));
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
        let mesh = crate::mesh::mesh_from_cell_faces(
            points,
            vec![hex(0), hex(1)],
            &[("walls", crate::mesh::PatchKind::Wall)],
            |_| 0,
        )
        .unwrap();
        let geom = compute_geometry(&mesh).unwrap();
        crate::graph::build_graph(&mesh, &geom).unwrap()
    }

    #[test]
    fn project_mean_centres_rhs() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let mut a = assemble(&pat, &vec![2.0; 9], &vec![-0.5; g.n_edges()], &vec![-0.5; g.n_edges()])
            .unwrap();
        let mut b: Vec<f64> = (0..9).map(|i| i as f64).collect();
        deflate_nullspace(&mut a, &mut b, NullspaceMode::ProjectMean);
        let sum: f64 = b.iter().sum();
        assert!(sum.abs() < 1e-12);
    }
}
