//! Hand-built meshes shared by tests across modules. Compiled only for
//! tests (see the declaration in lib.rs).

use std::sync::Arc;

use crate::graph::{build_graph, MeshGraph};
use crate::math::Vec3;
use crate::mesh::{
    compute_geometry, generate_mesh, mesh_from_cell_faces, MeshKind, PatchKind, RawMesh,
};

fn graph_of(mesh: &RawMesh) -> Arc<MeshGraph> {
    let geom = compute_geometry(mesh).unwrap();
    Arc::new(build_graph(mesh, &geom).unwrap())
}

/// Two unit cubes sharing the x = 1 face; one internal edge with w = 1/2,
/// Sf = (1,0,0), d = (1,0,0).
pub fn two_cube_graph() -> Arc<MeshGraph> {
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
    let mesh =
        mesh_from_cell_faces(points, vec![hex(0), hex(1)], &[("walls", PatchKind::Wall)], |_| 0)
            .unwrap();
    graph_of(&mesh)
}

/// Lid-driven cavity quad mesh (hexahedral prisms) as a graph.
pub fn quad_graph(n: usize) -> Arc<MeshGraph> {
    let mesh = generate_mesh(MeshKind::CavityQuad, n).unwrap();
    graph_of(&mesh)
}

/// Unit-cube tetrahedral mesh as a graph.
pub fn tet_graph(n: usize) -> Arc<MeshGraph> {
    let mesh = generate_mesh(MeshKind::CubeTet, n).unwrap();
    graph_of(&mesh)
}

/// Unit-square triangular-prism mesh (split inlet) as a graph.
pub fn tri_graph(n: usize) -> Arc<MeshGraph> {
    let mesh = generate_mesh(MeshKind::SquareTri, n).unwrap();
    graph_of(&mesh)
}

/// T-junction with one inlet and two opposed outlets as a graph.
pub fn bifurcation_graph(n: usize) -> Arc<MeshGraph> {
    let mesh = generate_mesh(MeshKind::Bifurcation, n).unwrap();
    graph_of(&mesh)
}

/// n×1×1 hex slab on [0,1]³ with separate end patches ("left", "right")
/// and the four lateral faces grouped as "sides".
pub fn slab_graph(n: usize) -> Arc<MeshGraph> {
    let h = 1.0 / n as f64;
    let np = n + 1;
    let pid = |i: usize, j: usize, k: usize| (i * 4 + j * 2 + k) as u32;
    let mut points = Vec::new();
    for i in 0..np {
        for j in 0..2 {
            for k in 0..2 {
                points.push(Vec3::new(i as f64 * h, j as f64, k as f64));
            }
        }
    }
    let mut cells = Vec::new();
    for i in 0..n {
        let v = |di: usize, dj: usize, dk: usize| pid(i + di, dj, dk);
        cells.push(vec![
            vec![v(0, 0, 0), v(0, 0, 1), v(0, 1, 1), v(0, 1, 0)], // x-
            vec![v(1, 0, 0), v(1, 1, 0), v(1, 1, 1), v(1, 0, 1)], // x+
            vec![v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)], // y-
            vec![v(0, 1, 0), v(0, 1, 1), v(1, 1, 1), v(1, 1, 0)], // y+
            vec![v(0, 0, 0), v(0, 1, 0), v(1, 1, 0), v(1, 0, 0)], // z-
            vec![v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)], // z+
        ]);
    }
    let pts = points.clone();
    let mesh = mesh_from_cell_faces(
        points,
        cells,
        &[
            ("left", PatchKind::Patch),
            ("right", PatchKind::Patch),
            ("sides", PatchKind::Wall),
        ],
        |loop_| {
            if loop_.iter().all(|&v| pts[v as usize].x == 0.0) {
                0
            } else if loop_.iter().all(|&v| pts[v as usize].x == 1.0) {
                1
            } else {
                2
            }
        },
    )
    .unwrap();
    graph_of(&mesh)
}
