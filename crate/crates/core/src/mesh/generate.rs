//! Built-in benchmark meshes.
//!
//! All two-dimensional cases are generated as one-cell-thick slabs with
//! `empty` front/back patches. The bifurcation and elbow domains are unions
//! of axis-aligned rectangles so they mesh exactly with grid quads.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::{mesh_from_cell_faces, PatchKind, RawMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshKind {
    /// Unit cube, each grid hex split into six tetrahedra.
    CubeTet,
    /// Unit square of triangles (prism slab) with split inlet for the
    /// step-advection case.
    SquareTri,
    /// Unit square of quads (hex slab) with a moving lid.
    CavityQuad,
    /// Planar bifurcation: inlet channel tee-ing into two outlet arms.
    Bifurcation,
    /// L-shaped junction with two inlets, used as the elbow benchmark.
    Elbow,
}

impl MeshKind {
    pub fn parse(id: &str) -> Option<MeshKind> {
        match id {
            "cube-tet" => Some(MeshKind::CubeTet),
            "square-tri" => Some(MeshKind::SquareTri),
            "cavity" => Some(MeshKind::CavityQuad),
            "bifurcation" => Some(MeshKind::Bifurcation),
            "elbow" => Some(MeshKind::Elbow),
            _ => None,
        }
    }
}

pub fn generate_mesh(kind: MeshKind, n: usize) -> Result<RawMesh> {
    if n < 2 {
        return Err(Error::InvalidResolution { n });
    }
    match kind {
        MeshKind::CubeTet => cube_tet(n),
        MeshKind::SquareTri => square_tri(n),
        MeshKind::CavityQuad => cavity_quad(n),
        MeshKind::Bifurcation => bifurcation(n),
        MeshKind::Elbow => elbow(n),
    }
}

// ---------------------------------------------------------------------------
// Tetrahedral unit cube
// ---------------------------------------------------------------------------

fn cube_tet(n: usize) -> Result<RawMesh> {
    let np = n + 1;
    let pid = |i: usize, j: usize, k: usize| -> u32 { ((i * np + j) * np + k) as u32 };
    let mut points = Vec::with_capacity(np * np * np);
    for i in 0..np {
        for j in 0..np {
            for k in 0..np {
                let h = 1.0 / n as f64;
                points.push(Vec3::new(i as f64 * h, j as f64 * h, k as f64 * h));
            }
        }
    }

    // Kuhn subdivision: six tets per hex, all sharing the main diagonal.
    // Using the same local orientation in every hex keeps the triangulated
    // quad faces consistent between neighbouring hexes.
    const PERMS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

    let mut cells: Vec<Vec<Vec<u32>>> = Vec::with_capacity(n * n * n * 6);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let corner = |d: [usize; 3]| pid(i + d[0], j + d[1], k + d[2]);
                for perm in PERMS {
                    let mut d = [0usize; 3];
                    let v0 = corner(d);
                    d[perm[0]] = 1;
                    let v1 = corner(d);
                    d[perm[1]] = 1;
                    let v2 = corner(d);
                    d[perm[2]] = 1;
                    let v3 = corner(d);
                    cells.push(tet_faces(&points, [v0, v1, v2, v3]));
                }
            }
        }
    }

    mesh_from_cell_faces(points, cells, &[("walls", PatchKind::Wall)], |_| 0)
}

/// Outward-oriented triangular faces of a tetrahedron, fixing vertex order
/// so the signed volume is positive first.
fn tet_faces(points: &[Vec3], mut v: [u32; 4]) -> Vec<Vec<u32>> {
    let vol = |v: &[u32; 4]| {
        let p = |i: usize| points[v[i] as usize];
        (p(1) - p(0)).dot((p(2) - p(0)).cross(p(3) - p(0)))
    };
    if vol(&v) < 0.0 {
        v.swap(2, 3);
    }
    vec![
        vec![v[0], v[2], v[1]],
        vec![v[0], v[1], v[3]],
        vec![v[1], v[2], v[3]],
        vec![v[0], v[3], v[2]],
    ]
}

// ---------------------------------------------------------------------------
// Slab extrusion of planar cells
// ---------------------------------------------------------------------------

struct Slab {
    verts: Vec<(f64, f64)>,
    /// Counter-clockwise vertex loops.
    cells: Vec<Vec<u32>>,
    thickness: f64,
    /// Boundary patches before the implicit front/back pair.
    patch_defs: Vec<(&'static str, PatchKind)>,
    /// Maps a boundary edge (endpoint coordinates) to a patch index.
    classify_edge: Box<dyn Fn((f64, f64), (f64, f64)) -> usize>,
}

fn extrude_slab(slab: Slab) -> Result<RawMesh> {
    let nv = slab.verts.len() as u32;
    let mut points = Vec::with_capacity(2 * slab.verts.len());
    for &(x, y) in &slab.verts {
        points.push(Vec3::new(x, y, 0.0));
    }
    for &(x, y) in &slab.verts {
        points.push(Vec3::new(x, y, slab.thickness));
    }

    let n_named = slab.patch_defs.len();
    let mut patch_defs = slab.patch_defs.clone();
    patch_defs.push(("front", PatchKind::Empty));
    patch_defs.push(("back", PatchKind::Empty));

    let mut cells: Vec<Vec<Vec<u32>>> = Vec::with_capacity(slab.cells.len());
    for loop2d in &slab.cells {
        let m = loop2d.len();
        let mut faces: Vec<Vec<u32>> = Vec::with_capacity(m + 2);
        for i in 0..m {
            let a = loop2d[i];
            let b = loop2d[(i + 1) % m];
            // CCW cell loop: the quad (a, b, b+top, a+top) faces outward.
            faces.push(vec![a, b, b + nv, a + nv]);
        }
        // Back plane z=0 (outward -z): reversed loop. Front (+z): as-is.
        faces.push(loop2d.iter().rev().copied().collect());
        faces.push(loop2d.iter().map(|&v| v + nv).collect());
        cells.push(faces);
    }

    let verts = slab.verts;
    let classify = move |loop_: &[u32]| -> usize {
        let zs: Vec<f64> = loop_.iter().map(|&v| if v < nv { 0.0 } else { 1.0 }).collect();
        if zs.iter().all(|&z| z == 0.0) {
            return n_named + 1; // back
        }
        if zs.iter().all(|&z| z == 1.0) {
            return n_named; // front
        }
        // Side quad: recover the bottom edge endpoints.
        let bottom: Vec<u32> = loop_.iter().copied().filter(|&v| v < nv).collect();
        let a = verts[bottom[0] as usize];
        let b = verts[bottom[1] as usize];
        (slab.classify_edge)(a, b)
    };

    mesh_from_cell_faces(points, cells, &patch_defs, classify)
}

/// Rectangular grid of quads over the cells selected by `keep`, extruded to
/// a slab. Coordinates are `origin + h * index`.
#[allow(clippy::too_many_arguments)]
fn grid_slab(
    nx: usize,
    ny: usize,
    h: f64,
    origin: (f64, f64),
    thickness: f64,
    keep: impl Fn(usize, usize) -> bool,
    patch_defs: Vec<(&'static str, PatchKind)>,
    classify_edge: Box<dyn Fn((f64, f64), (f64, f64)) -> usize>,
) -> Result<RawMesh> {
    let mut vid = vec![u32::MAX; (nx + 1) * (ny + 1)];
    let mut verts = Vec::new();
    let mut cells = Vec::new();
    let get = |vid: &mut Vec<u32>, verts: &mut Vec<(f64, f64)>, i: usize, j: usize| -> u32 {
        let k = i * (ny + 1) + j;
        if vid[k] == u32::MAX {
            vid[k] = verts.len() as u32;
            verts.push((origin.0 + h * i as f64, origin.1 + h * j as f64));
        }
        vid[k]
    };
    for i in 0..nx {
        for j in 0..ny {
            if keep(i, j) {
                let v00 = get(&mut vid, &mut verts, i, j);
                let v10 = get(&mut vid, &mut verts, i + 1, j);
                let v11 = get(&mut vid, &mut verts, i + 1, j + 1);
                let v01 = get(&mut vid, &mut verts, i, j + 1);
                cells.push(vec![v00, v10, v11, v01]);
            }
        }
    }
    extrude_slab(Slab { verts, cells, thickness, patch_defs, classify_edge })
}

// ---------------------------------------------------------------------------
// Case-specific generators
// ---------------------------------------------------------------------------

/// Unit square of triangles for the step-advection case. The advecting
/// velocity is (2, 1, 0): flow enters through the left edge and the bottom,
/// leaves through the right edge, with the top treated as a passive wall.
/// The scalar step is imposed by splitting the inflow at y = 0.5.
fn square_tri(n: usize) -> Result<RawMesh> {
    let h = 1.0 / n as f64;
    let np = n + 1;
    let mut verts = Vec::with_capacity(np * np);
    for i in 0..np {
        for j in 0..np {
            verts.push((i as f64 * h, j as f64 * h));
        }
    }
    let pid = |i: usize, j: usize| -> u32 { (i * np + j) as u32 };
    let mut cells = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let (v00, v10, v11, v01) = (pid(i, j), pid(i + 1, j), pid(i + 1, j + 1), pid(i, j + 1));
            cells.push(vec![v00, v10, v11]);
            cells.push(vec![v00, v11, v01]);
        }
    }
    let eps = h * 1e-6;
    let classify = move |a: (f64, f64), b: (f64, f64)| -> usize {
        let mx = (a.0 + b.0) * 0.5;
        let my = (a.1 + b.1) * 0.5;
        if mx < eps {
            if my < 0.5 {
                0 // inlet-lower
            } else {
                1 // inlet-upper
            }
        } else if my < eps {
            0 // bottom joins the lower inlet
        } else if mx > 1.0 - eps {
            2 // outlet
        } else {
            3 // walls (top)
        }
    };
    extrude_slab(Slab {
        verts,
        cells,
        thickness: h,
        patch_defs: vec![
            ("inlet-lower", PatchKind::Patch),
            ("inlet-upper", PatchKind::Patch),
            ("outlet", PatchKind::Patch),
            ("walls", PatchKind::Wall),
        ],
        classify_edge: Box::new(classify),
    })
}

/// Lid-driven cavity: unit square of quads, lid at y = 1.
fn cavity_quad(n: usize) -> Result<RawMesh> {
    let h = 1.0 / n as f64;
    let eps = h * 1e-6;
    grid_slab(
        n,
        n,
        h,
        (0.0, 0.0),
        h,
        |_, _| true,
        vec![("lid", PatchKind::Wall), ("walls", PatchKind::Wall)],
        Box::new(move |a: (f64, f64), b: (f64, f64)| {
            let my = (a.1 + b.1) * 0.5;
            if my > 1.0 - eps {
                0
            } else {
                1
            }
        }),
    )
}

/// Planar bifurcation: parent channel of width 1 along x in [0, 3],
/// tee-ing into a crossbar x in [3, 4], y in [-2, 2] with outlets at both
/// arm ends. Lengths in channel widths; slab thickness 0.2.
fn bifurcation(n: usize) -> Result<RawMesh> {
    let h = 1.0 / n as f64;
    let eps = h * 1e-6;
    let (nx, ny) = (4 * n, 4 * n);
    let origin = (0.0, -2.0);
    let keep = move |i: usize, j: usize| -> bool {
        let x = origin.0 + (i as f64 + 0.5) * h;
        let y = origin.1 + (j as f64 + 0.5) * h;
        (x < 3.0 && y.abs() < 0.5) || (x > 3.0 && x < 4.0)
    };
    grid_slab(
        nx,
        ny,
        h,
        origin,
        0.2,
        keep,
        vec![
            ("inlet", PatchKind::Patch),
            ("outlet1", PatchKind::Patch),
            ("outlet2", PatchKind::Patch),
            ("walls", PatchKind::Wall),
        ],
        Box::new(move |a: (f64, f64), b: (f64, f64)| {
            let mx = (a.0 + b.0) * 0.5;
            let my = (a.1 + b.1) * 0.5;
            if mx < eps {
                0
            } else if my > 2.0 - eps {
                1
            } else if my < -2.0 + eps {
                2
            } else {
                3
            }
        }),
    )
}

/// L-shaped two-inlet junction: horizontal channel [0,3]x[0,1] joined to a
/// vertical channel [2,3]x[0,3]. Inlet 1 on the left edge, inlet 2 on the
/// bottom of the vertical branch, outlet at the top.
fn elbow(n: usize) -> Result<RawMesh> {
    let h = 1.0 / n as f64;
    let eps = h * 1e-6;
    let (nx, ny) = (3 * n, 3 * n);
    let keep = move |i: usize, j: usize| -> bool {
        let x = (i as f64 + 0.5) * h;
        let y = (j as f64 + 0.5) * h;
        y < 1.0 || (x > 2.0 && x < 3.0)
    };
    grid_slab(
        nx,
        ny,
        h,
        (0.0, 0.0),
        0.2,
        keep,
        vec![
            ("inlet1", PatchKind::Patch),
            ("inlet2", PatchKind::Patch),
            ("outlet", PatchKind::Patch),
            ("walls", PatchKind::Wall),
        ],
        Box::new(move |a: (f64, f64), b: (f64, f64)| {
            let mx = (a.0 + b.0) * 0.5;
            let my = (a.1 + b.1) * 0.5;
            if mx < eps {
                0
            } else if my < eps && mx > 2.0 {
                1
            } else if my > 3.0 - eps {
                2
            } else {
                3
            }
        }),
    )
}
