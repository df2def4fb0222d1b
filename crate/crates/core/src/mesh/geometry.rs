use crate::error::{Error, Result};
use crate::math::{Vec3, ZERO3};
use crate::mesh::RawMesh;

/// Face and cell geometry derived from a `RawMesh`.
///
/// `sf[f]` is the face area vector oriented out of the owner cell, `xf[f]`
/// the area centroid. Volumes and centroids come from a signed-tetrahedron
/// decomposition of each cell about the mean of its face centres, which is
/// exact for arbitrary polyhedra (including warped faces, which are handled
/// triangle by triangle).
#[derive(Clone, Debug)]
pub struct MeshGeometry {
    pub sf: Vec<Vec3>,
    pub xf: Vec<Vec3>,
    pub volume: Vec<f64>,
    pub centroid: Vec<Vec3>,
}

impl MeshGeometry {
    pub fn total_volume(&self) -> f64 {
        self.volume.iter().sum()
    }
}

/// Triangles of the fan decomposition of face `f` about its vertex mean.
fn face_fan(mesh: &RawMesh, f: usize) -> (Vec3, Vec<(Vec3, Vec3)>) {
    let verts = mesh.face(f);
    let mut mean = ZERO3;
    for &v in verts {
        mean += mesh.points[v as usize];
    }
    let mean = mean / verts.len() as f64;
    let mut tris = Vec::with_capacity(verts.len());
    for i in 0..verts.len() {
        let a = mesh.points[verts[i] as usize];
        let b = mesh.points[verts[(i + 1) % verts.len()] as usize];
        tris.push((a, b));
    }
    (mean, tris)
}

pub fn compute_geometry(mesh: &RawMesh) -> Result<MeshGeometry> {
    let n_faces = mesh.n_faces();
    let mut sf = vec![ZERO3; n_faces];
    let mut xf = vec![ZERO3; n_faces];
    let mut face_mean = vec![ZERO3; n_faces];

    for f in 0..n_faces {
        let (mean, tris) = face_fan(mesh, f);
        face_mean[f] = mean;
        let mut area_vec = ZERO3;
        let mut area_abs = 0.0;
        let mut centroid = ZERO3;
        for &(a, b) in &tris {
            let s = (a - mean).cross(b - mean) * 0.5;
            let w = s.norm();
            area_vec += s;
            area_abs += w;
            centroid += (mean + a + b) / 3.0 * w;
        }
        if area_abs == 0.0 || area_vec.norm() < 1e-10 * area_abs {
            return Err(Error::DegenerateFace { face: f, area: area_vec.norm() });
        }
        sf[f] = area_vec;
        xf[f] = centroid / area_abs;
    }

    // Apex per cell: mean of its face means. The signed tetrahedra
    // (apex, a, b, face-mean triangles) then tile the cell exactly.
    let cell_faces = mesh.cell_faces();
    let mut volume = vec![0.0; mesh.n_cells];
    let mut centroid = vec![ZERO3; mesh.n_cells];
    let mut apex = vec![ZERO3; mesh.n_cells];
    for c in 0..mesh.n_cells {
        let faces = &cell_faces[c];
        if faces.is_empty() {
            return Err(Error::mesh(format!("cell {c} has no faces")));
        }
        let mut m = ZERO3;
        for &(f, _) in faces {
            m += face_mean[f];
        }
        apex[c] = m / faces.len() as f64;
    }
    let mut surface = vec![0.0; mesh.n_cells];
    let mut closed = vec![ZERO3; mesh.n_cells];
    for c in 0..mesh.n_cells {
        for &(f, sign) in &cell_faces[c] {
            let (mean, tris) = face_fan(mesh, f);
            let x0 = apex[c];
            for &(a, b) in &tris {
                // Signed volume of tetrahedron (x0, mean, a, b), flipped when
                // the cell is the face's neighbour.
                let v = sign * (mean - x0).dot((a - x0).cross(b - x0)) / 6.0;
                volume[c] += v;
                centroid[c] += (x0 + mean + a + b) * (0.25 * v);
            }
            surface[c] += sf[f].norm();
            closed[c] += sf[f] * sign;
        }
    }
    for c in 0..mesh.n_cells {
        if !(volume[c] > 0.0) {
            return Err(Error::InvertedCell { cell: c, volume: volume[c] });
        }
        centroid[c] = centroid[c] / volume[c];
        if closed[c].norm() >= 1e-10 * surface[c] {
            return Err(Error::mesh(format!(
                "cell {c} is not closed: |sum Sf| = {:.3e} vs surface {:.3e}",
                closed[c].norm(),
                surface[c]
            )));
        }
    }

    Ok(MeshGeometry { sf, xf, volume, centroid })
}
