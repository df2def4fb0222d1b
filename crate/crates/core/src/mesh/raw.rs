use crate::error::{Error, Result};
use crate::math::Vec3;

/// Boundary patch: a contiguous run of boundary faces.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub name: String,
    pub start: usize,
    pub count: usize,
    pub kind: PatchKind,
}

/// Patch type as declared in the boundary description. `Empty` marks the
/// front/back planes of one-cell-thick slab meshes; such faces carry no
/// fluxes and make the setup effectively two-dimensional.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Wall,
    Patch,
    Empty,
}

impl PatchKind {
    pub fn keyword(self) -> &'static str {
        match self {
            PatchKind::Wall => "wall",
            PatchKind::Patch => "patch",
            PatchKind::Empty => "empty",
        }
    }
}

/// Polyhedral mesh in face-owner form.
///
/// Faces are vertex loops stored flat (`face_offsets[i]..face_offsets[i+1]`
/// indexes into `face_verts`), oriented so the area vector points out of the
/// owner cell. The first `neighbour.len()` faces are internal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawMesh {
    pub points: Vec<Vec3>,
    pub face_offsets: Vec<usize>,
    pub face_verts: Vec<u32>,
    pub owner: Vec<u32>,
    pub neighbour: Vec<u32>,
    pub patches: Vec<Patch>,
    pub n_cells: usize,
}

impl RawMesh {
    pub fn n_faces(&self) -> usize {
        self.owner.len()
    }

    pub fn n_internal_faces(&self) -> usize {
        self.neighbour.len()
    }

    pub fn face(&self, f: usize) -> &[u32] {
        &self.face_verts[self.face_offsets[f]..self.face_offsets[f + 1]]
    }

    pub fn patch_by_name(&self, name: &str) -> Option<&Patch> {
        self.patches.iter().find(|p| p.name == name)
    }

    /// Structural consistency checks: index ranges, face ordering, and
    /// patch coverage. Geometric checks (area, volume, closedness) live in
    /// `compute_geometry`.
    pub fn validate(&self) -> Result<()> {
        let n_faces = self.n_faces();
        if self.face_offsets.len() != n_faces + 1 {
            return Err(Error::mesh(format!(
                "face_offsets has {} entries for {} faces",
                self.face_offsets.len(),
                n_faces
            )));
        }
        if self.neighbour.len() > n_faces {
            return Err(Error::mesh("more neighbour entries than faces"));
        }
        for f in 0..n_faces {
            let verts = self.face(f);
            if verts.len() < 3 {
                return Err(Error::mesh(format!("face {f} has {} vertices", verts.len())));
            }
            for &v in verts {
                if v as usize >= self.points.len() {
                    return Err(Error::mesh(format!(
                        "face {f} references point {v} but mesh has {} points",
                        self.points.len()
                    )));
                }
            }
            if self.owner[f] as usize >= self.n_cells {
                return Err(Error::mesh(format!("face {f} owner out of range")));
            }
        }
        for (f, &nb) in self.neighbour.iter().enumerate() {
            if nb as usize >= self.n_cells {
                return Err(Error::mesh(format!("face {f} neighbour out of range")));
            }
            if self.owner[f] >= nb {
                return Err(Error::mesh(format!(
                    "internal face {f} violates owner < neighbour ({} >= {})",
                    self.owner[f], nb
                )));
            }
        }
        // Patches must tile [n_internal, n_faces) exactly, in order.
        let mut cursor = self.n_internal_faces();
        for p in &self.patches {
            if p.start != cursor {
                return Err(Error::mesh(format!(
                    "patch '{}' starts at face {} but expected {}",
                    p.name, p.start, cursor
                )));
            }
            cursor += p.count;
        }
        if cursor != n_faces {
            return Err(Error::mesh(format!(
                "patches cover boundary faces up to {cursor} of {n_faces}"
            )));
        }
        // Every cell must appear on at least one face.
        let mut seen = vec![false; self.n_cells];
        for &c in self.owner.iter().chain(self.neighbour.iter()) {
            seen[c as usize] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::mesh(format!("cell {c} has no faces")));
        }
        Ok(())
    }

    /// Faces of each cell with a sign: +1 where the cell is the owner (area
    /// vector points outward), -1 where it is the neighbour.
    pub fn cell_faces(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cf = vec![Vec::new(); self.n_cells];
        for (f, &o) in self.owner.iter().enumerate() {
            cf[o as usize].push((f, 1.0));
        }
        for (f, &n) in self.neighbour.iter().enumerate() {
            cf[n as usize].push((f, -1.0));
        }
        cf
    }
}

/// Assemble a `RawMesh` from per-cell face loops (each loop oriented
/// outward from its cell). Shared loops become internal faces owned by the
/// lower-indexed cell; unshared loops are boundary faces routed to a patch
/// by `classify`. Used by the mesh generators and the VTK reader.
pub fn mesh_from_cell_faces(
    points: Vec<Vec3>,
    cell_faces: Vec<Vec<Vec<u32>>>,
    patch_defs: &[(&str, PatchKind)],
    classify: impl Fn(&[u32]) -> usize,
) -> Result<RawMesh> {
    use std::collections::HashMap;

    let n_cells = cell_faces.len();
    // Map from sorted vertex key to (first cell, its loop).
    let mut pending: HashMap<Vec<u32>, (u32, Vec<u32>)> = HashMap::new();
    let mut internal: Vec<(u32, u32, Vec<u32>)> = Vec::new();
    for (c, faces) in cell_faces.into_iter().enumerate() {
        for loop_ in faces {
            let mut key = loop_.clone();
            key.sort_unstable();
            match pending.remove(&key) {
                None => {
                    pending.insert(key, (c as u32, loop_));
                }
                Some((c0, loop0)) => {
                    // c0 < c because cells are visited in index order.
                    internal.push((c0, c as u32, loop0));
                }
            }
        }
    }
    internal.sort_by_key(|(o, n, _)| (*o, *n));

    let mut boundary: Vec<Vec<(u32, Vec<u32>)>> = vec![Vec::new(); patch_defs.len()];
    let mut leftovers: Vec<(Vec<u32>, (u32, Vec<u32>))> = pending.into_iter().collect();
    leftovers.sort_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| a.0.cmp(&b.0)));
    for (_key, (c, loop_)) in leftovers {
        let p = classify(&loop_);
        if p >= patch_defs.len() {
            return Err(Error::mesh(format!("boundary face classified to unknown patch {p}")));
        }
        boundary[p].push((c, loop_));
    }

    let mut mesh = RawMesh { points, n_cells, ..Default::default() };
    mesh.face_offsets.push(0);
    let push_face = |mesh: &mut RawMesh, owner: u32, loop_: &[u32]| {
        mesh.owner.push(owner);
        mesh.face_verts.extend_from_slice(loop_);
        mesh.face_offsets.push(mesh.face_verts.len());
    };
    for (o, n, loop_) in &internal {
        push_face(&mut mesh, *o, loop_);
        mesh.neighbour.push(*n);
    }
    for (p, (name, kind)) in patch_defs.iter().enumerate() {
        let start = mesh.owner.len();
        for (c, loop_) in &boundary[p] {
            push_face(&mut mesh, *c, loop_);
        }
        mesh.patches.push(Patch {
            name: (*name).to_string(),
            start,
            count: mesh.owner.len() - start,
            kind: *kind,
        });
    }
    mesh.validate()?;
    Ok(mesh)
}
