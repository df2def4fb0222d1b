//! Reverse-mode differentiation over coarse field operations.
//!
//! The tape records whole-field operations (gather, scatter-add, sparse
//! matvec, linear solve, …) rather than scalar arithmetic, so taping a
//! transient solve costs a small constant factor over the untaped run.
//! Mesh geometry and other non-differentiated data ride along inside op
//! payloads as [`Arc`]s; only genuinely differentiated buffers become
//! tape variables.
//!
//! Determinism: every adjoint that fans values into cells goes through a
//! [`ScatterPlan`] or a fixed-order edge loop, so gradients are bit-stable
//! across runs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{MeshGraph, ScatterPlan};
use crate::linalg::{assemble, ilu0, solve, CsrPattern, SolveOpts, SolveReport};
use crate::math::Vec3;

/// Dense field value: `rows` entries of `comps` components each.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub rows: usize,
    pub comps: usize,
    pub data: Vec<f64>,
}

impl Buffer {
    pub fn zeros(rows: usize, comps: usize) -> Buffer {
        Buffer { rows, comps, data: vec![0.0; rows * comps] }
    }

    pub fn scalar(x: f64) -> Buffer {
        Buffer { rows: 1, comps: 1, data: vec![x] }
    }

    pub fn from_vec(data: Vec<f64>, comps: usize) -> Buffer {
        assert_eq!(data.len() % comps, 0);
        Buffer { rows: data.len() / comps, comps, data }
    }

    pub fn from_vec3(v: &[Vec3]) -> Buffer {
        let mut data = Vec::with_capacity(v.len() * 3);
        for p in v {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Buffer { rows: v.len(), comps: 3, data }
    }

    pub fn to_vec3(&self) -> Vec<Vec3> {
        assert_eq!(self.comps, 3);
        (0..self.rows)
            .map(|r| Vec3::new(self.data[r * 3], self.data[r * 3 + 1], self.data[r * 3 + 2]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "expected a 1x1 buffer");
        self.data[0]
    }

    fn zeros_like(&self) -> Buffer {
        Buffer::zeros(self.rows, self.comps)
    }

    fn same_shape(&self, other: &Buffer) -> bool {
        self.rows == other.rows && self.comps == other.comps
    }
}

/// Handle to a tape value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Which cell→face index map of a mesh graph an op uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMap {
    Owner,
    Neighbour,
    Patch(usize),
}

/// Time discretisation of the lumped-parameter outlet update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindkesselScheme {
    Exact,
    ForwardEuler,
    BackwardEuler,
}

impl WindkesselScheme {
    pub fn parse(s: &str) -> Option<WindkesselScheme> {
        match s {
            "exact" => Some(WindkesselScheme::Exact),
            "forwardEuler" | "forward-euler" => Some(WindkesselScheme::ForwardEuler),
            "backwardEuler" | "backward-euler" => Some(WindkesselScheme::BackwardEuler),
            _ => None,
        }
    }
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Field times a 1×1 variable.
    ScaleVar(Var, Var),
    ScaleConst(Var, f64),
    AddConstArr(Var, Arc<Vec<f64>>),
    /// Constant length may be rows·comps (elementwise) or rows (per-row).
    MulConstArr(Var, Arc<Vec<f64>>),
    Exp(Var),
    Recip(Var),
    MaxZero(Var),
    MinZero(Var),
    /// 1×1 → rows×1.
    Broadcast(Var, usize),
    SumAll(Var),
    Dot(Var, Var),
    /// w∘a + (1−w)∘b with constant per-row weights.
    WeightedSum(Var, Var, Arc<Vec<f64>>),
    /// Extract one component of a multi-component field.
    Comp(Var, usize),
    Join3(Var, Var, Var),
    /// Per-row dot of a rows×3 field with a constant vector array.
    DotVecConst(Var, Arc<Vec<Vec3>>),
    /// Per-row scale of a constant vector array by a rows×1 field.
    MulVecConst(Var, Arc<Vec<Vec3>>),
    /// rows×C times rows×1, broadcast over components.
    MulColBroadcast(Var, Var),
    /// Row r of the output takes a[r] where m[r] ≥ 0, else b[r]. The mask
    /// is treated as piecewise constant: it receives no cotangent.
    UpwindSelect { m: Var, a: Var, b: Var },
    Gather(Arc<MeshGraph>, GraphMap, Var),
    GatherIdx { idx: Arc<Vec<u32>>, plan: Arc<ScatterPlan>, input: Var },
    ScatterAdd(Arc<MeshGraph>, GraphMap, Var),
    SpMv { pat: Arc<CsrPattern>, diag: Var, upper: Var, lower: Var, x: Var },
    LinearSolve { pat: Arc<CsrPattern>, opts: SolveOpts, diag: Var, upper: Var, lower: Var, rhs: Var },
    WindkesselStep { scheme: WindkesselScheme, dt: f64, pc: Var, q: Var, rd: Var, c: Var },
    /// Identity whose adjoint is an error: marks values produced by a
    /// non-differentiable computation.
    Opaque { name: &'static str, input: Var },
}

struct Node {
    out: Var,
    op: Op,
}

/// Snapshot of tape length, for truncation. Vars created after the mark are
/// invalidated by [`Tape::truncate`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    n_vals: usize,
    n_nodes: usize,
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Buffer>,
    nodes: Vec<Node>,
    grads: Vec<Option<Buffer>>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { vals: Vec::new(), nodes: Vec::new(), grads: Vec::new(), recording: true }
    }

    /// Evaluation-only tape: ops compute values but record no nodes.
    pub fn new_nograd() -> Tape {
        Tape { recording: false, ..Tape::new() }
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn val(&self, v: Var) -> &Buffer {
        &self.vals[v.idx()]
    }

    pub fn grad(&self, v: Var) -> Option<&Buffer> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark { n_vals: self.vals.len(), n_nodes: self.nodes.len() }
    }

    /// Drop all values and nodes recorded after `mark`. Any [`Var`] handed
    /// out since then must not be used again.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.vals.truncate(mark.n_vals);
        self.nodes.truncate(mark.n_nodes);
        self.grads.clear();
    }

    fn alloc(&mut self, val: Buffer) -> Var {
        let v = Var(u32::try_from(self.vals.len()).expect("tape overflow"));
        self.vals.push(val);
        v
    }

    /// Introduce an input (differentiable leaf).
    pub fn leaf(&mut self, val: Buffer) -> Var {
        self.alloc(val)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.alloc(Buffer::scalar(x))
    }

    fn push(&mut self, val: Buffer, op: Op) -> Var {
        let out = self.alloc(val);
        if self.recording {
            self.nodes.push(Node { out, op });
        }
        out
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Buffer {
        let (ba, bb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        assert!(ba.same_shape(bb), "shape mismatch: {}x{} vs {}x{}", ba.rows, ba.comps, bb.rows, bb.comps);
        let data = ba.data.iter().zip(&bb.data).map(|(&x, &y)| f(x, y)).collect();
        Buffer { rows: ba.rows, comps: ba.comps, data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn scale_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.vals[s.idx()].as_scalar();
        let ba = &self.vals[a.idx()];
        let out = Buffer {
            rows: ba.rows,
            comps: ba.comps,
            data: ba.data.iter().map(|&x| x * sv).collect(),
        };
        self.push(out, Op::ScaleVar(a, s))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let ba = &self.vals[a.idx()];
        let out =
            Buffer { rows: ba.rows, comps: ba.comps, data: ba.data.iter().map(|&x| x * c).collect() };
        self.push(out, Op::ScaleConst(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale_const(a, -1.0)
    }

    pub fn add_const_arr(&mut self, a: Var, arr: Arc<Vec<f64>>) -> Var {
        let ba = &self.vals[a.idx()];
        assert_eq!(arr.len(), ba.len());
        let data = ba.data.iter().zip(arr.iter()).map(|(&x, &c)| x + c).collect();
        let out = Buffer { rows: ba.rows, comps: ba.comps, data };
        self.push(out, Op::AddConstArr(a, arr))
    }

    pub fn mul_const_arr(&mut self, a: Var, arr: Arc<Vec<f64>>) -> Var {
        let ba = &self.vals[a.idx()];
        let (rows, comps) = (ba.rows, ba.comps);
        assert!(arr.len() == ba.len() || arr.len() == rows, "constant length mismatch");
        let mut data = ba.data.clone();
        mul_arr_into(&mut data, &arr, rows, comps);
        let out = Buffer { rows, comps, data };
        self.push(out, Op::MulConstArr(a, arr))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ba = &self.vals[a.idx()];
        let out =
            Buffer { rows: ba.rows, comps: ba.comps, data: ba.data.iter().map(|&x| f(x)).collect() };
        self.push(out, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    /// max(x, 0) per entry; subgradient 0 at the kink.
    pub fn max_zero(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::MaxZero(a))
    }

    /// min(x, 0) per entry; subgradient 0 at the kink.
    pub fn min_zero(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.min(0.0), Op::MinZero(a))
    }

    pub fn broadcast(&mut self, s: Var, rows: usize) -> Var {
        let sv = self.vals[s.idx()].as_scalar();
        let out = Buffer { rows, comps: 1, data: vec![sv; rows] };
        self.push(out, Op::Broadcast(s, rows))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.vals[a.idx()].data.iter().sum();
        self.push(Buffer::scalar(s), Op::SumAll(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        assert!(ba.same_shape(bb));
        let s: f64 = ba.data.iter().zip(&bb.data).map(|(&x, &y)| x * y).sum();
        self.push(Buffer::scalar(s), Op::Dot(a, b))
    }

    /// `w[r]·a[r] + (1−w[r])·b[r]`, weights broadcast over components.
    pub fn weighted_sum(&mut self, a: Var, b: Var, w: Arc<Vec<f64>>) -> Var {
        let (ba, bb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        assert!(ba.same_shape(bb));
        assert_eq!(w.len(), ba.rows);
        let comps = ba.comps;
        let mut data = vec![0.0; ba.len()];
        for r in 0..ba.rows {
            for k in 0..comps {
                let i = r * comps + k;
                data[i] = w[r] * ba.data[i] + (1.0 - w[r]) * bb.data[i];
            }
        }
        let out = Buffer { rows: ba.rows, comps, data };
        self.push(out, Op::WeightedSum(a, b, w))
    }

    pub fn comp(&mut self, a: Var, k: usize) -> Var {
        let ba = &self.vals[a.idx()];
        assert!(k < ba.comps);
        let comps = ba.comps;
        let data = (0..ba.rows).map(|r| ba.data[r * comps + k]).collect();
        let out = Buffer { rows: ba.rows, comps: 1, data };
        self.push(out, Op::Comp(a, k))
    }

    pub fn join3(&mut self, x: Var, y: Var, z: Var) -> Var {
        let (bx, by, bz) = (&self.vals[x.idx()], &self.vals[y.idx()], &self.vals[z.idx()]);
        assert!(bx.comps == 1 && bx.same_shape(by) && bx.same_shape(bz));
        let mut data = Vec::with_capacity(bx.rows * 3);
        for r in 0..bx.rows {
            data.extend_from_slice(&[bx.data[r], by.data[r], bz.data[r]]);
        }
        let out = Buffer { rows: bx.rows, comps: 3, data };
        self.push(out, Op::Join3(x, y, z))
    }

    pub fn dot_vec_const(&mut self, a: Var, c: Arc<Vec<Vec3>>) -> Var {
        let ba = &self.vals[a.idx()];
        assert_eq!(ba.comps, 3);
        assert_eq!(c.len(), ba.rows);
        let data = (0..ba.rows)
            .map(|r| {
                ba.data[r * 3] * c[r].x + ba.data[r * 3 + 1] * c[r].y + ba.data[r * 3 + 2] * c[r].z
            })
            .collect();
        let out = Buffer { rows: ba.rows, comps: 1, data };
        self.push(out, Op::DotVecConst(a, c))
    }

    pub fn mul_vec_const(&mut self, a: Var, c: Arc<Vec<Vec3>>) -> Var {
        let ba = &self.vals[a.idx()];
        assert_eq!(ba.comps, 1);
        assert_eq!(c.len(), ba.rows);
        let mut data = Vec::with_capacity(ba.rows * 3);
        for r in 0..ba.rows {
            let s = ba.data[r];
            data.extend_from_slice(&[s * c[r].x, s * c[r].y, s * c[r].z]);
        }
        let out = Buffer { rows: ba.rows, comps: 3, data };
        self.push(out, Op::MulVecConst(a, c))
    }

    /// Multiply every component of `a`'s row r by `b[r]`.
    pub fn mul_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        assert_eq!(bb.comps, 1);
        assert_eq!(ba.rows, bb.rows);
        let comps = ba.comps;
        let mut data = ba.data.clone();
        for r in 0..ba.rows {
            for k in 0..comps {
                data[r * comps + k] *= bb.data[r];
            }
        }
        let out = Buffer { rows: ba.rows, comps, data };
        self.push(out, Op::MulColBroadcast(a, b))
    }

    pub fn upwind_select(&mut self, m: Var, a: Var, b: Var) -> Var {
        let (bm, ba, bb) = (&self.vals[m.idx()], &self.vals[a.idx()], &self.vals[b.idx()]);
        assert_eq!(bm.comps, 1);
        assert!(ba.same_shape(bb));
        assert_eq!(bm.rows, ba.rows);
        let comps = ba.comps;
        let mut data = vec![0.0; ba.len()];
        for r in 0..ba.rows {
            let src = if bm.data[r] >= 0.0 { &ba.data } else { &bb.data };
            data[r * comps..(r + 1) * comps].copy_from_slice(&src[r * comps..(r + 1) * comps]);
        }
        let out = Buffer { rows: ba.rows, comps, data };
        self.push(out, Op::UpwindSelect { m, a, b })
    }

    pub fn gather(&mut self, graph: &Arc<MeshGraph>, map: GraphMap, v: Var) -> Var {
        let bv = &self.vals[v.idx()];
        assert_eq!(bv.rows, graph.n_cells);
        let idx = graph_index(graph, map);
        let data = crate::graph::gather(&bv.data, bv.comps, idx);
        let out = Buffer { rows: idx.len(), comps: bv.comps, data };
        self.push(out, Op::Gather(Arc::clone(graph), map, v))
    }

    /// Gather arbitrary rows of `v` (e.g. probe cells).
    pub fn gather_idx(&mut self, idx: Arc<Vec<u32>>, v: Var) -> Var {
        let bv = &self.vals[v.idx()];
        let data = crate::graph::gather(&bv.data, bv.comps, &idx);
        let out = Buffer { rows: idx.len(), comps: bv.comps, data };
        if self.recording {
            let plan = Arc::new(ScatterPlan::new(&idx, bv.rows));
            self.push(out, Op::GatherIdx { idx, plan, input: v })
        } else {
            self.alloc(out)
        }
    }

    /// Deterministic scatter-add of per-edge (or per-patch-face) values into
    /// cells.
    pub fn scatter_add(&mut self, graph: &Arc<MeshGraph>, map: GraphMap, v: Var) -> Var {
        let bv = &self.vals[v.idx()];
        let plan = graph_plan(graph, map);
        let data = plan.execute(&bv.data, bv.comps);
        let out = Buffer { rows: graph.n_cells, comps: bv.comps, data };
        self.push(out, Op::ScatterAdd(Arc::clone(graph), map, v))
    }

    /// y = A x for the edge-structured matrix (diag, upper, lower).
    pub fn spmv(&mut self, pat: &Arc<CsrPattern>, diag: Var, upper: Var, lower: Var, x: Var) -> Var {
        let n = pat.n;
        let ne = pat.upper_pos.len();
        let (bd, bu, bl, bx) =
            (&self.vals[diag.idx()], &self.vals[upper.idx()], &self.vals[lower.idx()], &self.vals[x.idx()]);
        assert!(bd.rows == n && bu.rows == ne && bl.rows == ne && bx.rows == n);
        assert!(bd.comps == 1 && bu.comps == 1 && bl.comps == 1 && bx.comps == 1);
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = bd.data[i] * bx.data[i];
        }
        for e in 0..ne {
            let (o, nb) = (pat.owner[e] as usize, pat.neighbour[e] as usize);
            y[o] += bu.data[e] * bx.data[nb];
            y[nb] += bl.data[e] * bx.data[o];
        }
        let out = Buffer { rows: n, comps: 1, data: y };
        self.push(out, Op::SpMv { pat: Arc::clone(pat), diag, upper, lower, x })
    }

    /// Solve A x = b. The adjoint solves Aᵀλ = x̄ with the same options.
    pub fn linear_solve(
        &mut self,
        pat: &Arc<CsrPattern>,
        opts: SolveOpts,
        diag: Var,
        upper: Var,
        lower: Var,
        rhs: Var,
    ) -> Result<(Var, SolveReport)> {
        let (bd, bu, bl, bb) =
            (&self.vals[diag.idx()], &self.vals[upper.idx()], &self.vals[lower.idx()], &self.vals[rhs.idx()]);
        let a = assemble(pat, &bd.data, &bu.data, &bl.data)?;
        let pc = ilu0(&a)?;
        let (x, report) = solve(&a, &pc, &bb.data, None, opts)?;
        let out = Buffer { rows: pat.n, comps: 1, data: x };
        let v = self.push(out, Op::LinearSolve { pat: Arc::clone(pat), opts, diag, upper, lower, rhs });
        Ok((v, report))
    }

    /// One step of the two-element lumped outlet model:
    /// dp_c/dt = (q − p_c/R_d)/C, advanced by `dt` under `scheme`.
    /// All four inputs are 1×1; the output is the new stored pressure.
    pub fn windkessel_step(
        &mut self,
        scheme: WindkesselScheme,
        dt: f64,
        pc: Var,
        q: Var,
        rd: Var,
        c: Var,
    ) -> Var {
        let (pcv, qv, rdv, cv) = (
            self.vals[pc.idx()].as_scalar(),
            self.vals[q.idx()].as_scalar(),
            self.vals[rd.idx()].as_scalar(),
            self.vals[c.idx()].as_scalar(),
        );
        let next = windkessel_forward(scheme, dt, pcv, qv, rdv, cv);
        self.push(Buffer::scalar(next), Op::WindkesselStep { scheme, dt, pc, q, rd, c })
    }

    /// Pass a value through but poison its adjoint: pulling a nonzero
    /// cotangent across it fails with a named error instead of silently
    /// producing a wrong gradient.
    pub fn opaque(&mut self, name: &'static str, v: Var) -> Var {
        let out = self.vals[v.idx()].clone();
        self.push(out, Op::Opaque { name, input: v })
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        assert_eq!(self.vals[loss.idx()].len(), 1, "backward needs a scalar loss");
        self.backward_seeded(loss, Buffer::scalar(1.0))
    }

    /// Reverse sweep from `out` seeded with an arbitrary cotangent.
    pub fn backward_seeded(&mut self, out: Var, seed: Buffer) -> Result<()> {
        assert!(self.vals[out.idx()].same_shape(&seed), "seed shape mismatch");
        self.grads.clear();
        self.grads.resize(self.vals.len(), None);
        self.grads[out.idx()] = Some(seed);
        let Tape { vals, nodes, grads, .. } = self;
        for node in nodes.iter().rev() {
            let Some(g) = grads[node.out.idx()].clone() else { continue };
            backward_node(vals, grads, node, &g)?;
        }
        Ok(())
    }
}

fn graph_index<'g>(graph: &'g MeshGraph, map: GraphMap) -> &'g [u32] {
    match map {
        GraphMap::Owner => &graph.owner,
        GraphMap::Neighbour => &graph.neighbour,
        GraphMap::Patch(p) => &graph.patches[p].cells,
    }
}

fn graph_plan<'g>(graph: &'g MeshGraph, map: GraphMap) -> &'g ScatterPlan {
    match map {
        GraphMap::Owner => &graph.owner_plan,
        GraphMap::Neighbour => &graph.neighbour_plan,
        GraphMap::Patch(p) => &graph.patches[p].plan,
    }
}

/// In-place multiply by a constant that is either elementwise or per-row.
fn mul_arr_into(data: &mut [f64], arr: &[f64], rows: usize, comps: usize) {
    if arr.len() == data.len() {
        for (x, &c) in data.iter_mut().zip(arr) {
            *x *= c;
        }
    } else {
        debug_assert_eq!(arr.len(), rows);
        for r in 0..rows {
            for k in 0..comps {
                data[r * comps + k] *= arr[r];
            }
        }
    }
}

pub(crate) fn windkessel_forward(scheme: WindkesselScheme, dt: f64, pc: f64, q: f64, rd: f64, c: f64) -> f64 {
    match scheme {
        WindkesselScheme::Exact => {
            let e = (-dt / (rd * c)).exp();
            pc * e + rd * q * (1.0 - e)
        }
        WindkesselScheme::ForwardEuler => pc + dt * (q - pc / rd) / c,
        WindkesselScheme::BackwardEuler => (pc + dt * q / c) / (1.0 + dt / (rd * c)),
    }
}

/// Partials (∂pc′/∂pc, ∂pc′/∂q, ∂pc′/∂R_d, ∂pc′/∂C) of one update step.
fn windkessel_partials(
    scheme: WindkesselScheme,
    dt: f64,
    pc: f64,
    q: f64,
    rd: f64,
    c: f64,
) -> (f64, f64, f64, f64) {
    match scheme {
        WindkesselScheme::Exact => {
            let e = (-dt / (rd * c)).exp();
            let de_drd = e * dt / (rd * rd * c);
            let de_dc = e * dt / (rd * c * c);
            (
                e,
                rd * (1.0 - e),
                q * (1.0 - e) + (pc - rd * q) * de_drd,
                (pc - rd * q) * de_dc,
            )
        }
        WindkesselScheme::ForwardEuler => (
            1.0 - dt / (rd * c),
            dt / c,
            dt * pc / (rd * rd * c),
            -dt * (q - pc / rd) / (c * c),
        ),
        WindkesselScheme::BackwardEuler => {
            let den = 1.0 + dt / (rd * c);
            let num = pc + dt * q / c;
            (
                1.0 / den,
                dt / (c * den),
                num * dt / (rd * rd * c * den * den),
                -dt * q / (c * c * den) + num * dt / (rd * c * c * den * den),
            )
        }
    }
}

/// Adjoint of `x = A⁻¹ b` for the edge-structured matrix: solves Aᵀλ = x̄
/// and returns (b̄, diaḡ, upper̄, lower̄) = (λ, −λ∘x, −λ_o x_n, −λ_n x_o),
/// plus the adjoint solve's report. Only x and x̄ are consumed, so memory is
/// independent of how many iterations the forward solve took.
pub fn linear_solve_adjoint(
    pat: &Arc<CsrPattern>,
    diag: &[f64],
    upper: &[f64],
    lower: &[f64],
    x: &[f64],
    x_bar: &[f64],
    opts: SolveOpts,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, SolveReport)> {
    // Swapping the per-edge arrays transposes the matrix.
    let at = assemble(pat, diag, lower, upper)?;
    let pc = ilu0(&at)?;
    let (lambda, report) = solve(&at, &pc, x_bar, None, opts)?;
    let n = pat.n;
    let ne = pat.upper_pos.len();
    let mut diag_bar = vec![0.0; n];
    for i in 0..n {
        diag_bar[i] = -lambda[i] * x[i];
    }
    let mut upper_bar = vec![0.0; ne];
    let mut lower_bar = vec![0.0; ne];
    for e in 0..ne {
        let (o, nb) = (pat.owner[e] as usize, pat.neighbour[e] as usize);
        upper_bar[e] = -lambda[o] * x[nb];
        lower_bar[e] = -lambda[nb] * x[o];
    }
    Ok((lambda, diag_bar, upper_bar, lower_bar, report))
}

fn add_grad(
    grads: &mut [Option<Buffer>],
    vals: &[Buffer],
    v: Var,
    contribution: impl FnOnce(&mut Buffer),
) {
    let slot = &mut grads[v.idx()];
    if slot.is_none() {
        *slot = Some(vals[v.idx()].zeros_like());
    }
    contribution(slot.as_mut().unwrap());
}

fn backward_node(
    vals: &[Buffer],
    grads: &mut [Option<Buffer>],
    node: &Node,
    g: &Buffer,
) -> Result<()> {
    let out = node.out;
    match &node.op {
        Op::Add(a, b) => {
            for &v in &[*a, *b] {
                add_grad(grads, vals, v, |gb| {
                    for (gi, &go) in gb.data.iter_mut().zip(&g.data) {
                        *gi += go;
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            add_grad(grads, vals, *a, |gb| {
                for (gi, &go) in gb.data.iter_mut().zip(&g.data) {
                    *gi += go;
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for (gi, &go) in gb.data.iter_mut().zip(&g.data) {
                    *gi -= go;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&vals[a.idx()], &vals[b.idx()]);
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] * vb.data[i];
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] * va.data[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (vb, vo) = (&vals[b.idx()], &vals[out.idx()]);
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] / vb.data[i];
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] -= g.data[i] * vo.data[i] / vb.data[i];
                }
            });
        }
        Op::ScaleVar(a, s) => {
            let sv = vals[s.idx()].as_scalar();
            let va = &vals[a.idx()];
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] * sv;
                }
            });
            let acc: f64 = va.data.iter().zip(&g.data).map(|(&x, &go)| x * go).sum();
            add_grad(grads, vals, *s, |gb| gb.data[0] += acc);
        }
        Op::ScaleConst(a, cst) => {
            let cst = *cst;
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] * cst;
                }
            });
        }
        Op::AddConstArr(a, _) => {
            add_grad(grads, vals, *a, |gb| {
                for (gi, &go) in gb.data.iter_mut().zip(&g.data) {
                    *gi += go;
                }
            });
        }
        Op::MulConstArr(a, arr) => {
            let va = &vals[a.idx()];
            let (rows, comps) = (va.rows, va.comps);
            add_grad(grads, vals, *a, |gb| {
                let mut scaled = g.data.clone();
                mul_arr_into(&mut scaled, arr, rows, comps);
                for (gi, s) in gb.data.iter_mut().zip(scaled) {
                    *gi += s;
                }
            });
        }
        Op::Exp(a) => {
            let vo = &vals[out.idx()];
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += g.data[i] * vo.data[i];
                }
            });
        }
        Op::Recip(a) => {
            let vo = &vals[out.idx()];
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] -= g.data[i] * vo.data[i] * vo.data[i];
                }
            });
        }
        Op::MaxZero(a) => {
            let va = &vals[a.idx()];
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    if va.data[i] > 0.0 {
                        gb.data[i] += g.data[i];
                    }
                }
            });
        }
        Op::MinZero(a) => {
            let va = &vals[a.idx()];
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    if va.data[i] < 0.0 {
                        gb.data[i] += g.data[i];
                    }
                }
            });
        }
        Op::Broadcast(s, _) => {
            let acc: f64 = g.data.iter().sum();
            add_grad(grads, vals, *s, |gb| gb.data[0] += acc);
        }
        Op::SumAll(a) => {
            let go = g.data[0];
            add_grad(grads, vals, *a, |gb| {
                for gi in gb.data.iter_mut() {
                    *gi += go;
                }
            });
        }
        Op::Dot(a, b) => {
            let go = g.data[0];
            let (va, vb) = (&vals[a.idx()], &vals[b.idx()]);
            add_grad(grads, vals, *a, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += go * vb.data[i];
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for i in 0..gb.data.len() {
                    gb.data[i] += go * va.data[i];
                }
            });
        }
        Op::WeightedSum(a, b, w) => {
            let comps = vals[a.idx()].comps;
            add_grad(grads, vals, *a, |gb| {
                for r in 0..w.len() {
                    for k in 0..comps {
                        gb.data[r * comps + k] += g.data[r * comps + k] * w[r];
                    }
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for r in 0..w.len() {
                    for k in 0..comps {
                        gb.data[r * comps + k] += g.data[r * comps + k] * (1.0 - w[r]);
                    }
                }
            });
        }
        Op::Comp(a, k) => {
            let comps = vals[a.idx()].comps;
            let k = *k;
            add_grad(grads, vals, *a, |gb| {
                for r in 0..g.rows {
                    gb.data[r * comps + k] += g.data[r];
                }
            });
        }
        Op::Join3(x, y, z) => {
            for (ci, &v) in [*x, *y, *z].iter().enumerate() {
                add_grad(grads, vals, v, |gb| {
                    for r in 0..gb.rows {
                        gb.data[r] += g.data[r * 3 + ci];
                    }
                });
            }
        }
        Op::DotVecConst(a, c) => {
            add_grad(grads, vals, *a, |gb| {
                for r in 0..c.len() {
                    gb.data[r * 3] += g.data[r] * c[r].x;
                    gb.data[r * 3 + 1] += g.data[r] * c[r].y;
                    gb.data[r * 3 + 2] += g.data[r] * c[r].z;
                }
            });
        }
        Op::MulVecConst(a, c) => {
            add_grad(grads, vals, *a, |gb| {
                for r in 0..c.len() {
                    gb.data[r] +=
                        g.data[r * 3] * c[r].x + g.data[r * 3 + 1] * c[r].y + g.data[r * 3 + 2] * c[r].z;
                }
            });
        }
        Op::MulColBroadcast(a, b) => {
            let (va, vb) = (&vals[a.idx()], &vals[b.idx()]);
            let comps = va.comps;
            add_grad(grads, vals, *a, |gb| {
                for r in 0..vb.rows {
                    for k in 0..comps {
                        gb.data[r * comps + k] += g.data[r * comps + k] * vb.data[r];
                    }
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for r in 0..vb.rows {
                    let mut acc = 0.0;
                    for k in 0..comps {
                        acc += g.data[r * comps + k] * va.data[r * comps + k];
                    }
                    gb.data[r] += acc;
                }
            });
        }
        Op::UpwindSelect { m, a, b } => {
            // The mask is piecewise constant: no cotangent flows into `m`.
            let vm = &vals[m.idx()];
            let comps = vals[a.idx()].comps;
            add_grad(grads, vals, *a, |gb| {
                for r in 0..vm.rows {
                    if vm.data[r] >= 0.0 {
                        for k in 0..comps {
                            gb.data[r * comps + k] += g.data[r * comps + k];
                        }
                    }
                }
            });
            add_grad(grads, vals, *b, |gb| {
                for r in 0..vm.rows {
                    if vm.data[r] < 0.0 {
                        for k in 0..comps {
                            gb.data[r * comps + k] += g.data[r * comps + k];
                        }
                    }
                }
            });
        }
        Op::Gather(graph, map, v) => {
            // Adjoint of gather is the deterministic scatter-add.
            let plan = graph_plan(graph, *map);
            let comps = g.comps;
            add_grad(grads, vals, *v, |gb| plan.add_into(&g.data, comps, &mut gb.data));
        }
        Op::GatherIdx { plan, input, .. } => {
            let comps = g.comps;
            add_grad(grads, vals, *input, |gb| plan.add_into(&g.data, comps, &mut gb.data));
        }
        Op::ScatterAdd(graph, map, v) => {
            // Adjoint of scatter-add is the gather.
            let idx = graph_index(graph, *map);
            let comps = g.comps;
            add_grad(grads, vals, *v, |gb| {
                for (e, &cell) in idx.iter().enumerate() {
                    for k in 0..comps {
                        gb.data[e * comps + k] += g.data[cell as usize * comps + k];
                    }
                }
            });
        }
        Op::SpMv { pat, diag, upper, lower, x } => {
            let (vd, vu, vl, vx) =
                (&vals[diag.idx()], &vals[upper.idx()], &vals[lower.idx()], &vals[x.idx()]);
            let ne = pat.upper_pos.len();
            // x̄ += Aᵀ ȳ
            add_grad(grads, vals, *x, |gb| {
                for i in 0..pat.n {
                    gb.data[i] += vd.data[i] * g.data[i];
                }
                for e in 0..ne {
                    let (o, nb) = (pat.owner[e] as usize, pat.neighbour[e] as usize);
                    gb.data[nb] += vu.data[e] * g.data[o];
                    gb.data[o] += vl.data[e] * g.data[nb];
                }
            });
            add_grad(grads, vals, *diag, |gb| {
                for i in 0..pat.n {
                    gb.data[i] += g.data[i] * vx.data[i];
                }
            });
            add_grad(grads, vals, *upper, |gb| {
                for e in 0..ne {
                    let (o, nb) = (pat.owner[e] as usize, pat.neighbour[e] as usize);
                    gb.data[e] += g.data[o] * vx.data[nb];
                }
            });
            add_grad(grads, vals, *lower, |gb| {
                for e in 0..ne {
                    let (o, nb) = (pat.owner[e] as usize, pat.neighbour[e] as usize);
                    gb.data[e] += g.data[nb] * vx.data[o];
                }
            });
        }
        Op::LinearSolve { pat, opts, diag, upper, lower, rhs } => {
            let (vd, vu, vl) = (&vals[diag.idx()], &vals[upper.idx()], &vals[lower.idx()]);
            let x = &vals[out.idx()];
            let (b_bar, d_bar, u_bar, l_bar, _) =
                linear_solve_adjoint(pat, &vd.data, &vu.data, &vl.data, &x.data, &g.data, *opts)?;
            add_grad(grads, vals, *rhs, |gb| {
                for (gi, &c) in gb.data.iter_mut().zip(&b_bar) {
                    *gi += c;
                }
            });
            add_grad(grads, vals, *diag, |gb| {
                for (gi, &c) in gb.data.iter_mut().zip(&d_bar) {
                    *gi += c;
                }
            });
            add_grad(grads, vals, *upper, |gb| {
                for (gi, &c) in gb.data.iter_mut().zip(&u_bar) {
                    *gi += c;
                }
            });
            add_grad(grads, vals, *lower, |gb| {
                for (gi, &c) in gb.data.iter_mut().zip(&l_bar) {
                    *gi += c;
                }
            });
        }
        Op::WindkesselStep { scheme, dt, pc, q, rd, c } => {
            let (pcv, qv, rdv, cv) = (
                vals[pc.idx()].as_scalar(),
                vals[q.idx()].as_scalar(),
                vals[rd.idx()].as_scalar(),
                vals[c.idx()].as_scalar(),
            );
            let (dpc, dq, drd, dc) = windkessel_partials(*scheme, *dt, pcv, qv, rdv, cv);
            let go = g.data[0];
            add_grad(grads, vals, *pc, |gb| gb.data[0] += go * dpc);
            add_grad(grads, vals, *q, |gb| gb.data[0] += go * dq);
            add_grad(grads, vals, *rd, |gb| gb.data[0] += go * drd);
            add_grad(grads, vals, *c, |gb| gb.data[0] += go * dc);
        }
        Op::Opaque { name, .. } => {
            if g.data.iter().any(|&x| x != 0.0) {
                return Err(Error::NonDifferentiableOp { name: name.to_string() });
            }
        }
    }
    Ok(())
}
