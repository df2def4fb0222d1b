//! Boundary conditions: per-patch face values for Dirichlet, gradient, inflow,
//! and lumped-parameter RCR outlet kinds, plus the RCR state update and its
//! initial-guess estimator.

use crate::error::{Error, Result};
use crate::graph::GraphPatch;
use crate::math::Vec3;
use crate::tape::{windkessel_forward, WindkesselScheme};

/// Piecewise-linear time series. Non-periodic tables reject evaluation outside
/// their span; periodic tables wrap `t` into it.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeTable {
    t: Vec<f64>,
    v: Vec<f64>,
    periodic: bool,
}

impl TimeTable {
    /// `t` must be strictly increasing and at least two samples long.
    pub fn new(t: Vec<f64>, v: Vec<f64>, periodic: bool) -> Result<TimeTable> {
        if t.len() < 2 || t.len() != v.len() {
            return Err(Error::ShapeError {
                context: "time table".into(),
                expected: "matching t/v lengths >= 2".into(),
                got: format!("t: {}, v: {}", t.len(), v.len()),
            });
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::ShapeError {
                context: "time table".into(),
                expected: "strictly increasing sample times".into(),
                got: "non-monotone t".into(),
            });
        }
        Ok(TimeTable { t, v, periodic })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t[0], *self.t.last().unwrap())
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let (t0, t1) = self.span();
        let tq = if self.periodic {
            t0 + (t - t0).rem_euclid(t1 - t0)
        } else if t < t0 || t > t1 {
            return Err(Error::ExtrapolationError { t, t0, t1 });
        } else {
            t
        };
        let k = match self.t.binary_search_by(|s| s.partial_cmp(&tq).unwrap()) {
            Ok(i) => return Ok(self.v[i]),
            Err(i) => i - 1, // tq > t0 here, so i >= 1
        };
        let f = (tq - self.t[k]) / (self.t[k + 1] - self.t[k]);
        Ok(self.v[k] + f * (self.v[k + 1] - self.v[k]))
    }
}

/// Uniform prescribed value: one scalar or one vector, matching the field rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BcValue {
    Scalar(f64),
    Vector(Vec3),
}

impl BcValue {
    pub fn comps(&self) -> usize {
        match self {
            BcValue::Scalar(_) => 1,
            BcValue::Vector(_) => 3,
        }
    }

    fn component(&self, c: usize) -> f64 {
        match self {
            BcValue::Scalar(s) => *s,
            BcValue::Vector(v) => [v.x, v.y, v.z][c],
        }
    }
}

#[derive(Clone, Debug)]
pub enum BcKind {
    FixedValue(BcValue),
    /// Outward-normal gradient per component; face value = cell + g·|d|.
    FixedGradient(BcValue),
    ZeroGradient,
    /// 2D cases: contributes zero flux everywhere; evaluates to the cell value.
    Empty,
    /// Axisymmetric profile u_max(1 - r²/R²)·n̂ about `center`, optionally
    /// scaled by a waveform in time.
    ParabolicInflow {
        u_max: f64,
        center: Vec3,
        radius: f64,
        normal: Vec3,
        modulation: Option<TimeTable>,
    },
    /// table(t) × shape; shape carries the field rank (unit vector for
    /// velocity inflow, Scalar(1.0) for plain scalars).
    TimeVaryingInflow { table: TimeTable, shape: BcValue },
    /// Three-element RCR outlet: uniform pressure `p_o` from the lumped model,
    /// zero-gradient velocity. The pressure value lives in [`WindkesselState`]
    /// and is threaded in through [`BcContext`].
    WindkesselRcr {
        params: WindkesselParams,
        scheme: WindkesselScheme,
    },
}

impl BcKind {
    pub fn name(&self) -> &'static str {
        match self {
            BcKind::FixedValue(_) => "fixedValue",
            BcKind::FixedGradient(_) => "fixedGradient",
            BcKind::ZeroGradient => "zeroGradient",
            BcKind::Empty => "empty",
            BcKind::ParabolicInflow { .. } => "parabolicInflow",
            BcKind::TimeVaryingInflow { .. } => "timeVaryingInflow",
            BcKind::WindkesselRcr { .. } => "windkesselRCR",
        }
    }
}

/// One boundary condition: which patch, which field, what rule.
#[derive(Clone, Debug)]
pub struct BoundarySpec {
    pub patch: String,
    pub field: String,
    pub kind: BcKind,
}

/// All boundary conditions of a case; lookup is by (field, patch).
#[derive(Clone, Debug, Default)]
pub struct BcSet {
    specs: Vec<BoundarySpec>,
}

impl BcSet {
    /// Each (field, patch) pair must appear at most once.
    pub fn new(specs: Vec<BoundarySpec>) -> BcSet {
        debug_assert!({
            let mut keys: Vec<(&str, &str)> = specs
                .iter()
                .map(|s| (s.field.as_str(), s.patch.as_str()))
                .collect();
            keys.sort();
            keys.windows(2).all(|w| w[0] != w[1])
        });
        BcSet { specs }
    }

    pub fn push(&mut self, spec: BoundarySpec) {
        self.specs.push(spec);
    }

    pub fn get(&self, field: &str, patch: &str) -> Result<&BoundarySpec> {
        self.specs
            .iter()
            .find(|s| s.field == field && s.patch == patch)
            .ok_or_else(|| Error::MissingBoundarySpec {
                field: field.into(),
                patch: patch.into(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &BoundarySpec> {
        self.specs.iter()
    }
}

/// Extra state a boundary evaluation may need beyond the spec itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct BcContext {
    pub t: f64,
    /// Imposed outlet pressure of this patch's lumped model, if any.
    pub windkessel_po: f64,
}

/// Evaluate prescribed face values over one patch.
///
/// `cell_vals` are the owner-cell values gathered onto the patch
/// (`patch.cells.len() × comps`, row-major). The result has the same shape.
pub fn boundary_face_values(
    spec: &BoundarySpec,
    patch: &GraphPatch,
    cell_vals: &[f64],
    comps: usize,
    ctx: BcContext,
) -> Result<Vec<f64>> {
    let n = patch.cells.len();
    if cell_vals.len() != n * comps {
        return Err(Error::ShapeError {
            context: format!("boundary values on patch '{}'", patch.name),
            expected: format!("{} x {comps}", n),
            got: format!("{}", cell_vals.len()),
        });
    }
    let rank_err = |expected: usize| Error::ShapeError {
        context: format!(
            "{} on patch '{}' for field '{}'",
            spec.kind.name(),
            patch.name,
            spec.field
        ),
        expected: format!("{expected} components"),
        got: format!("{comps}"),
    };
    match &spec.kind {
        BcKind::FixedValue(v) => {
            if v.comps() != comps {
                return Err(rank_err(v.comps()));
            }
            let mut out = vec![0.0; n * comps];
            for i in 0..n {
                for c in 0..comps {
                    out[i * comps + c] = v.component(c);
                }
            }
            Ok(out)
        }
        BcKind::FixedGradient(g) => {
            if g.comps() != comps {
                return Err(rank_err(g.comps()));
            }
            let mut out = vec![0.0; n * comps];
            for i in 0..n {
                let dist = patch.d[i].norm();
                for c in 0..comps {
                    out[i * comps + c] = cell_vals[i * comps + c] + g.component(c) * dist;
                }
            }
            Ok(out)
        }
        BcKind::ZeroGradient | BcKind::Empty => Ok(cell_vals.to_vec()),
        BcKind::ParabolicInflow {
            u_max,
            center,
            radius,
            normal,
            modulation,
        } => {
            if comps != 3 {
                return Err(rank_err(3));
            }
            let scale = match modulation {
                Some(table) => table.eval(ctx.t)?,
                None => 1.0,
            };
            let nh = normal.normalized();
            let mut out = vec![0.0; n * 3];
            for i in 0..n {
                let rel = patch.xf[i] - *center;
                let radial = rel - nh * rel.dot(nh);
                // Faces outside the nominal radius get zero, not reversed flow.
                let shape = (1.0 - radial.dot(radial) / (radius * radius)).max(0.0);
                let u = nh * (u_max * scale * shape);
                out[i * 3] = u.x;
                out[i * 3 + 1] = u.y;
                out[i * 3 + 2] = u.z;
            }
            Ok(out)
        }
        BcKind::TimeVaryingInflow { table, shape } => {
            if shape.comps() != comps {
                return Err(rank_err(shape.comps()));
            }
            let s = table.eval(ctx.t)?;
            let mut out = vec![0.0; n * comps];
            for i in 0..n {
                for c in 0..comps {
                    out[i * comps + c] = s * shape.component(c);
                }
            }
            Ok(out)
        }
        BcKind::WindkesselRcr { .. } => {
            if comps != 1 {
                return Err(rank_err(1));
            }
            Ok(vec![ctx.windkessel_po; n])
        }
    }
}

/// Net volumetric flow out of a patch: Q = Σ_f U_f · S_f with face velocities
/// in patch order (`patch.cells.len() × 3`).
pub fn outlet_flow_rate(u_faces: &[f64], patch: &GraphPatch) -> Result<f64> {
    let n = patch.cells.len();
    if u_faces.len() != n * 3 {
        return Err(Error::ShapeError {
            context: format!("outlet flow on patch '{}'", patch.name),
            expected: format!("{n} x 3"),
            got: format!("{}", u_faces.len()),
        });
    }
    let mut q = 0.0;
    for i in 0..n {
        let u = Vec3::new(u_faces[i * 3], u_faces[i * 3 + 1], u_faces[i * 3 + 2]);
        q += u.dot(patch.sf[i]);
    }
    Ok(q)
}

/// Three-element Windkessel (RCR) parameters, CGS units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindkesselParams {
    /// Proximal resistance (dyn·s/cm⁵).
    pub rp: f64,
    /// Compliance (cm⁵/(dyn·s)).
    pub c: f64,
    /// Distal resistance (dyn·s/cm⁵).
    pub rd: f64,
}

impl WindkesselParams {
    pub fn validate(&self) -> Result<()> {
        if self.rp <= 0.0 || self.c <= 0.0 || self.rd <= 0.0 {
            return Err(Error::InvalidWindkesselParams {
                msg: format!(
                    "Rp, C, Rd must all be positive, got ({}, {}, {})",
                    self.rp, self.c, self.rd
                ),
            });
        }
        Ok(())
    }
}

/// Per-outlet lumped-model state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindkesselState {
    /// Capacitor pressure (dyn/cm²).
    pub pc: f64,
    /// Imposed outlet pressure = pc' + Rp·Q (dyn/cm²).
    pub po: f64,
    pub scheme: WindkesselScheme,
}

impl WindkesselState {
    pub fn new(pc: f64, scheme: WindkesselScheme) -> WindkesselState {
        WindkesselState { pc, po: pc, scheme }
    }
}

/// Advance the capacitor pressure one step under flow `q` and recompute the
/// imposed outlet pressure.
///
/// Exact: pc' = pc·e^{-dt/(Rd·C)} + Rd·q·(1 - e^{-dt/(Rd·C)});
/// forward Euler: pc' = pc + dt(q - pc/Rd)/C;
/// backward Euler: pc' = (pc + dt·q/C)/(1 + dt/(Rd·C)).
pub fn windkessel_step(
    state: &WindkesselState,
    params: &WindkesselParams,
    q: f64,
    dt: f64,
) -> Result<WindkesselState> {
    params.validate()?;
    debug_assert!(dt > 0.0);
    let pc = windkessel_forward(state.scheme, dt, state.pc, q, params.rd, params.c);
    Ok(WindkesselState {
        pc,
        po: pc + params.rp * q,
        scheme: state.scheme,
    })
}

/// Initial RCR estimates from an inlet pressure waveform and mean outlet
/// flows: R_tot = (P̄ - P_v)/Q̄ split as (γ, 1-γ), C = τ/R_d with τ from a
/// log-linear least-squares fit of P - P_v over the trailing
/// `diastolic_fraction` of the waveform.
pub fn estimate_rcr_initial(
    p_inlet: &TimeTable,
    q_mean: &[f64],
    gamma: f64,
    p_v: f64,
    diastolic_fraction: f64,
) -> Result<Vec<WindkesselParams>> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::InvalidWindkesselParams {
            msg: format!("resistance split gamma must lie in (0, 1), got {gamma}"),
        });
    }
    if !(0.0 < diastolic_fraction && diastolic_fraction < 1.0) {
        return Err(Error::InvalidWindkesselParams {
            msg: format!("diastolic fraction must lie in (0, 1), got {diastolic_fraction}"),
        });
    }
    if let Some(&qm) = q_mean.iter().find(|&&q| q <= 0.0) {
        return Err(Error::InvalidWindkesselParams {
            msg: format!("mean outlet flow must be positive, got {qm}"),
        });
    }
    let (t0, t1) = p_inlet.span();
    let ts = p_inlet.times();
    let ps = p_inlet.values();
    // Trapezoidal mean over the full waveform (samples may be non-uniform).
    let mut integral = 0.0;
    for k in 0..ts.len() - 1 {
        integral += 0.5 * (ps[k] + ps[k + 1]) * (ts[k + 1] - ts[k]);
    }
    let p_mean = integral / (t1 - t0);
    let tau = fit_decay_tau(p_inlet, p_v, diastolic_fraction)?;
    Ok(q_mean
        .iter()
        .map(|&qm| {
            let r_tot = (p_mean - p_v) / qm;
            let rd = (1.0 - gamma) * r_tot;
            WindkesselParams {
                rp: gamma * r_tot,
                c: tau / rd,
                rd,
            }
        })
        .collect())
}

/// Time constant of A·e^{-t/τ} fitted to P - P_v over the trailing
/// `fraction` of the waveform (least squares on ln(P - P_v)).
pub fn fit_decay_tau(p_inlet: &TimeTable, p_v: f64, fraction: f64) -> Result<f64> {
    let (t0, t1) = p_inlet.span();
    let t_start = t1 - fraction * (t1 - t0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &p) in p_inlet.times().iter().zip(p_inlet.values()) {
        if t < t_start {
            continue;
        }
        let dp = p - p_v;
        if dp <= 0.0 {
            return Err(Error::DecayFitError {
                msg: format!("pressure {p} not above venous pressure {p_v} at t = {t}"),
            });
        }
        xs.push(t);
        ys.push(dp.ln());
    }
    if xs.len() < 2 {
        return Err(Error::DecayFitError {
            msg: format!("only {} samples in the diastolic segment", xs.len()),
        });
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if slope >= 0.0 {
        return Err(Error::DecayFitError {
            msg: format!("fitted decay rate {slope:.3e} is not negative"),
        });
    }
    Ok(-1.0 / slope)
}
