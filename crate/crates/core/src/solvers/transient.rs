//! Time-marching driver around the pressure–velocity step: fixed-step or
//! run-to-steady loops, per-step residual records, and a CSV log writer.

use std::path::Path;

use crate::bc::BcSet;
use crate::error::{Error, Result};
use crate::fvops::FvCtx;
use crate::solvers::piso::{piso_step, FieldState, PisoConfig};

#[derive(Clone, Copy, Debug)]
pub struct TransientConfig {
    pub dt: f64,
    /// Upper bound on steps taken (exact count unless steady mode stops
    /// earlier).
    pub n_steps: usize,
    /// Steady-state mode: stop once ‖ΔU‖∞/dt drops below this rate.
    pub steady_tol: Option<f64>,
    /// Invoke the write callback every this many steps; 0 disables it.
    pub write_interval: usize,
}

impl TransientConfig {
    pub fn fixed(dt: f64, n_steps: usize) -> TransientConfig {
        TransientConfig { dt, n_steps, steady_tol: None, write_interval: 0 }
    }

    pub fn to_steady(dt: f64, max_steps: usize, tol: f64) -> TransientConfig {
        TransientConfig { dt, n_steps: max_steps, steady_tol: Some(tol), write_interval: 0 }
    }
}

/// One row of the residual log.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// Relative momentum-equation residuals of the pre-step field, per
    /// velocity component.
    pub momentum_residuals: [f64; 3],
    /// Pressure solver iterations summed over correctors.
    pub pressure_iterations: usize,
    pub max_divergence: f64,
}

pub struct TrajectorySummary {
    pub state: FieldState,
    pub steps_run: usize,
    /// True when steady mode hit its rate tolerance before the step cap.
    pub reached_steady: bool,
    pub records: Vec<StepRecord>,
}

/// March the flow `n_steps` steps (or to steady state), invoking `write`
/// with the running state at every write interval. Step failures surface
/// with their step index attached.
pub fn run_transient(
    ctx: &FvCtx,
    cfg: &PisoConfig,
    bcs: &BcSet,
    initial: FieldState,
    tcfg: &TransientConfig,
    mut write: impl FnMut(usize, &FieldState) -> Result<()>,
) -> Result<TrajectorySummary> {
    let mut state = initial;
    let mut records = Vec::new();
    let mut reached_steady = false;
    let mut steps_run = 0;
    for step in 0..tcfg.n_steps {
        let (next, report) =
            piso_step(ctx, cfg, bcs, &state, tcfg.dt, step).map_err(|e| tag_step(step, e))?;
        let rate = state
            .u
            .iter()
            .zip(&next.u)
            .map(|(a, b)| {
                (a.x - b.x)
                    .abs()
                    .max((a.y - b.y).abs())
                    .max((a.z - b.z).abs())
            })
            .fold(0.0f64, f64::max)
            / tcfg.dt;
        records.push(StepRecord {
            step,
            t: next.t,
            momentum_residuals: [
                report.momentum[0].initial_residual,
                report.momentum[1].initial_residual,
                report.momentum[2].initial_residual,
            ],
            pressure_iterations: report.pressure.iter().map(|r| r.iterations).sum(),
            max_divergence: report.max_div,
        });
        state = next;
        steps_run = step + 1;
        if tcfg.write_interval > 0 && steps_run % tcfg.write_interval == 0 {
            write(steps_run, &state)?;
        }
        if let Some(tol) = tcfg.steady_tol {
            if rate < tol {
                reached_steady = true;
                break;
            }
        }
    }
    Ok(TrajectorySummary { state, steps_run, reached_steady, records })
}

/// Attach the step index to errors that don't already carry one.
fn tag_step(step: usize, e: Error) -> Error {
    match e {
        e @ (Error::NumericalBlowup { .. }
        | Error::ContinuityViolation { .. }
        | Error::StepFailed { .. }) => e,
        other => Error::StepFailed { step, source: Box::new(other) },
    }
}

/// Write the residual log as CSV.
pub fn write_residual_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut s =
        String::from("step,time,res_ux,res_uy,res_uz,pressure_iterations,max_divergence\n");
    for r in records {
        s.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}\n",
            r.step,
            r.t,
            r.momentum_residuals[0],
            r.momentum_residuals[1],
            r.momentum_residuals[2],
            r.pressure_iterations,
            r.max_divergence,
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}
