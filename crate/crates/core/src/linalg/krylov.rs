//! Preconditioned Krylov solvers: CG, BiCGStab, and restarted GMRES.
//!
//! Convergence is judged on the true residual 2-norm relative to ‖b‖. All
//! three methods are strictly sequential and allocation-stable, so repeated
//! solves of the same system are bit-identical.

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Preconditioner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KrylovMethod {
    Cg,
    BiCgStab,
    Gmres,
}

impl KrylovMethod {
    pub fn name(self) -> &'static str {
        match self {
            KrylovMethod::Cg => "CG",
            KrylovMethod::BiCgStab => "BiCGStab",
            KrylovMethod::Gmres => "GMRES",
        }
    }

    pub fn parse(s: &str) -> Option<KrylovMethod> {
        match s {
            "cg" | "CG" | "PCG" => Some(KrylovMethod::Cg),
            "bicgstab" | "BiCGStab" | "PBiCGStab" | "PBiCG" => Some(KrylovMethod::BiCgStab),
            "gmres" | "GMRES" => Some(KrylovMethod::Gmres),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOpts {
    pub method: KrylovMethod,
    /// Relative tolerance on ‖b − Ax‖₂ / ‖b‖₂.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub method: &'static str,
    pub iterations: usize,
    /// ‖b − Ax₀‖ / ‖b‖ before the solve.
    pub initial_residual: f64,
    /// ‖b − Ax‖ / ‖b‖ on exit.
    pub final_residual: f64,
    /// Absolute residual threshold the solve converged against (tol·‖b‖).
    pub abs_tol: f64,
    pub converged: bool,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve A x = b with the chosen method. `x0` seeds the iteration (zero if
/// absent). Non-convergence is an error carrying the best iterate so the
/// caller can inspect or accept it.
pub fn solve(
    a: &CsrMatrix,
    precond: &dyn Preconditioner,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: SolveOpts,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.pat.n;
    assert_eq!(b.len(), n);
    let bnorm = norm2(b);
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    if bnorm == 0.0 {
        x.fill(0.0);
        let report = SolveReport {
            method: opts.method.name(),
            iterations: 0,
            initial_residual: 0.0,
            final_residual: 0.0,
            abs_tol: 0.0,
            converged: true,
        };
        return Ok((x, report));
    }
    let abs_tol = opts.tol * bnorm;
    // Iterate on b/‖b‖ so the breakdown guards see O(1) quantities whatever
    // the scale of b; the iterates are scaled back afterwards.
    let bs: Vec<f64> = b.iter().map(|v| v / bnorm).collect();
    for xi in x.iter_mut() {
        *xi /= bnorm;
    }
    let (iterations, converged) = match opts.method {
        KrylovMethod::Cg => cg(a, precond, &bs, &mut x, opts.tol, opts.max_iter)?,
        KrylovMethod::BiCgStab => bicgstab(a, precond, &bs, &mut x, opts.tol, opts.max_iter)?,
        KrylovMethod::Gmres => gmres(a, precond, &bs, &mut x, opts.tol, opts.max_iter, 30)?,
    };
    for xi in x.iter_mut() {
        *xi *= bnorm;
    }
    let initial = match x0 {
        Some(x0) => norm2(&a.residual(b, x0)) / bnorm,
        None => 1.0,
    };
    let final_residual = norm2(&a.residual(b, &x)) / bnorm;
    let report = SolveReport {
        method: opts.method.name(),
        iterations,
        initial_residual: initial,
        final_residual,
        abs_tol,
        converged,
    };
    if !converged {
        return Err(Error::NotConverged {
            method: opts.method.name().to_string(),
            residual: final_residual,
            iterations,
            best: x,
        });
    }
    Ok((x, report))
}

fn breakdown(method: &str, scalar: &str, value: f64) -> Error {
    Error::SolverBreakdown { method: method.to_string(), scalar: scalar.to_string(), value }
}

fn cg(
    a: &CsrMatrix,
    m: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    abs_tol: f64,
    max_iter: usize,
) -> Result<(usize, bool)> {
    let n = b.len();
    let mut r = a.residual(b, x);
    if norm2(&r) <= abs_tol {
        return Ok((0, true));
    }
    let mut z = vec![0.0; n];
    m.apply(a, &r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=max_iter {
        a.matvec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if pq.abs() < 1e-30 {
            return Err(breakdown("CG", "p·Ap", pq));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if norm2(&r) <= abs_tol {
            return Ok((it, true));
        }
        m.apply(a, &r, &mut z);
        let rz_new = dot(&r, &z);
        if rz.abs() < 1e-30 {
            return Err(breakdown("CG", "r·z", rz));
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((max_iter, false))
}

fn bicgstab(
    a: &CsrMatrix,
    m: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    abs_tol: f64,
    max_iter: usize,
) -> Result<(usize, bool)> {
    let n = b.len();
    let mut r = a.residual(b, x);
    if norm2(&r) <= abs_tol {
        return Ok((0, true));
    }
    let rhat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&rhat, &r);
        if rho_new.abs() < 1e-30 {
            return Err(breakdown("BiCGStab", "rho", rho_new));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        m.apply(a, &p, &mut phat);
        a.matvec_into(&phat, &mut v);
        let rv = dot(&rhat, &v);
        if rv.abs() < 1e-30 {
            return Err(breakdown("BiCGStab", "rhat·v", rv));
        }
        alpha = rho / rv;
        // s = r - alpha v (reuse r).
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) <= abs_tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok((it, true));
        }
        m.apply(a, &r, &mut shat);
        a.matvec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-30 {
            return Err(breakdown("BiCGStab", "t·t", tt));
        }
        omega = dot(&t, &r) / tt;
        if omega.abs() < 1e-30 {
            return Err(breakdown("BiCGStab", "omega", omega));
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] -= omega * t[i];
        }
        if norm2(&r) <= abs_tol {
            return Ok((it, true));
        }
    }
    Ok((max_iter, false))
}

/// Right-preconditioned GMRES with Givens rotations; the tracked residual
/// is the true one because right preconditioning leaves it unchanged.
fn gmres(
    a: &CsrMatrix,
    m: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    abs_tol: f64,
    max_iter: usize,
    restart: usize,
) -> Result<(usize, bool)> {
    let n = b.len();
    let mut total_it = 0;
    let mut v: Vec<Vec<f64>> = Vec::new();
    let mut h = vec![vec![0.0f64; restart]; restart + 1];
    let mut z = vec![0.0; n];
    loop {
        let r = a.residual(b, x);
        let beta = norm2(&r);
        if beta <= abs_tol {
            return Ok((total_it, true));
        }
        if total_it >= max_iter {
            return Ok((total_it, false));
        }
        v.clear();
        v.push(r.iter().map(|ri| ri / beta).collect());
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut k_used = 0;
        for k in 0..restart {
            if total_it >= max_iter {
                break;
            }
            total_it += 1;
            k_used = k + 1;
            // w = A M⁻¹ v_k
            m.apply(a, &v[k], &mut z);
            let mut w = a.matvec(&z);
            // Modified Gram–Schmidt.
            for j in 0..=k {
                h[j][k] = dot(&w, &v[j]);
                for i in 0..n {
                    w[i] -= h[j][k] * v[j][i];
                }
            }
            h[k + 1][k] = norm2(&w);
            if h[k + 1][k] > 1e-300 {
                v.push(w.iter().map(|wi| wi / h[k + 1][k]).collect());
            } else {
                // Lucky breakdown: exact solution in the current space.
                v.push(vec![0.0; n]);
            }
            // Apply previous rotations to the new column.
            for j in 0..k {
                let t1 = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                let t2 = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t1;
                h[j + 1][k] = t2;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom < 1e-300 {
                return Err(breakdown("GMRES", "givens", denom));
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            if g[k + 1].abs() <= abs_tol {
                break;
            }
        }
        // Back substitution for y, then x += M⁻¹ (V y).
        let k = k_used;
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for j in i + 1..k {
                acc -= h[i][j] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        let mut update = vec![0.0; n];
        for j in 0..k {
            for i in 0..n {
                update[i] += y[j] * v[j][i];
            }
        }
        m.apply(a, &update, &mut z);
        for i in 0..n {
            x[i] += z[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dense;
    use crate::linalg::tests::{small_graph, two_cell_graph};
    use crate::linalg::{assemble, csr_pattern, ilu0, NoPrecond};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cg_solves_two_by_two_spd() {
        let g = two_cell_graph();
        let pat = csr_pattern(&g);
        let a = assemble(&pat, &[4.0, 3.0], &[1.0], &[1.0]).unwrap();
        let pc = ilu0(&a).unwrap();
        let opts = SolveOpts { method: KrylovMethod::Cg, tol: 1e-12, max_iter: 50 };
        let (x, report) = solve(&a, &pc, &[1.0, 2.0], None, opts).unwrap();
        assert!(report.converged);
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-10);
    }

    /// Random diagonally-dominant systems on a small mesh graph: all three
    /// methods must agree with a dense LU oracle.
    #[test]
    fn krylov_methods_match_dense_oracle() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let ne = g.n_edges();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let upper: Vec<f64> = (0..ne).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lower: Vec<f64> = (0..ne).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut diag = vec![0.0; pat.n];
            for i in 0..pat.n {
                diag[i] = 4.0 + rng.gen_range(0.0..1.0);
            }
            let b: Vec<f64> = (0..pat.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = assemble(&pat, &diag, &upper, &lower).unwrap();
            let expect = dense::solve(&dense::from_csr(&a), &b);
            let pc = ilu0(&a).unwrap();
            for method in [KrylovMethod::BiCgStab, KrylovMethod::Gmres] {
                let opts = SolveOpts { method, tol: 1e-12, max_iter: 200 };
                let (x, report) = solve(&a, &pc, &b, None, opts).unwrap();
                assert!(report.converged, "{method:?} trial {trial}");
                for i in 0..pat.n {
                    assert!(
                        (x[i] - expect[i]).abs() < 1e-8,
                        "{method:?} trial {trial} cell {i}: {} vs {}",
                        x[i],
                        expect[i]
                    );
                }
            }
        }
    }

    /// Symmetric positive-definite instance for CG against the oracle.
    #[test]
    fn cg_matches_dense_oracle() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let ne = g.n_edges();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let off: Vec<f64> = (0..ne).map(|_| -rng.gen_range(0.1..1.0)).collect();
            let mut diag = vec![0.1; pat.n];
            for e in 0..ne {
                diag[g.owner[e] as usize] -= off[e];
                diag[g.neighbour[e] as usize] -= off[e];
            }
            let b: Vec<f64> = (0..pat.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = assemble(&pat, &diag, &off, &off).unwrap();
            let expect = dense::solve(&dense::from_csr(&a), &b);
            let pc = ilu0(&a).unwrap();
            let opts = SolveOpts { method: KrylovMethod::Cg, tol: 1e-13, max_iter: 300 };
            let (x, _) = solve(&a, &pc, &b, None, opts).unwrap();
            for i in 0..pat.n {
                assert!((x[i] - expect[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let g = two_cell_graph();
        let pat = csr_pattern(&g);
        let a = assemble(&pat, &[4.0, 3.0], &[1.0], &[1.0]).unwrap();
        let opts = SolveOpts { method: KrylovMethod::Cg, tol: 1e-12, max_iter: 10 };
        let (x, report) = solve(&a, &NoPrecond, &[0.0, 0.0], Some(&[5.0, -3.0]), opts).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
    }

    #[test]
    fn non_convergence_reports_best_iterate() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let ne = g.n_edges();
        let off = vec![-1.0; ne];
        let mut diag = vec![1e-9; pat.n];
        for e in 0..ne {
            diag[g.owner[e] as usize] += 1.0;
            diag[g.neighbour[e] as usize] += 1.0;
        }
        let a = assemble(&pat, &diag, &off, &off).unwrap();
        let b: Vec<f64> = (0..pat.n).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        // Nearly-singular Laplacian with a 1-iteration cap cannot converge.
        let opts = SolveOpts { method: KrylovMethod::Cg, tol: 1e-14, max_iter: 1 };
        let err = solve(&a, &NoPrecond, &b, None, opts).unwrap_err();
        match err {
            Error::NotConverged { iterations, best, .. } => {
                assert_eq!(iterations, 1);
                assert_eq!(best.len(), pat.n);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Same system solved twice must be bit-identical.
    #[test]
    fn solves_are_deterministic() {
        let g = small_graph();
        let pat = csr_pattern(&g);
        let ne = g.n_edges();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let upper: Vec<f64> = (0..ne).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lower: Vec<f64> = (0..ne).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let diag = vec![5.0; pat.n];
        let b: Vec<f64> = (0..pat.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = assemble(&pat, &diag, &upper, &lower).unwrap();
        let pc = ilu0(&a).unwrap();
        let opts = SolveOpts { method: KrylovMethod::BiCgStab, tol: 1e-10, max_iter: 100 };
        let (x1, _) = solve(&a, &pc, &b, None, opts).unwrap();
        let (x2, _) = solve(&a, &pc, &b, None, opts).unwrap();
        assert_eq!(x1, x2);
    }
}
