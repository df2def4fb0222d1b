use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// Zero-fill incomplete LU factorization.
///
/// Factors are stored in the matrix's own CSR layout: strictly-lower slots
/// hold L (unit diagonal implied), the diagonal and upper slots hold U.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    vals: Vec<f64>,
}

pub trait Preconditioner {
    /// z = M⁻¹ r.
    fn apply(&self, a: &CsrMatrix, r: &[f64], z: &mut [f64]);
}

/// Identity preconditioner, useful for singular projected systems where an
/// incomplete factorization would break down.
pub struct NoPrecond;

impl Preconditioner for NoPrecond {
    fn apply(&self, _a: &CsrMatrix, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub fn ilu0(a: &CsrMatrix) -> Result<Ilu0> {
    let pat = &a.pat;
    let n = pat.n;
    let mut vals = a.vals.clone();
    for i in 0..n {
        let row_lo = pat.row_ptr[i] as usize;
        let row_hi = pat.row_ptr[i + 1] as usize;
        let diag_i = pat.diag_pos[i] as usize;
        let row_scale = a.vals[row_lo..row_hi]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        // Eliminate columns k < i present in row i.
        for kpos in row_lo..diag_i {
            let k = pat.col_idx[kpos] as usize;
            let pivot = vals[pat.diag_pos[k] as usize];
            if pivot == 0.0 {
                return Err(Error::PivotBreakdown { row: k });
            }
            let factor = vals[kpos] / pivot;
            vals[kpos] = factor;
            // Subtract factor * (row k, columns > k) wherever row i has a slot.
            let k_hi = pat.row_ptr[k + 1] as usize;
            for jpos in pat.diag_pos[k] as usize + 1..k_hi {
                let j = pat.col_idx[jpos];
                // Row i's columns are sorted; search only past the current slot.
                if let Ok(off) = pat.col_idx[kpos + 1..row_hi].binary_search(&j) {
                    vals[kpos + 1 + off] -= factor * vals[jpos];
                }
            }
        }
        // A pivot that cancelled to roundoff (the last row of a singular
        // Neumann system) would blow up the back substitution; replacing it
        // with the row scale leaves a bounded, still-useful factor. Healthy
        // factorizations never trip this.
        if vals[diag_i].abs() < 1e-12 * row_scale {
            if row_scale == 0.0 {
                return Err(Error::PivotBreakdown { row: i });
            }
            vals[diag_i] = row_scale;
        }
    }
    Ok(Ilu0 { vals })
}

impl Preconditioner for Ilu0 {
    fn apply(&self, a: &CsrMatrix, r: &[f64], z: &mut [f64]) {
        let pat = &a.pat;
        let n = pat.n;
        // Forward solve L y = r (unit diagonal).
        for i in 0..n {
            let mut acc = r[i];
            for k in pat.row_ptr[i] as usize..pat.diag_pos[i] as usize {
                acc -= self.vals[k] * z[pat.col_idx[k] as usize];
            }
            z[i] = acc;
        }
        // Back solve U z = y.
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in pat.diag_pos[i] as usize + 1..pat.row_ptr[i + 1] as usize {
                acc -= self.vals[k] * z[pat.col_idx[k] as usize];
            }
            z[i] = acc / self.vals[pat.diag_pos[i] as usize];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tests::two_cell_graph;
    use crate::linalg::{assemble, csr_pattern};

    #[test]
    fn two_by_two_factors_match_dense_lu() {
        // A = [[4,1],[1,3]]: L21 = 0.25, U = [[4,1],[0,2.75]]. No fill is
        // dropped at this size, so ILU(0) equals the exact LU.
        let g = two_cell_graph();
        let pat = csr_pattern(&g);
        let a = assemble(&pat, &[4.0, 3.0], &[1.0], &[1.0]).unwrap();
        let f = ilu0(&a).unwrap();
        let mut z = vec![0.0; 2];
        f.apply(&a, &[1.0, 2.0], &mut z);
        // Exact solve: x = A⁻¹ [1,2] = [1/11, 7/11].
        assert!((z[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((z[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn cancelled_pivot_is_clamped_to_row_scale() {
        let g = two_cell_graph();
        let pat = csr_pattern(&g);
        // Diagonal passes assembly but elimination zeroes the second pivot:
        // [[1, 1], [1, 1]] -> u22 = 1 - 1*1 = 0, clamped to the row scale so
        // the factor stays usable as a preconditioner of the singular matrix.
        let a = assemble(&pat, &[1.0, 1.0], &[1.0], &[1.0]).unwrap();
        let f = ilu0(&a).unwrap();
        let mut z = vec![0.0; 2];
        f.apply(&a, &[1.0, 2.0], &mut z);
        assert!(z.iter().all(|v| v.is_finite()));
    }
}
