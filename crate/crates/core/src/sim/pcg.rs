use crate::error::{Error, Result};

/// Symmetric five-point operator on an `ni x nj` grid:
/// `(A p)_k = diag_k p_k - east_k p_{k+1} - east_{k-1} p_{k-1} - north_k p_{k+ni} - north_{k-ni} p_{k-ni}`.
#[derive(Debug, Clone)]
pub struct FivePoint {
    pub ni: usize,
    pub nj: usize,
    pub diag: Vec<f64>,
    /// Coupling to the cell at `i + 1`; zero in the last column.
    pub east: Vec<f64>,
    /// Coupling to the cell at `j + 1`; zero in the last row.
    pub north: Vec<f64>,
}

impl FivePoint {
    pub fn zeros(ni: usize, nj: usize) -> Self {
        let n = ni * nj;
        FivePoint {
            ni,
            nj,
            diag: vec![0.0; n],
            east: vec![0.0; n],
            north: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, p: &[f64], out: &mut [f64]) {
        let ni = self.ni;
        let n = self.len();
        for k in 0..n {
            let mut v = self.diag[k] * p[k];
            if k + 1 < n {
                v -= self.east[k] * p[k + 1];
            }
            if k >= 1 {
                v -= self.east[k - 1] * p[k - 1];
            }
            if k + ni < n {
                v -= self.north[k] * p[k + ni];
            }
            if k >= ni {
                v -= self.north[k - ni] * p[k - ni];
            }
            out[k] = v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. `x` holds the initial guess
/// and receives the solution. Returns the iteration count.
pub fn solve_pcg(a: &FivePoint, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<usize> {
    let n = a.len();
    if a.diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Numerical(
            "pressure matrix has a non-positive diagonal (cell without flow connection)".into(),
        ));
    }
    let bnorm = dot(b, b).sqrt();
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for k in 0..n {
        r[k] = b[k] - r[k];
    }
    if bnorm == 0.0 {
        if dot(&r, &r) == 0.0 {
            return Ok(0);
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let inv_d: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= rel_tol * bnorm {
            return Ok(it);
        }
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "pressure matrix is not positive definite (pAp = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
            z[k] = r[k] * inv_d[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    if dot(&r, &r).sqrt() <= rel_tol * bnorm {
        return Ok(max_iter);
    }
    Err(Error::Numerical(format!(
        "conjugate gradients did not reach relative residual {rel_tol:e} in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn matches_dense_solve() {
        let (ni, nj) = (5, 4);
        let mut a = FivePoint::zeros(ni, nj);
        for k in 0..ni * nj {
            let (i, j) = (k % ni, k / ni);
            if i + 1 < ni {
                a.east[k] = 1.0 + 0.1 * k as f64;
            }
            if j + 1 < nj {
                a.north[k] = 2.0 - 0.05 * k as f64;
            }
        }
        let mut dense = DMatrix::zeros(ni * nj, ni * nj);
        for k in 0..ni * nj {
            for (other, c) in [(k + 1, a.east[k]), (k + ni, a.north[k])] {
                if c != 0.0 {
                    dense[(k, other)] -= c;
                    dense[(other, k)] -= c;
                    dense[(k, k)] += c;
                    dense[(other, other)] += c;
                }
            }
        }
        for k in 0..ni * nj {
            dense[(k, k)] += if k == 0 || k == 13 { 3.0 } else { 0.0 };
            a.diag[k] = dense[(k, k)];
        }
        let b: Vec<f64> = (0..ni * nj).map(|k| (k as f64).sin()).collect();
        let mut x = vec![0.0; ni * nj];
        solve_pcg(&a, &b, &mut x, 1e-12, 1000).unwrap();
        let exact = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for k in 0..ni * nj {
            assert!((x[k] - exact[k]).abs() < 1e-9 * exact.amax());
        }
    }
}
