//! Symmetric eigensolver: Householder reduction to tridiagonal form followed by
//! implicit-shift QL iterations.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Relative asymmetry accepted by the eigensolver.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenpairs sorted by non-increasing eigenvalue; `vectors` holds one
/// orthonormal eigenvector per column.
#[derive(Clone, Debug)]
pub struct EigPair {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigPair {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flips each eigenvector so that its entry of largest magnitude is positive.
    pub fn canonicalize_signs(&mut self) {
        canonicalize_column_signs(&mut self.vectors);
    }
}

pub(crate) fn canonicalize_column_signs(m: &mut Matrix) {
    for j in 0..m.cols() {
        let mut best = 0.0_f64;
        for i in 0..m.rows() {
            // strict `>` keeps the first index among equal magnitudes
            if m[(i, j)].abs() > best.abs() + 1e-14 * best.abs().max(1.0) {
                best = m[(i, j)];
            }
        }
        if best < 0.0 {
            for i in 0..m.rows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// Full eigendecomposition of a symmetric matrix, eigenvalues descending.
pub fn eig_sym(g: &Matrix) -> Result<EigPair> {
    let (n, m) = g.shape();
    if n != m {
        return Err(Error::Dimension(format!("eigensolve of non-square {n}x{m}")));
    }
    let asym = g.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("eigensolver input"));
    }
    if n == 0 {
        return Ok(EigPair {
            values: vec![],
            vectors: Matrix::zeros(0, 0),
        });
    }

    // Work on the symmetrised lower triangle.
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (g[(i, j)] + g[(j, i)])).collect())
        .collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    Ok(EigPair { values, vectors })
}

/// The `r` largest eigenpairs of a symmetric matrix.
pub fn top_eig_sym(g: &Matrix, r: usize) -> Result<EigPair> {
    if r > g.rows() {
        return Err(Error::RankOutOfRange {
            rank: r,
            max: g.rows(),
        });
    }
    let full = eig_sym(g)?;
    Ok(EigPair {
        values: full.values[..r].to_vec(),
        vectors: full.vectors.columns_range(0, r),
    })
}

fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }

            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate the Householder transformations.
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let max_iter = 64 * n.max(4);
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(Error::NoConvergence(max_iter));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;

                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// `(S + εI)^{1/2}` and its inverse for a symmetric positive semidefinite `S`.
pub fn sym_sqrt_and_inverse(s: &Matrix, epsilon: f64) -> Result<(Matrix, Matrix)> {
    let eig = eig_sym(s)?;
    let n = s.rows();
    let mut root = Matrix::zeros(n, n);
    let mut inv_root = Matrix::zeros(n, n);
    for (idx, &lam) in eig.values.iter().enumerate() {
        let shifted = lam + epsilon;
        if !(shifted > 0.0) || !shifted.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: idx,
                value: shifted,
            });
        }
        let (a, b) = (shifted.sqrt(), 1.0 / shifted.sqrt());
        let u = eig.vectors.column(idx);
        for i in 0..n {
            for j in 0..n {
                let uu = u[i] * u[j];
                root[(i, j)] += a * uu;
                inv_root[(i, j)] += b * uu;
            }
        }
    }
    Ok((root, inv_root))
}
