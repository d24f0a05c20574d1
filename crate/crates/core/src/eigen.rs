//! Sparse symmetric eigensolver: shift-invert Lanczos with full
//! reorthogonalization for the smallest eigenvalues, an incomplete-Cholesky
//! preconditioned conjugate-gradient inner solver, and a dense Jacobi
//! reference for small problems.
//!
//! The driver targets positive-semidefinite operators whose kernel direction
//! is known exactly (it is projected out of the Krylov space), which is the
//! situation for symmetrized generator discretizations. Every returned pair
//! is certified against the original operator: `||A v - lambda v|| <= tol`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("incomplete Cholesky breakdown at row {row} (pivot {pivot})")]
    FactorBreakdown { row: usize, pivot: f64 },
    #[error("inner solve did not reach {rtol:e} within {max_iter} iterations (residual {achieved:e})")]
    InnerSolve { rtol: f64, max_iter: usize, achieved: f64 },
    #[error("Lanczos did not converge: residuals {residuals:?} (tol {tol:e}, basis {basis})")]
    NoConvergence { residuals: Vec<f64>, tol: f64, basis: usize },
}

/// Symmetric sparse matrix in compressed-sparse-row form. Both triangles are
/// stored; column indices are sorted within each row.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[idx] * x[self.col_idx[idx]];
            }
            y[r] = acc;
        }
    }

    /// `y = (A + sigma I) x`.
    pub fn matvec_shifted(&self, sigma: f64, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
        for r in 0..self.n {
            y[r] += sigma * x[r];
        }
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.col_idx[idx] == c {
                return self.values[idx];
            }
        }
        0.0
    }

    /// Largest absolute asymmetry `|A_ij - A_ji|` over the stored pattern.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[idx];
                if c > r {
                    worst = worst.max((self.values[idx] - self.entry(c, r)).abs());
                }
            }
        }
        worst
    }
}

/// Zero-fill incomplete Cholesky factorization of `A + sigma I`.
///
/// Stores the lower factor and its transpose for the two triangular solves.
pub struct IncompleteCholesky {
    lower: CsrMatrix,
    upper: CsrMatrix,
}

impl IncompleteCholesky {
    pub fn factor(a: &CsrMatrix, sigma: f64) -> Result<Self, EigenError> {
        let n = a.n;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);

        for i in 0..n {
            let row_start = values.len();
            let mut have_diag = false;
            for idx in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[idx];
                if j > i {
                    continue;
                }
                let val = a.values[idx];
                if j == i {
                    // L_ii^2 = A_ii - sum_k L_ik^2.
                    let mut acc = val + sigma;
                    for k_idx in row_start..values.len() {
                        acc -= values[k_idx] * values[k_idx];
                    }
                    if acc <= 0.0 {
                        return Err(EigenError::FactorBreakdown { row: i, pivot: acc });
                    }
                    have_diag = true;
                    col_idx.push(i);
                    values.push(acc.sqrt());
                } else {
                    // L_ij = (A_ij - sum_k L_ik L_jk) / L_jj over the shared
                    // prefix pattern.
                    let mut acc = val;
                    let j_start = row_ptr[j];
                    let j_end = row_ptr[j + 1];
                    let mut pi = row_start;
                    let mut pj = j_start;
                    while pi < values.len() && pj < j_end {
                        let ci = col_idx[pi];
                        let cj = col_idx[pj];
                        if ci == cj {
                            if ci >= j {
                                break;
                            }
                            acc -= values[pi] * values[pj];
                            pi += 1;
                            pj += 1;
                        } else if ci < cj {
                            pi += 1;
                        } else {
                            pj += 1;
                        }
                    }
                    // L_jj is the last entry of row j.
                    let ljj = values[j_end - 1];
                    col_idx.push(j);
                    values.push(acc / ljj);
                }
            }
            if !have_diag {
                return Err(EigenError::InvalidInput(format!("missing diagonal in row {i}")));
            }
            row_ptr.push(values.len());
        }

        let lower = CsrMatrix { n, row_ptr, col_idx, values };
        let upper = transpose(&lower);
        Ok(Self { lower, upper })
    }

    /// `z = (L L^T)^{-1} r`.
    pub fn solve(&self, r: &[f64], z: &mut [f64]) {
        let n = self.lower.n;
        // Forward: L y = r (diagonal is the last entry of each lower row).
        for i in 0..n {
            let start = self.lower.row_ptr[i];
            let end = self.lower.row_ptr[i + 1];
            let mut acc = r[i];
            for idx in start..end - 1 {
                acc -= self.lower.values[idx] * z[self.lower.col_idx[idx]];
            }
            z[i] = acc / self.lower.values[end - 1];
        }
        // Backward: L^T z = y (diagonal is the first entry of each upper row).
        for i in (0..n).rev() {
            let start = self.upper.row_ptr[i];
            let end = self.upper.row_ptr[i + 1];
            let mut acc = z[i];
            for idx in start + 1..end {
                acc -= self.upper.values[idx] * z[self.upper.col_idx[idx]];
            }
            z[i] = acc / self.upper.values[start];
        }
    }
}

fn transpose(a: &CsrMatrix) -> CsrMatrix {
    let n = a.n;
    let mut counts = vec![0usize; n + 1];
    for &c in &a.col_idx {
        counts[c + 1] += 1;
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let row_ptr = counts.clone();
    let mut col_idx = vec![0usize; a.nnz()];
    let mut values = vec![0.0; a.nnz()];
    let mut next = counts;
    for r in 0..n {
        for idx in a.row_ptr[r]..a.row_ptr[r + 1] {
            let c = a.col_idx[idx];
            let dst = next[c];
            col_idx[dst] = r;
            values[dst] = a.values[idx];
            next[c] += 1;
        }
    }
    CsrMatrix { n, row_ptr, col_idx, values }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradient for `(A + sigma I) x = b`, starting from
/// zero. Returns the iteration count.
pub fn pcg_solve(
    a: &CsrMatrix,
    sigma: f64,
    precond: &IncompleteCholesky,
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> Result<usize, EigenError> {
    let n = a.n;
    x.fill(0.0);
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(0);
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond.solve(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=max_iter {
        a.matvec_shifted(sigma, &p, &mut q);
        let alpha = rz / dot(&p, &q);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if norm(&r) <= rtol * bnorm {
            return Ok(it);
        }
        precond.solve(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(EigenError::InnerSolve { rtol, max_iter, achieved: norm(&r) / bnorm })
}

/// Options for the shift-invert Lanczos driver.
#[derive(Debug, Clone)]
pub struct LanczosOptions {
    /// Positive spectral shift; the inner solves act on `A + shift I`.
    pub shift: f64,
    /// Hard cap on the Krylov basis size.
    pub max_basis: usize,
    /// Residuals are certified every this many Lanczos steps.
    pub check_every: usize,
    pub inner_rtol: f64,
    pub inner_max_iter: usize,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            shift: 1.0,
            max_basis: 300,
            check_every: 10,
            inner_rtol: 1e-13,
            inner_max_iter: 20_000,
            seed: 0x0e1a,
        }
    }
}

/// Eigenvalues (ascending) with their Euclidean-orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Certified residuals `||A v - lambda v||` per pair.
    pub residuals: Vec<f64>,
}

/// Compute the `k` smallest eigenpairs of a positive-semidefinite symmetric
/// matrix in the orthogonal complement of `kernel` (an exactly known null
/// vector, projected out of every Krylov vector).
pub fn smallest_symmetric_deflated(
    a: &CsrMatrix,
    kernel: Option<&[f64]>,
    k: usize,
    tol: f64,
    opts: &LanczosOptions,
) -> Result<EigenPairs, EigenError> {
    let n = a.n;
    if k == 0 {
        return Ok(EigenPairs { values: vec![], vectors: vec![], residuals: vec![] });
    }
    if k >= n {
        return Err(EigenError::InvalidInput(format!("k = {k} too large for dimension {n}")));
    }

    let kernel = kernel.map(|w| {
        let s = norm(w);
        w.iter().map(|v| v / s).collect::<Vec<f64>>()
    });
    let project = |v: &mut [f64], basis: &[Vec<f64>]| {
        if let Some(w) = &kernel {
            let c = dot(v, w);
            for i in 0..n {
                v[i] -= c * w[i];
            }
        }
        for b in basis {
            let c = dot(v, b);
            for i in 0..n {
                v[i] -= c * b[i];
            }
        }
    };

    let precond = IncompleteCholesky::factor(a, opts.shift)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    let mut v0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    project(&mut v0, &[]);
    let s = norm(&v0);
    for v in &mut v0 {
        *v /= s;
    }
    basis.push(v0);

    let max_basis = opts.max_basis.min(n - 1);
    let mut u = vec![0.0; n];
    let mut last_residuals: Vec<f64> = Vec::new();

    for j in 0..max_basis {
        pcg_solve(
            a,
            opts.shift,
            &precond,
            &basis[j],
            &mut u,
            opts.inner_rtol,
            opts.inner_max_iter,
        )?;
        if let Some(w) = &kernel {
            let c = dot(&u, w);
            for i in 0..n {
                u[i] -= c * w[i];
            }
        }
        if j > 0 {
            let b = betas[j - 1];
            let prev = &basis[j - 1];
            for i in 0..n {
                u[i] -= b * prev[i];
            }
        }
        let alpha = dot(&basis[j], &u);
        {
            let cur = &basis[j];
            for i in 0..n {
                u[i] -= alpha * cur[i];
            }
        }
        alphas.push(alpha);
        // Full reorthogonalization, two passes.
        for _ in 0..2 {
            project(&mut u, &basis);
        }
        let beta = norm(&u);
        if beta < 1e-300 {
            // Invariant subspace; restart with a fresh direction.
            let mut fresh: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            project(&mut fresh, &basis);
            let s = norm(&fresh);
            if s < 1e-12 {
                break;
            }
            for v in &mut fresh {
                *v /= s;
            }
            betas.push(0.0);
            basis.push(fresh);
        } else {
            betas.push(beta);
            basis.push(u.iter().map(|v| v / beta).collect());
        }

        let m = alphas.len();
        let exhausted = j + 1 == max_basis;
        if m >= k && (m % opts.check_every == 0 || exhausted) {
            if let Some(result) = certify(a, &basis[..m], &alphas, &betas[..m - 1], k, tol, opts)? {
                return Ok(result);
            } else if exhausted {
                // Re-run certification to report the attained residuals.
                last_residuals = attained_residuals(a, &basis[..m], &alphas, &betas[..m - 1], k, opts);
            }
        }
    }

    Err(EigenError::NoConvergence { residuals: last_residuals, tol, basis: alphas.len() })
}

/// Ritz extraction in the shift-inverted spectrum: the largest eigenvalues of
/// the tridiagonal map back to the smallest of `A`.
fn ritz_pairs(
    alphas: &[f64],
    betas: &[f64],
    k: usize,
) -> Option<Vec<(f64, Vec<f64>)>> {
    let m = alphas.len();
    if m < k {
        return None;
    }
    let mut t = vec![0.0; m * m];
    for i in 0..m {
        t[i * m + i] = alphas[i];
        if i + 1 < m {
            t[i * m + i + 1] = betas[i];
            t[(i + 1) * m + i] = betas[i];
        }
    }
    let (theta, z) = jacobi_eigh(&t, m);
    // Largest theta first.
    let picked: Vec<(f64, Vec<f64>)> = (0..k)
        .map(|c| {
            let col = m - 1 - c;
            let s: Vec<f64> = (0..m).map(|r| z[r * m + col]).collect();
            (theta[col], s)
        })
        .collect();
    Some(picked)
}

fn form_ritz_vector(basis: &[Vec<f64>], coeffs: &[f64], n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for (b, &c) in basis.iter().zip(coeffs) {
        for i in 0..n {
            v[i] += c * b[i];
        }
    }
    let s = norm(&v);
    for x in &mut v {
        *x /= s;
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn certify(
    a: &CsrMatrix,
    basis: &[Vec<f64>],
    alphas: &[f64],
    betas: &[f64],
    k: usize,
    tol: f64,
    opts: &LanczosOptions,
) -> Result<Option<EigenPairs>, EigenError> {
    let Some(picked) = ritz_pairs(alphas, betas, k) else {
        return Ok(None);
    };
    let n = a.n;
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    let mut work = vec![0.0; n];
    for (_theta, coeffs) in &picked {
        let v = form_ritz_vector(basis, coeffs, n);
        a.matvec(&v, &mut work);
        // Rayleigh quotient minimizes the residual for the computed vector.
        let lambda = dot(&v, &work);
        let mut res = 0.0;
        for i in 0..n {
            let r = work[i] - lambda * v[i];
            res += r * r;
        }
        let res = res.sqrt();
        if res > tol {
            return Ok(None);
        }
        let _ = opts;
        values.push(lambda);
        vectors.push(v);
        residuals.push(res);
    }
    // Ascending in lambda.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let values = order.iter().map(|&i| values[i]).collect();
    let vectors: Vec<Vec<f64>> = order.iter().map(|&i| vectors[i].clone()).collect();
    let residuals = order.iter().map(|&i| residuals[i]).collect();
    Ok(Some(EigenPairs { values, vectors, residuals }))
}

fn attained_residuals(
    a: &CsrMatrix,
    basis: &[Vec<f64>],
    alphas: &[f64],
    betas: &[f64],
    k: usize,
    _opts: &LanczosOptions,
) -> Vec<f64> {
    let Some(picked) = ritz_pairs(alphas, betas, k) else {
        return Vec::new();
    };
    let n = a.n;
    let mut work = vec![0.0; n];
    picked
        .iter()
        .map(|(_, coeffs)| {
            let v = form_ritz_vector(basis, coeffs, n);
            a.matvec(&v, &mut work);
            let lambda = dot(&v, &work);
            (0..n).map(|i| (work[i] - lambda * v[i]).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Dense cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
///
/// Returns eigenvalues ascending and eigenvectors as the columns of the
/// returned row-major matrix. Intended for reference solves and the
/// tridiagonal Ritz problems; cost is O(n^3) per sweep.
pub fn jacobi_eigh(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= f64::MIN_POSITIVE * n as f64 * n as f64 {
            break;
        }
        let diag_norm: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag_norm.max(f64::MIN_POSITIVE) {
            break;
        }

        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut values: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let sorted_values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut sorted_vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            sorted_vectors[r * n + dst] = v[r * n + src];
        }
    }
    values = sorted_values;
    (values, sorted_vectors)
}
