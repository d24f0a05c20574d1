//! Finite-volume reference solver for the planar generator: cell-centered
//! discretization on a truncated rectangle, similarity-symmetrized sparse
//! operator, smallest eigenpairs, and eigenfunction tables with bilinear
//! interpolation.
//!
//! The scheme is a 5-point flux discretization with geometric-mean face
//! weights and reflecting (zero-flux) boundaries, which keeps the constant
//! function in the kernel exactly and preserves self-adjointness with respect
//! to the cell weights.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::eigen::{smallest_symmetric_deflated, CsrMatrix, EigenError, LanczosOptions};
use crate::potentials::{PotentialError, PotentialSpec};

#[derive(Debug, Error)]
pub enum FvmError {
    #[error("cell weight at cell ({ix}, {iy}) is not finite/positive (V = {value})")]
    BadCellWeight { ix: usize, iy: usize, value: f64 },
    #[error("reference solver requires a planar potential, got dimension {0}")]
    NotPlanar(usize),
    #[error("reference solver requires identity diffusion")]
    NotIdentityDiffusion,
    #[error("grid must have at least 2 cells per direction, got {nx} x {ny}")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("invalid domain: {0}")]
    BadDomain(String),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error("table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("table format: {0}")]
    Format(String),
}

/// Cell-centered grid over a rectangle with the stationary cell weights
/// `mu_k` proportional to `exp(-beta V(center_k))`.
#[derive(Debug, Clone)]
pub struct FvmGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    mu: Vec<f64>,
}

impl FvmGrid {
    /// Build the grid and evaluate the cell weights. Weights are computed
    /// relative to the potential minimum over the grid, which leaves the
    /// operator unchanged and avoids needless underflow.
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        nx: usize,
        ny: usize,
        potential: &PotentialSpec,
    ) -> Result<Self, FvmError> {
        if potential.dim() != 2 {
            return Err(FvmError::NotPlanar(potential.dim()));
        }
        if nx < 2 || ny < 2 {
            return Err(FvmError::GridTooSmall { nx, ny });
        }
        if !(x_range.1 > x_range.0) || !(y_range.1 > y_range.0) {
            return Err(FvmError::BadDomain(format!("{x_range:?} x {y_range:?}")));
        }
        let hx = (x_range.1 - x_range.0) / nx as f64;
        let hy = (y_range.1 - y_range.0) / ny as f64;

        let mut v = vec![0.0; nx * ny];
        let mut v_min = f64::INFINITY;
        for iy in 0..ny {
            for ix in 0..nx {
                let x = x_range.0 + (ix as f64 + 0.5) * hx;
                let y = y_range.0 + (iy as f64 + 0.5) * hy;
                let val = potential.value(&[x, y])?;
                if !val.is_finite() {
                    return Err(FvmError::BadCellWeight { ix, iy, value: val });
                }
                v[iy * nx + ix] = val;
                v_min = v_min.min(val);
            }
        }
        let beta = potential.beta();
        let mut mu = vec![0.0; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let w = (-beta * (v[iy * nx + ix] - v_min)).exp();
                if !(w > 0.0) || !w.is_finite() {
                    return Err(FvmError::BadCellWeight { ix, iy, value: v[iy * nx + ix] });
                }
                mu[iy * nx + ix] = w;
            }
        }
        Ok(Self {
            x_lo: x_range.0,
            x_hi: x_range.1,
            y_lo: y_range.0,
            y_hi: y_range.1,
            nx,
            ny,
            hx,
            hy,
            mu,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (self.x_lo + (ix as f64 + 0.5) * self.hx, self.y_lo + (iy as f64 + 0.5) * self.hy)
    }

    /// Relative (unnormalized) cell weights.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Cell probability weights summing to one.
    pub fn prob_weights(&self) -> Vec<f64> {
        let total: f64 = self.mu.iter().sum();
        self.mu.iter().map(|m| m / total).collect()
    }

    /// Discrete `mu`-weighted inner product of two cell functions.
    pub fn mu_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let total: f64 = self.mu.iter().sum();
        f.iter().zip(g).zip(&self.mu).map(|((a, b), m)| a * b * m).sum::<f64>() / total
    }
}

/// Similarity-symmetrized negative generator `S = D^{1/2} (-L_h) D^{-1/2}`
/// with `D = diag(mu_k)`, together with the exactly known kernel direction
/// `sqrt(mu)`.
#[derive(Debug, Clone)]
pub struct SparseSymmetricOperator {
    pub matrix: CsrMatrix,
    sqrt_mu: Vec<f64>,
}

impl SparseSymmetricOperator {
    pub fn dim(&self) -> usize {
        self.matrix.n
    }

    /// Unnormalized kernel direction of `S`.
    pub fn kernel_direction(&self) -> &[f64] {
        &self.sqrt_mu
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec(x, y);
    }

    /// Action of the unsymmetrized `-L_h` on a cell function.
    pub fn apply_unsymmetrized(&self, f: &[f64], out: &mut [f64]) {
        let scaled: Vec<f64> = f.iter().zip(&self.sqrt_mu).map(|(v, s)| v * s).collect();
        self.matrix.matvec(&scaled, out);
        for (o, s) in out.iter_mut().zip(&self.sqrt_mu) {
            *o /= s;
        }
    }
}

/// Assemble the symmetrized 5-point operator.
///
/// Fluxes use the geometric mean of the adjacent cell weights; faces on the
/// domain boundary carry zero flux.
pub fn assemble(
    potential: &PotentialSpec,
    grid: &FvmGrid,
) -> Result<SparseSymmetricOperator, FvmError> {
    if !potential.has_identity_diffusion() {
        return Err(FvmError::NotIdentityDiffusion);
    }
    let nx = grid.nx;
    let ny = grid.ny;
    let n = grid.n_cells();
    let beta = potential.beta();
    let inv_hx2 = 1.0 / (beta * grid.hx * grid.hx);
    let inv_hy2 = 1.0 / (beta * grid.hy * grid.hy);
    let mu = grid.mu();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);

    // With geometric-mean face weights the symmetrized off-diagonals reduce to
    // -1/(beta h^2); the diagonal keeps the sqrt(mu'/mu) ratios. Row entries
    // are pushed in ascending column order: S, W, diag, E, N.
    for iy in 0..ny {
        for ix in 0..nx {
            let k = grid.index(ix, iy);
            let mu_k = mu[k];
            let mut diag = 0.0;
            let mut neighbors: [(usize, f64); 5] = [(usize::MAX, 0.0); 5];
            let mut count = 0;
            if iy > 0 {
                neighbors[count] = (k - nx, inv_hy2);
                count += 1;
            }
            if ix > 0 {
                neighbors[count] = (k - 1, inv_hx2);
                count += 1;
            }
            neighbors[count] = (k, 0.0); // diagonal placeholder
            let diag_pos = count;
            count += 1;
            if ix + 1 < nx {
                neighbors[count] = (k + 1, inv_hx2);
                count += 1;
            }
            if iy + 1 < ny {
                neighbors[count] = (k + nx, inv_hy2);
                count += 1;
            }
            let diag_slot = values.len() + diag_pos;
            for &(col, coeff) in &neighbors[..count] {
                if col == k {
                    col_idx.push(k);
                    values.push(0.0);
                } else {
                    diag += coeff * (mu[col] / mu_k).sqrt();
                    col_idx.push(col);
                    values.push(-coeff);
                }
            }
            values[diag_slot] = diag;
            row_ptr.push(values.len());
        }
    }

    let sqrt_mu: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
    Ok(SparseSymmetricOperator { matrix: CsrMatrix { n, row_ptr, col_idx, values }, sqrt_mu })
}

/// Eigenpairs of the symmetrized operator, ascending; index 0 is the trivial
/// near-zero mode, which callers discard.
#[derive(Debug, Clone)]
pub struct FvmEigenSolution {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Euclidean-orthonormal eigenvectors of `S`.
    pub vectors: Vec<Vec<f64>>,
}

impl FvmEigenSolution {
    /// Map eigenvector `i` back to a `mu`-orthonormal eigenfunction of
    /// `-L_h` (values per cell).
    pub fn eigenfunction(&self, grid: &FvmGrid, i: usize) -> Vec<f64> {
        let prob = grid.prob_weights();
        self.vectors[i].iter().zip(&prob).map(|(v, p)| v / p.sqrt()).collect()
    }
}

/// Compute the `k` smallest eigenpairs of the operator (including the
/// trivial mode as the first pair) with certified residuals
/// `||S v - lambda v|| <= tol`.
pub fn smallest_eigenpairs(
    op: &SparseSymmetricOperator,
    k: usize,
    tol: f64,
) -> Result<FvmEigenSolution, FvmError> {
    smallest_eigenpairs_with(op, k, tol, &LanczosOptions::default())
}

pub fn smallest_eigenpairs_with(
    op: &SparseSymmetricOperator,
    k: usize,
    tol: f64,
    opts: &LanczosOptions,
) -> Result<FvmEigenSolution, FvmError> {
    if k == 0 {
        return Ok(FvmEigenSolution { eigenvalues: vec![], residuals: vec![], vectors: vec![] });
    }
    let n = op.dim();
    // Trivial mode from the exactly known kernel direction.
    let norm: f64 = op.sqrt_mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    let w: Vec<f64> = op.sqrt_mu.iter().map(|v| v / norm).collect();
    let mut sw = vec![0.0; n];
    op.apply(&w, &mut sw);
    let lambda0: f64 = w.iter().zip(&sw).map(|(a, b)| a * b).sum();
    let res0: f64 = (0..n).map(|i| (sw[i] - lambda0 * w[i]).powi(2)).sum::<f64>().sqrt();
    if res0 > tol {
        return Err(FvmError::Eigen(EigenError::NoConvergence {
            residuals: vec![res0],
            tol,
            basis: 0,
        }));
    }

    let mut eigenvalues = vec![lambda0];
    let mut residuals = vec![res0];
    let mut vectors = vec![w.clone()];

    if k > 1 {
        let pairs = smallest_symmetric_deflated(&op.matrix, Some(&w), k - 1, tol, opts)?;
        eigenvalues.extend(pairs.values);
        residuals.extend(pairs.residuals);
        vectors.extend(pairs.vectors);
    }
    Ok(FvmEigenSolution { eigenvalues, residuals, vectors })
}

/// Eigenfunction values on a grid, with bilinear interpolation for off-grid
/// evaluation. The sign convention fixes the cell of maximum magnitude to be
/// positive.
#[derive(Debug)]
pub struct EigenfunctionTable {
    pub x_lo: f64,
    pub y_lo: f64,
    pub hx: f64,
    pub hy: f64,
    pub nx: usize,
    pub ny: usize,
    values: Vec<f64>,
    x_hi: f64,
    y_hi: f64,
    clamp_warnings: AtomicU64,
}

impl EigenfunctionTable {
    pub fn from_values(grid: &FvmGrid, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n_cells(), "one value per cell");
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for &v in &values {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_val = v;
            }
        }
        if max_val < 0.0 {
            for v in &mut values {
                *v = -*v;
            }
        }
        Self {
            x_lo: grid.x_lo,
            y_lo: grid.y_lo,
            hx: grid.hx,
            hy: grid.hy,
            nx: grid.nx,
            ny: grid.ny,
            values,
            x_hi: grid.x_hi,
            y_hi: grid.y_hi,
            clamp_warnings: AtomicU64::new(0),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_cell(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Number of interpolation requests that fell outside the domain and
    /// were clamped to the boundary.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    fn locate(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        if x < self.x_lo || x > self.x_hi || y < self.y_lo || y > self.y_hi {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
        }
        let tx = ((x - self.x_lo) / self.hx - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let ty = ((y - self.y_lo) / self.hy - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let ix = (tx.floor() as usize).min(self.nx - 2);
        let iy = (ty.floor() as usize).min(self.ny - 2);
        (ix, iy, tx - ix as f64, ty - iy as f64)
    }

    /// Bilinear interpolation between cell centers; exact at the centers.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let (ix, iy, fx, fy) = self.locate(x, y);
        let v00 = self.value_at_cell(ix, iy);
        let v10 = self.value_at_cell(ix + 1, iy);
        let v01 = self.value_at_cell(ix, iy + 1);
        let v11 = self.value_at_cell(ix + 1, iy + 1);
        (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11
    }

    /// Interpolated value together with the (piecewise-linear) spatial
    /// gradient of the interpolant.
    pub fn interpolate_with_gradient(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (ix, iy, fx, fy) = self.locate(x, y);
        let v00 = self.value_at_cell(ix, iy);
        let v10 = self.value_at_cell(ix + 1, iy);
        let v01 = self.value_at_cell(ix, iy + 1);
        let v11 = self.value_at_cell(ix + 1, iy + 1);
        let value = (1.0 - fx) * (1.0 - fy) * v00
            + fx * (1.0 - fy) * v10
            + (1.0 - fx) * fy * v01
            + fx * fy * v11;
        let gx = ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) / self.hx;
        let gy = ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) / self.hy;
        (value, [gx, gy])
    }
}

/// Export eigenfunction tables as CSV `x,y,phi_1,...,phi_k` (cell centers,
/// row-major with y outermost).
pub fn write_eigenfunction_tables(
    w: impl Write,
    tables: &[&EigenfunctionTable],
) -> Result<(), FvmError> {
    let mut w = BufWriter::new(w);
    let first = tables.first().ok_or_else(|| FvmError::Format("no tables".into()))?;
    let mut header = String::from("x,y");
    for i in 1..=tables.len() {
        header.push_str(&format!(",phi_{i}"));
    }
    writeln!(w, "{header}")?;
    for iy in 0..first.ny {
        for ix in 0..first.nx {
            let x = first.x_lo + (ix as f64 + 0.5) * first.hx;
            let y = first.y_lo + (iy as f64 + 0.5) * first.hy;
            write!(w, "{x},{y}")?;
            for t in tables {
                write!(w, ",{}", t.value_at_cell(ix, iy))?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read tables written by [`write_eigenfunction_tables`].
pub fn read_eigenfunction_tables(r: impl Read) -> Result<Vec<EigenfunctionTable>, FvmError> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| FvmError::Format("empty table file".into()))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "x" || cols[1] != "y" {
        return Err(FvmError::Format(format!("unexpected header '{header}'")));
    }
    let k = cols.len() - 2;

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); k];
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != k + 2 {
            return Err(FvmError::Format(format!("row with {} fields", fields.len())));
        }
        let parse =
            |s: &str| s.parse::<f64>().map_err(|e| FvmError::Format(format!("{e}: '{s}'")));
        xs.push(parse(fields[0])?);
        ys.push(parse(fields[1])?);
        for i in 0..k {
            data[i].push(parse(fields[i + 2])?);
        }
    }
    let total = xs.len();
    // Rows are written x-fastest: nx is the index where x wraps around.
    let nx = (1..total).find(|&i| xs[i] == xs[0]).unwrap_or(total);
    if nx == 0 || total % nx != 0 {
        return Err(FvmError::Format(format!("cannot infer grid from {total} rows")));
    }
    let ny = total / nx;
    if nx < 2 || ny < 2 {
        return Err(FvmError::Format(format!("grid {nx} x {ny} too small")));
    }
    let hx = xs[1] - xs[0];
    let hy = ys[nx] - ys[0];
    if !(hx > 0.0) || !(hy > 0.0) {
        return Err(FvmError::Format("non-increasing grid coordinates".into()));
    }
    let x_lo = xs[0] - 0.5 * hx;
    let y_lo = ys[0] - 0.5 * hy;
    Ok(data
        .into_iter()
        .map(|values| EigenfunctionTable {
            x_lo,
            y_lo,
            hx,
            hy,
            nx,
            ny,
            x_hi: x_lo + hx * nx as f64,
            y_hi: y_lo + hy * ny as f64,
            values,
            clamp_warnings: AtomicU64::new(0),
        })
        .collect())
}

/// Export the eigenvalue report as CSV `index,lambda,residual`.
pub fn write_eigenvalue_report(
    w: impl Write,
    first_index: usize,
    eigenvalues: &[f64],
    residuals: &[f64],
) -> Result<(), FvmError> {
    let mut w = BufWriter::new(w);
    writeln!(w, "index,lambda,residual")?;
    for (i, (l, r)) in eigenvalues.iter().zip(residuals).enumerate() {
        writeln!(w, "{},{l},{r}", first_index + i)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::jacobi_eigh;
    use std::f64::consts::PI;

    fn spec(id: &str) -> PotentialSpec {
        PotentialSpec::builtin(id, None, 1.0).unwrap()
    }

    #[test]
    fn operator_is_symmetric_and_kills_constants() {
        let pot = spec("v2");
        let grid = FvmGrid::new((-3.0, 3.0), (-3.0, 3.0), 30, 30, &pot).unwrap();
        let op = assemble(&pot, &grid).unwrap();
        assert!(op.matrix.max_asymmetry() <= 1e-12);

        let ones = vec![1.0; op.dim()];
        let mut out = vec![0.0; op.dim()];
        op.apply_unsymmetrized(&ones, &mut out);
        let worst = out.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(worst <= 1e-10, "constant kernel violated: {worst}");
    }

    #[test]
    fn lanczos_agrees_with_dense_jacobi_on_small_grid() {
        let pot = spec("v2");
        let grid = FvmGrid::new((-2.5, 2.5), (-2.5, 2.5), 18, 16, &pot).unwrap();
        let op = assemble(&pot, &grid).unwrap();
        let n = op.dim();
        let mut dense = vec![0.0; n * n];
        for r in 0..n {
            for idx in op.matrix.row_ptr[r]..op.matrix.row_ptr[r + 1] {
                dense[r * n + op.matrix.col_idx[idx]] = op.matrix.values[idx];
            }
        }
        let (dense_vals, _) = jacobi_eigh(&dense, n);
        let sol = smallest_eigenpairs(&op, 4, 1e-9).unwrap();
        for i in 0..4 {
            assert!(
                (sol.eigenvalues[i] - dense_vals[i]).abs() <= 1e-8,
                "pair {i}: {} vs {}",
                sol.eigenvalues[i],
                dense_vals[i]
            );
        }
    }

    #[test]
    fn zero_potential_recovers_neumann_laplacian_spectrum() {
        let pot = spec("zero2d");
        let grid = FvmGrid::new((0.0, PI), (0.0, PI), 64, 64, &pot).unwrap();
        let op = assemble(&pot, &grid).unwrap();
        let sol = smallest_eigenpairs(&op, 4, 1e-8).unwrap();
        assert!(sol.eigenvalues[0].abs() <= 1e-9, "trivial mode {}", sol.eigenvalues[0]);
        for (i, expected) in [(1, 1.0), (2, 1.0), (3, 2.0)] {
            let got = sol.eigenvalues[i];
            assert!(
                (got - expected).abs() <= 0.01 * expected,
                "mode {i}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn returned_eigenvalues_are_nonnegative() {
        let pot = spec("v2");
        let grid = FvmGrid::new((-3.0, 3.0), (-3.0, 3.0), 24, 24, &pot).unwrap();
        let op = assemble(&pot, &grid).unwrap();
        let sol = smallest_eigenpairs(&op, 5, 1e-9).unwrap();
        for &l in &sol.eigenvalues {
            assert!(l >= -1e-10, "negative eigenvalue {l}");
        }
    }

    #[test]
    fn eigenfunctions_are_mu_orthonormal() {
        let pot = spec("v2");
        let grid = FvmGrid::new((-3.0, 3.0), (-3.0, 3.0), 28, 26, &pot).unwrap();
        let op = assemble(&pot, &grid).unwrap();
        let sol = smallest_eigenpairs(&op, 4, 1e-9).unwrap();
        let phis: Vec<Vec<f64>> = (0..4).map(|i| sol.eigenfunction(&grid, i)).collect();
        for i in 0..4 {
            for j in i..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                let inner = grid.mu_inner(&phis[i], &phis[j]);
                assert!(
                    (inner - target).abs() <= 1e-8,
                    "<phi_{i}, phi_{j}> = {inner}"
                );
            }
        }
    }

    #[test]
    fn interpolation_is_exact_at_cell_centers() {
        let pot = spec("quadratic2d");
        let grid = FvmGrid::new((-1.0, 1.0), (-1.0, 1.0), 8, 6, &pot).unwrap();
        let values: Vec<f64> = (0..grid.n_cells()).map(|k| (k as f64 * 0.7).sin()).collect();
        let table = EigenfunctionTable::from_values(&grid, values.clone());
        let sign = if values.iter().cloned().fold((0.0f64, 0.0), |(ma, mv), v| {
            if v.abs() > ma { (v.abs(), v) } else { (ma, mv) }
        }).1 < 0.0 { -1.0 } else { 1.0 };
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.cell_center(ix, iy);
                let got = table.interpolate(x, y);
                let expected = sign * values[grid.index(ix, iy)];
                assert!((got - expected).abs() <= 1e-14, "cell ({ix},{iy}): {got} vs {expected}");
            }
        }
        assert_eq!(table.clamp_warnings(), 0);
    }

    #[test]
    fn constant_table_interpolates_to_constant() {
        let pot = spec("quadratic2d");
        let grid = FvmGrid::new((-1.0, 1.0), (-1.0, 1.0), 5, 5, &pot).unwrap();
        let table = EigenfunctionTable::from_values(&grid, vec![2.5; 25]);
        for (x, y) in [(0.0, 0.0), (-0.93, 0.41), (0.99, -0.99)] {
            assert!((table.interpolate(x, y) - 2.5).abs() <= 1e-15);
        }
    }

    #[test]
    fn out_of_domain_requests_are_clamped_and_counted() {
        let pot = spec("quadratic2d");
        let grid = FvmGrid::new((-1.0, 1.0), (-1.0, 1.0), 4, 4, &pot).unwrap();
        let values: Vec<f64> = (0..16).map(|k| k as f64).collect();
        let table = EigenfunctionTable::from_values(&grid, values);
        let inside = table.interpolate(0.99, 0.99);
        let outside = table.interpolate(5.0, 5.0);
        assert_eq!(table.clamp_warnings(), 1);
        assert!((outside - table.value_at_cell(3, 3)).abs() <= 1e-12);
        assert!(inside.is_finite());
    }

    #[test]
    fn sign_convention_makes_peak_positive() {
        let pot = spec("quadratic2d");
        let grid = FvmGrid::new((-1.0, 1.0), (-1.0, 1.0), 3, 3, &pot).unwrap();
        let mut values = vec![0.1; 9];
        values[4] = -3.0;
        let table = EigenfunctionTable::from_values(&grid, values);
        assert_eq!(table.value_at_cell(1, 1), 3.0);
    }

    #[test]
    fn interpolant_gradient_matches_finite_differences() {
        let pot = spec("v2");
        let grid = FvmGrid::new((-2.0, 2.0), (-2.0, 2.0), 16, 16, &pot).unwrap();
        let values: Vec<f64> = (0..grid.n_cells())
            .map(|k| ((k % grid.nx) as f64 * 0.3).sin() + ((k / grid.nx) as f64 * 0.2).cos())
            .collect();
        let table = EigenfunctionTable::from_values(&grid, values);
        let h = 1e-7;
        for (x, y) in [(0.11, -0.42), (1.3, 0.9), (-1.7, -1.1)] {
            let (_, g) = table.interpolate_with_gradient(x, y);
            let fx = (table.interpolate(x + h, y) - table.interpolate(x - h, y)) / (2.0 * h);
            let fy = (table.interpolate(x, y + h) - table.interpolate(x, y - h)) / (2.0 * h);
            assert!((g[0] - fx).abs() <= 1e-6 * g[0].abs().max(1.0), "{} vs {fx}", g[0]);
            assert!((g[1] - fy).abs() <= 1e-6 * g[1].abs().max(1.0), "{} vs {fy}", g[1]);
        }
    }

    #[test]
    fn tables_roundtrip_through_csv() {
        let pot = spec("quadratic2d");
        let grid = FvmGrid::new((-1.0, 1.0), (0.0, 1.0), 6, 4, &pot).unwrap();
        let t1 = EigenfunctionTable::from_values(
            &grid,
            (0..24).map(|k| (k as f64 * 0.13).sin()).collect(),
        );
        let t2 = EigenfunctionTable::from_values(
            &grid,
            (0..24).map(|k| (k as f64 * 0.29).cos()).collect(),
        );
        let mut buf = Vec::new();
        write_eigenfunction_tables(&mut buf, &[&t1, &t2]).unwrap();
        let back = read_eigenfunction_tables(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].nx, 6);
        assert_eq!(back[0].ny, 4);
        for k in 0..24 {
            assert!((back[0].values()[k] - t1.values()[k]).abs() <= 1e-12);
            assert!((back[1].values()[k] - t2.values()[k]).abs() <= 1e-12);
        }
        assert!((back[0].hx - grid.hx).abs() <= 1e-12);
        assert!((back[0].hy - grid.hy).abs() <= 1e-12);
    }

    #[test]
    fn overflowing_potential_names_the_cell() {
        use crate::potentials::CustomPotential;
        let pot = PotentialSpec::new(
            CustomPotential::new(
                2,
                |x: &[f64]| if x[0] > 0.0 { f64::INFINITY } else { 0.0 },
                |_, g| g.fill(0.0),
            ),
            1.0,
        )
        .unwrap();
        let err = FvmGrid::new((-1.0, 1.0), (-1.0, 1.0), 4, 4, &pot).unwrap_err();
        assert!(matches!(err, FvmError::BadCellWeight { .. }));
    }
}
