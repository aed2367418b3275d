//! Structured-grid 2D finite element machinery.
//!
//! Domain is the unit square with homogeneous Dirichlet boundary; nodes form
//! an `nx × ny` lattice, elements are bilinear quads or linear triangles
//! (each cell split along the lower-left/upper-right diagonal). Systems are
//! assembled on the free (interior) nodes only.

mod assembly;
mod metric;
mod nonlinear;
mod solve;

pub use assembly::{
    assemble_darcy, assemble_darcy_lifted, assemble_darcy_with_source, nodal_to_element,
    quad_element_stiffness, tri_element_stiffness,
};
pub use metric::relative_test_mean_error;
pub use nonlinear::{
    plaplace_energy, solve_nonlinear_source, solve_plaplace, NewtonCfg, PLaplaceCfg,
};
pub use solve::{solve_dense_spd, solve_linear, solve_pcg_jacobi};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Element family used to mesh the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementKind {
    /// Bilinear shape functions on rectangular cells.
    Quad,
    /// Linear shape functions on triangles; every cell is split along the
    /// diagonal from its lower-left to its upper-right corner.
    Tri,
}

/// Structured node lattice on the unit square with interior free-node indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    kind: ElementKind,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, kind: ElementKind) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::GridTooSmall { nx, ny });
        }
        Ok(Grid2D {
            nx,
            ny,
            hx: 1.0 / (nx - 1) as f64,
            hy: 1.0 / (ny - 1) as f64,
            kind,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Grid spacing along x; equals `1/(nx-1)`.
    pub fn h(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_free(&self) -> usize {
        (self.nx - 2) * (self.ny - 2)
    }

    /// Free-lattice extent `(width, height)` = `(nx-2, ny-2)`.
    pub fn free_extent(&self) -> (usize, usize) {
        (self.nx - 2, self.ny - 2)
    }

    pub fn node_coords(&self, ix: usize, iy: usize) -> (f64, f64) {
        (ix as f64 * self.hx, iy as f64 * self.hy)
    }

    pub fn is_boundary(&self, ix: usize, iy: usize) -> bool {
        ix == 0 || iy == 0 || ix == self.nx - 1 || iy == self.ny - 1
    }

    /// Free index of node `(ix, iy)`, or `None` on the boundary.
    pub fn free_index(&self, ix: usize, iy: usize) -> Option<usize> {
        if self.is_boundary(ix, iy) {
            None
        } else {
            Some((iy - 1) * (self.nx - 2) + (ix - 1))
        }
    }

    /// Inverse of [`free_index`](Self::free_index).
    pub fn node_of_free(&self, free: usize) -> (usize, usize) {
        let w = self.nx - 2;
        (free % w + 1, free / w + 1)
    }

    /// Number of cells along each axis.
    pub fn n_cells(&self) -> (usize, usize) {
        (self.nx - 1, self.ny - 1)
    }

    /// Number of elements: cells for quads, two triangles per cell for tris.
    pub fn n_elements(&self) -> usize {
        let (cx, cy) = self.n_cells();
        match self.kind {
            ElementKind::Quad => cx * cy,
            ElementKind::Tri => 2 * cx * cy,
        }
    }
}

/// A nodal scalar field (permeability sample or solution) on the full lattice.
///
/// Stored row-major: `values[iy * nx + ix]`, so the matrix is `ny × nx`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldNodal {
    ny: usize,
    nx: usize,
    values: Vec<f64>,
}

impl FieldNodal {
    pub fn new(ny: usize, nx: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != ny * nx {
            return Err(Error::ShapeMismatch {
                context: "FieldNodal::new",
                expected: format!("{} values", ny * nx),
                got: format!("{}", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteField);
        }
        Ok(FieldNodal { ny, nx, values })
    }

    pub fn constant(ny: usize, nx: usize, value: f64) -> Self {
        FieldNodal {
            ny,
            nx,
            values: vec![value; ny * nx],
        }
    }

    pub fn from_fn(grid: &Grid2D, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.node_coords(ix, iy);
                values.push(f(x, y));
            }
        }
        FieldNodal {
            ny: grid.ny,
            nx: grid.nx,
            values,
        }
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn get(&self, iy: usize, ix: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn set(&mut self, iy: usize, ix: usize, v: f64) {
        self.values[iy * self.nx + ix] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matches_grid(&self, grid: &Grid2D) -> bool {
        self.nx == grid.nx && self.ny == grid.ny
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ensure_positive(&self) -> Result<()> {
        let min = self.min();
        if min <= 0.0 {
            return Err(Error::NonPositiveField { min });
        }
        Ok(())
    }

    /// Values at the interior nodes in free-index order.
    pub fn restrict_to_free(&self, grid: &Grid2D) -> Vec<f64> {
        debug_assert!(self.matches_grid(grid));
        let mut out = Vec::with_capacity(grid.n_free());
        for iy in 1..grid.ny - 1 {
            for ix in 1..grid.nx - 1 {
                out.push(self.get(iy, ix));
            }
        }
        out
    }

    /// Embeds free-node values into a full-lattice field, zero on the boundary.
    pub fn from_free(grid: &Grid2D, free: &[f64]) -> Result<Self> {
        if free.len() != grid.n_free() {
            return Err(Error::ShapeMismatch {
                context: "FieldNodal::from_free",
                expected: format!("{}", grid.n_free()),
                got: format!("{}", free.len()),
            });
        }
        let mut field = FieldNodal::constant(grid.ny, grid.nx, 0.0);
        for (k, &v) in free.iter().enumerate() {
            let (ix, iy) = grid.node_of_free(k);
            field.set(iy, ix, v);
        }
        Ok(field)
    }
}

/// Compressed sparse row matrix; pattern is symmetric for the SPD operators
/// assembled here and explicit zeros are dropped at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrixCsr {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrixCsr {
    /// Builds from (row, col, value) triplets, summing duplicates and dropping
    /// entries that cancel to exactly zero.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; nrows + 1];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        let mut i = 0;
        while i < triplets.len() {
            let (r, c, _) = triplets[i];
            let mut sum = 0.0;
            while i < triplets.len() && triplets[i].0 == r && triplets[i].1 == c {
                sum += triplets[i].2;
                i += 1;
            }
            if sum != 0.0 {
                col_indices.push(c);
                values.push(sum);
                row_offsets[r + 1] += 1;
            }
        }
        for r in 0..nrows {
            row_offsets[r + 1] += row_offsets[r];
        }
        SparseMatrixCsr {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != nrows + 1
            || col_indices.len() != values.len()
            || *row_offsets.last().unwrap_or(&0) != values.len()
        {
            return Err(Error::ShapeMismatch {
                context: "SparseMatrixCsr::from_parts",
                expected: format!("offsets len {} ending at nnz", nrows + 1),
                got: format!(
                    "offsets {}, cols {}, vals {}",
                    row_offsets.len(),
                    col_indices.len(),
                    values.len()
                ),
            });
        }
        Ok(SparseMatrixCsr {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        self.col_indices[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
    }

    pub fn matvec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// y = Aᵀ x.
    pub fn tr_matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        y.fill(0.0);
        for r in 0..self.nrows {
            let xr = x[r];
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows.min(self.ncols)];
        for r in 0..d.len() {
            for (c, v) in self.row(r) {
                if c == r {
                    d[r] = v;
                }
            }
        }
        d
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                let vt = self.get(c, r);
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r)
            .find_map(|(cc, v)| (cc == c).then_some(v))
            .unwrap_or(0.0)
    }
}

/// Assembled free-node system `A u = F`.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub a: SparseMatrixCsr,
    pub f: nalgebra::DVector<f64>,
    pub grid: Grid2D,
}

impl FemSystem {
    pub fn n_free(&self) -> usize {
        self.a.nrows()
    }

    /// `‖A u − F‖₂ / ‖F‖₂`.
    pub fn relative_residual(&self, u: &nalgebra::DVector<f64>) -> f64 {
        let au = self.a.matvec_alloc(u.as_slice());
        let mut num = 0.0;
        for (i, &v) in au.iter().enumerate() {
            let d = v - self.f[i];
            num += d * d;
        }
        (num.sqrt()) / self.f.norm().max(f64::MIN_POSITIVE)
    }
}

/// Outcome of an iterative or factorized solve.
#[derive(Clone, Copy, Debug)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}
