//! Element integration and global assembly on free nodes.
//!
//! Coefficients (permeability, sources) enter as element means of the nodal
//! values; shape-function integrals are exact. Dirichlet rows/columns are
//! eliminated during assembly.

use super::{ElementKind, FemSystem, FieldNodal, Grid2D, SparseMatrixCsr};
use crate::error::{Error, Result};
use nalgebra::DVector;

/// Exact stiffness of a bilinear rectangle `hx × hy` with unit coefficient.
///
/// Corner order is counterclockwise: (0,0), (hx,0), (hx,hy), (0,hy).
pub fn quad_element_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let rx = hy / (6.0 * hx);
    let ry = hx / (6.0 * hy);
    let kx = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    let ky = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            k[i][j] = rx * kx[i][j] + ry * ky[i][j];
        }
    }
    k
}

/// Stiffness of a linear triangle with unit coefficient.
pub fn tri_element_stiffness(p: [(f64, f64); 3]) -> [[f64; 3]; 3] {
    let area = tri_area(p);
    let (b, c) = tri_gradient_coeffs(p);
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
        }
    }
    k
}

pub(crate) fn tri_area(p: [(f64, f64); 3]) -> f64 {
    0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
}

/// Barycentric gradient coefficients: `∇λ_i = (b_i, c_i) / (2|T|)`.
pub(crate) fn tri_gradient_coeffs(p: [(f64, f64); 3]) -> ([f64; 3], [f64; 3]) {
    let b = [p[1].1 - p[2].1, p[2].1 - p[0].1, p[0].1 - p[1].1];
    let c = [p[2].0 - p[1].0, p[0].0 - p[2].0, p[1].0 - p[0].0];
    (b, c)
}

/// Corner nodes of element `e` in assembly order, plus the element area.
///
/// Quads: counterclockwise from the lower-left corner. Triangles: element
/// `2*cell` is (v00, v10, v11), element `2*cell + 1` is (v00, v11, v01).
pub(crate) fn element_corners(grid: &Grid2D, e: usize) -> ([(usize, usize); 4], usize, f64) {
    let (cx_total, _) = grid.n_cells();
    match grid.kind() {
        ElementKind::Quad => {
            let cx = e % cx_total;
            let cy = e / cx_total;
            let corners = [
                (cx, cy),
                (cx + 1, cy),
                (cx + 1, cy + 1),
                (cx, cy + 1),
            ];
            (corners, 4, grid.h() * grid.hy())
        }
        ElementKind::Tri => {
            let cell = e / 2;
            let cx = cell % cx_total;
            let cy = cell / cx_total;
            let v00 = (cx, cy);
            let v10 = (cx + 1, cy);
            let v11 = (cx + 1, cy + 1);
            let v01 = (cx, cy + 1);
            let corners = if e % 2 == 0 {
                [v00, v10, v11, v11]
            } else {
                [v00, v11, v01, v01]
            };
            (corners, 3, 0.5 * grid.h() * grid.hy())
        }
    }
}

pub(crate) fn corner_coords(grid: &Grid2D, corners: &[(usize, usize)]) -> [(f64, f64); 3] {
    let mut out = [(0.0, 0.0); 3];
    for (i, &(ix, iy)) in corners.iter().take(3).enumerate() {
        out[i] = grid.node_coords(ix, iy);
    }
    out
}

/// Per-element coefficients as the mean of the element's corner nodal values.
pub fn nodal_to_element(field: &FieldNodal, grid: &Grid2D) -> Result<Vec<f64>> {
    if !field.matches_grid(grid) {
        return Err(Error::ShapeMismatch {
            context: "nodal_to_element",
            expected: format!("{}x{}", grid.ny(), grid.nx()),
            got: format!("{}x{}", field.ny(), field.nx()),
        });
    }
    let n_elem = grid.n_elements();
    let mut out = Vec::with_capacity(n_elem);
    for e in 0..n_elem {
        let (corners, ncorners, _) = element_corners(grid, e);
        let mut sum = 0.0;
        for &(ix, iy) in corners.iter().take(ncorners) {
            sum += field.get(iy, ix);
        }
        out.push(sum / ncorners as f64);
    }
    Ok(out)
}

/// Right-hand-side selector used by the shared assembly routine.
enum Load<'a> {
    /// Source term given as a nodal field (element means used in integrals).
    Source(&'a FieldNodal),
    /// Zero source with nonzero Dirichlet data lifted into the load.
    DirichletLift(&'a FieldNodal),
}

/// Assembles the Darcy system `−∇·(K∇u) = 1` with homogeneous Dirichlet data.
pub fn assemble_darcy(kappa: &FieldNodal, grid: &Grid2D) -> Result<FemSystem> {
    let ones = FieldNodal::constant(grid.ny(), grid.nx(), 1.0);
    assemble_impl(kappa, grid, Load::Source(&ones))
}

/// Assembles `−∇·(K∇u) = f` for a nodal source `f`, homogeneous Dirichlet data.
pub fn assemble_darcy_with_source(
    kappa: &FieldNodal,
    grid: &Grid2D,
    source: &FieldNodal,
) -> Result<FemSystem> {
    if !source.matches_grid(grid) {
        return Err(Error::ShapeMismatch {
            context: "assemble_darcy_with_source",
            expected: format!("{}x{}", grid.ny(), grid.nx()),
            got: format!("{}x{}", source.ny(), source.nx()),
        });
    }
    assemble_impl(kappa, grid, Load::Source(source))
}

/// Assembles `−∇·(K∇u) = 0` with Dirichlet data `g` lifted into the load:
/// rows stay on free nodes, `F = −A_ib g_b`. Only boundary entries of `g`
/// are read.
pub fn assemble_darcy_lifted(
    kappa: &FieldNodal,
    grid: &Grid2D,
    boundary: &FieldNodal,
) -> Result<FemSystem> {
    if !boundary.matches_grid(grid) {
        return Err(Error::ShapeMismatch {
            context: "assemble_darcy_lifted",
            expected: format!("{}x{}", grid.ny(), grid.nx()),
            got: format!("{}x{}", boundary.ny(), boundary.nx()),
        });
    }
    assemble_impl(kappa, grid, Load::DirichletLift(boundary))
}

fn assemble_impl(kappa: &FieldNodal, grid: &Grid2D, load: Load<'_>) -> Result<FemSystem> {
    if !kappa.matches_grid(grid) {
        return Err(Error::ShapeMismatch {
            context: "assemble_darcy",
            expected: format!("{}x{}", grid.ny(), grid.nx()),
            got: format!("{}x{}", kappa.ny(), kappa.nx()),
        });
    }
    kappa.ensure_positive()?;
    let coeff = nodal_to_element(kappa, grid)?;
    let source_elem = match load {
        Load::Source(f) => Some(nodal_to_element(f, grid)?),
        Load::DirichletLift(_) => None,
    };

    let n_free = grid.n_free();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut f = DVector::zeros(n_free);

    for e in 0..grid.n_elements() {
        let (corners, nc, area) = element_corners(grid, e);
        let k_local: [[f64; 4]; 4] = match grid.kind() {
            ElementKind::Quad => quad_element_stiffness(grid.h(), grid.hy()),
            ElementKind::Tri => {
                let kt = tri_element_stiffness(corner_coords(grid, &corners[..nc]));
                let mut k4 = [[0.0; 4]; 4];
                for i in 0..3 {
                    for j in 0..3 {
                        k4[i][j] = kt[i][j];
                    }
                }
                k4
            }
        };
        let ke = coeff[e];
        let load_weight = area / nc as f64;

        for i in 0..nc {
            let (ix, iy) = corners[i];
            let Some(fi) = grid.free_index(ix, iy) else {
                continue;
            };
            if let Some(src) = &source_elem {
                f[fi] += src[e] * load_weight;
            }
            for j in 0..nc {
                let (jx, jy) = corners[j];
                let a_ij = ke * k_local[i][j];
                match grid.free_index(jx, jy) {
                    Some(fj) => triplets.push((fi, fj, a_ij)),
                    None => {
                        if let Load::DirichletLift(g) = load {
                            f[fi] -= a_ij * g.get(jy, jx);
                        }
                    }
                }
            }
        }
    }

    Ok(FemSystem {
        a: SparseMatrixCsr::from_triplets(n_free, n_free, triplets),
        f,
        grid: grid.clone(),
    })
}
