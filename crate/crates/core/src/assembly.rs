//! P1 finite-element operators on the fine grid.
//!
//! All element integrals are exact: basis gradients are constant per
//! tetrahedron and kappa, beta are sampled once at the element centroid.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CoefficientField, FineGrid, Point3, ProblemSpec};
use crate::linalg::SparseMatrix;

/// Volume and barycentric-coordinate gradients of one tetrahedron.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub volume: f64,
    pub grads: [Point3; 4],
}

impl TetGeometry {
    pub fn new(v: &[Point3; 4]) -> Option<Self> {
        let d = |k: usize| [v[k][0] - v[0][0], v[k][1] - v[0][1], v[k][2] - v[0][2]];
        let (a, b, c) = (d(1), d(2), d(3));
        // Edge vectors as columns; rows of J^-1 are the barycentric gradients.
        let j = Matrix3::new(a[0], b[0], c[0], a[1], b[1], c[1], a[2], b[2], c[2]);
        let det = j.determinant();
        let volume = det / 6.0;
        if !(volume > 0.0) {
            return None;
        }
        let inv = j.try_inverse()?;
        let mut grads = [[0.0; 3]; 4];
        for k in 0..3 {
            grads[k + 1] = [inv[(k, 0)], inv[(k, 1)], inv[(k, 2)]];
        }
        for dim in 0..3 {
            grads[0][dim] = -(grads[1][dim] + grads[2][dim] + grads[3][dim]);
        }
        Some(Self { volume, grads })
    }

    pub fn mass(&self) -> [[f64; 4]; 4] {
        let mut m = [[self.volume / 20.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = self.volume / 10.0;
        }
        m
    }

    /// `coeff * V * grad(l_i) . grad(l_j)`
    pub fn stiffness(&self, coeff: f64) -> [[f64; 4]; 4] {
        let mut k = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                k[i][j] = coeff * self.volume * dot3(self.grads[i], self.grads[j]);
            }
        }
        k
    }

    /// `g_ij = int (beta . grad l_j) l_i = (beta . grad l_j) V / 4`
    pub fn advection(&self, beta: Point3) -> [[f64; 4]; 4] {
        let mut g = [[0.0; 4]; 4];
        for j in 0..4 {
            let bj = dot3(beta, self.grads[j]) * self.volume / 4.0;
            for row in g.iter_mut() {
                row[j] = bj;
            }
        }
        g
    }
}

pub fn dot3(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Bookkeeping between all fine nodes and the unknowns of a reduced system.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub n_full: usize,
    pub free: Vec<usize>,
    pub full_to_free: Vec<Option<usize>>,
}

impl DofMap {
    pub fn identity(n: usize) -> Self {
        Self {
            n_full: n,
            free: (0..n).collect(),
            full_to_free: (0..n).map(Some).collect(),
        }
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| full[i]).collect()
    }

    /// Embeds free values into a full vector, filling the rest with `fill`.
    pub fn extend(&self, free: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; self.n_full];
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = free[k];
        }
        out
    }
}

/// Mass `M`, weighted stiffness `A` and advection `G` matrices.
///
/// After [`eliminate_dirichlet`] the square operators act on free DOFs only,
/// while `load_mass` keeps free rows against all columns so loads can use
/// nodal source values on the boundary too.
#[derive(Debug, Clone)]
pub struct FineOperators {
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    pub advection: SparseMatrix,
    pub load_mass: SparseMatrix,
    pub dofs: DofMap,
}

impl FineOperators {
    pub fn n(&self) -> usize {
        self.mass.n_rows()
    }

    /// `A + G`
    pub fn transport(&self) -> SparseMatrix {
        self.stiffness.add_scaled(&self.advection, 1.0)
    }
}

/// Per-element 4x4 matrices and their global node indices, in element order.
fn element_matrices(
    grid: &FineGrid,
    field: &CoefficientField,
) -> Result<Vec<([usize; 4], [[f64; 4]; 4], [[f64; 4]; 4], [[f64; 4]; 4])>> {
    let kappa = grid.element_kappa(field);
    (0..grid.tet_count())
        .into_par_iter()
        .map(|e| {
            let v = grid.tet_vertices(e);
            let geo = TetGeometry::new(&v).ok_or(Error::DegenerateElement {
                element: e,
                volume: grid.tet_volume(e),
            })?;
            let beta = field.beta_at(grid.centroid(e));
            Ok((
                grid.tets[e],
                geo.mass(),
                geo.stiffness(field.epsilon * kappa[e]),
                geo.advection(beta),
            ))
        })
        .collect()
}

/// Assembles `M`, `A` and `G` on all fine nodes.
pub fn assemble(grid: &FineGrid, field: &CoefficientField) -> Result<FineOperators> {
    let elems = element_matrices(grid, field)?;
    let n = grid.node_count();
    let cap = elems.len() * 16;
    let (mut tm, mut ta, mut tg) = (
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
    );
    // Sequential scatter in element order keeps sums bit-reproducible.
    for (nodes, m, a, g) in &elems {
        for i in 0..4 {
            for j in 0..4 {
                tm.push((nodes[i], nodes[j], m[i][j]));
                ta.push((nodes[i], nodes[j], a[i][j]));
                tg.push((nodes[i], nodes[j], g[i][j]));
            }
        }
    }
    let mass = SparseMatrix::from_triplets(n, n, &tm);
    Ok(FineOperators {
        load_mass: mass.clone(),
        mass,
        stiffness: SparseMatrix::from_triplets(n, n, &ta),
        advection: SparseMatrix::from_triplets(n, n, &tg),
        dofs: DofMap::identity(n),
    })
}

/// Nodal interpolant of the source at time `t` for state `u` (full length).
pub fn nodal_source(grid: &FineGrid, spec: &ProblemSpec, t: f64, u: &[f64]) -> Vec<f64> {
    grid.nodes
        .iter()
        .zip(u)
        .map(|(&x, &ui)| spec.source_at(x, t, ui))
        .collect()
}

/// Load vector `F = M f_nodal` on the operator's rows. `u` has full length.
pub fn assemble_load(
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    t: f64,
    u: &[f64],
) -> Vec<f64> {
    let f = nodal_source(grid, spec, t, u);
    ops.load_mass.mul_vec(&f)
}

/// Removes boundary rows and columns (homogeneous Dirichlet data only).
pub fn eliminate_dirichlet(ops: &FineOperators, grid: &FineGrid, value: f64) -> Result<FineOperators> {
    if value != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "only homogeneous Dirichlet data is supported, got {value}"
        )));
    }
    if ops.dofs.n_free() != ops.dofs.n_full {
        return Err(Error::InvalidArgument("operators are already reduced".into()));
    }
    let free: Vec<usize> = (0..grid.node_count()).filter(|&i| !grid.is_boundary(i)).collect();
    let mut full_to_free = vec![None; grid.node_count()];
    for (k, &i) in free.iter().enumerate() {
        full_to_free[i] = Some(k);
    }
    let all: Vec<usize> = (0..grid.node_count()).collect();
    Ok(FineOperators {
        mass: ops.mass.submatrix(&free, &free),
        stiffness: ops.stiffness.submatrix(&free, &free),
        advection: ops.advection.submatrix(&free, &free),
        load_mass: ops.mass.submatrix(&free, &all),
        dofs: DofMap {
            n_full: grid.node_count(),
            free,
            full_to_free,
        },
    })
}

/// Assembles and reduces in one call.
pub fn assemble_reduced(grid: &FineGrid, field: &CoefficientField) -> Result<FineOperators> {
    eliminate_dirichlet(&assemble(grid, field)?, grid, 0.0)
}
