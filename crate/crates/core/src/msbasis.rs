//! Multiscale space: per-patch snapshots, local spectral problems,
//! partition-of-unity weights and the projection matrix `R_ms`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{DofMap, FineOperators, TetGeometry};
use crate::error::{Error, Result};
use crate::grid::{CoefficientField, FineGrid, Point3};
use crate::linalg::dense::{eig_sym_generalized_lowest, symmetrize};
use crate::linalg::{BandedLu, EigDecomposition, SparseMatrix};
use crate::pointcloud::{dist, PointCloud};

/// Largest admissible condition number of the Gram matrix `R_ms M R_ms^T`.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Relative diagonal shift applied when a reduced mass matrix is singular.
pub const REGULARIZATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BasisType {
    /// Stiffness against kappa-weighted mass.
    One,
    /// Normal-equation operator `(A+G)^T M (A+G)` against `M^2`.
    Two,
}

impl BasisType {
    pub fn number(self) -> u8 {
        match self {
            BasisType::One => 1,
            BasisType::Two => 2,
        }
    }
}

impl TryFrom<u8> for BasisType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(BasisType::One),
            2 => Ok(BasisType::Two),
            _ => Err(Error::Parse(format!("basis type must be 1 or 2, got {v}"))),
        }
    }
}

impl From<BasisType> for u8 {
    fn from(t: BasisType) -> u8 {
        t.number()
    }
}

impl fmt::Display for BasisType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for BasisType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("invalid basis type '{s}'")))?;
        BasisType::try_from(v)
    }
}

/// Operators integrated over the elements of one patch, indexed by the
/// patch's ascending node list.
#[derive(Debug, Clone)]
pub struct PatchOperators {
    pub nodes: Vec<usize>,
    pub stiffness: SparseMatrix,
    pub advection: SparseMatrix,
    pub mass: SparseMatrix,
    /// `int eps kappa phi_i phi_j` over the patch.
    pub kappa_mass: SparseMatrix,
}

impl PatchOperators {
    pub fn transport(&self) -> SparseMatrix {
        self.stiffness.add_scaled(&self.advection, 1.0)
    }

    /// Local position of a global node, if it belongs to the patch.
    pub fn local(&self, node: usize) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }
}

/// Assembles the patch operators from the given elements.
pub fn patch_operators(
    grid: &FineGrid,
    field: &CoefficientField,
    kappa: &[f64],
    elements: &[usize],
    nodes: &[usize],
) -> Result<PatchOperators> {
    let n = nodes.len();
    let local = |v: usize| {
        nodes
            .binary_search(&v)
            .map_err(|_| Error::InvalidArgument(format!("node {v} missing from patch node list")))
    };
    let cap = elements.len() * 16;
    let mut tm = Vec::with_capacity(cap);
    let mut ta = Vec::with_capacity(cap);
    let mut tg = Vec::with_capacity(cap);
    let mut tb = Vec::with_capacity(cap);
    for &e in elements {
        let geo = TetGeometry::new(&grid.tet_vertices(e)).ok_or(Error::DegenerateElement {
            element: e,
            volume: grid.tet_volume(e),
        })?;
        let weight = field.epsilon * kappa[e];
        let m = geo.mass();
        let a = geo.stiffness(weight);
        let g = geo.advection(field.beta_at(grid.centroid(e)));
        let mut idx = [0usize; 4];
        for (k, &v) in grid.tets[e].iter().enumerate() {
            idx[k] = local(v)?;
        }
        for i in 0..4 {
            for j in 0..4 {
                tm.push((idx[i], idx[j], m[i][j]));
                ta.push((idx[i], idx[j], a[i][j]));
                tg.push((idx[i], idx[j], g[i][j]));
                tb.push((idx[i], idx[j], weight * m[i][j]));
            }
        }
    }
    Ok(PatchOperators {
        nodes: nodes.to_vec(),
        stiffness: SparseMatrix::from_triplets(n, n, &ta),
        advection: SparseMatrix::from_triplets(n, n, &tg),
        mass: SparseMatrix::from_triplets(n, n, &tm),
        kappa_mass: SparseMatrix::from_triplets(n, n, &tb),
    })
}

/// Discrete harmonic extensions of the boundary deltas of one patch.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    pub patch: usize,
    /// Global node indices of `J(S_i)`, ascending.
    pub boundary: Vec<usize>,
    /// `n_patch x |J|`; column `j` is the snapshot for `boundary[j]`.
    pub functions: DMatrix<f64>,
}

impl SnapshotSpace {
    pub fn len(&self) -> usize {
        self.functions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.ncols() == 0
    }
}

/// Solves `(A_i + G_i) phi = 0` on interior patch nodes with `phi = delta_j`
/// on `J(S_i)`, sharing one factorization across all boundary nodes.
pub fn snapshots(patch: usize, ops: &PatchOperators, boundary: &[usize]) -> Result<SnapshotSpace> {
    let n = ops.nodes.len();
    let mut is_bd = vec![false; n];
    let mut bd_local = Vec::with_capacity(boundary.len());
    for &v in boundary {
        let l = ops
            .local(v)
            .ok_or_else(|| Error::InvalidArgument(format!("boundary node {v} outside patch")).in_patch(patch))?;
        is_bd[l] = true;
        bd_local.push(l);
    }
    if bd_local.is_empty() {
        return Err(Error::InvalidArgument("empty patch boundary".into()).in_patch(patch));
    }
    let interior: Vec<usize> = (0..n).filter(|&l| !is_bd[l]).collect();
    let mut functions = DMatrix::zeros(n, bd_local.len());
    for (j, &l) in bd_local.iter().enumerate() {
        functions[(l, j)] = 1.0;
    }
    if !interior.is_empty() {
        let k = ops.transport();
        let k_ii = k.submatrix(&interior, &interior);
        let k_ij = k.submatrix(&interior, &bd_local);
        let lu = BandedLu::factor(&k_ii).map_err(|e| e.in_patch(patch))?;
        let mut rhs = -k_ij.to_dense();
        lu.solve_columns(&mut rhs);
        for (r, &l) in interior.iter().enumerate() {
            for j in 0..bd_local.len() {
                functions[(l, j)] = rhs[(r, j)];
            }
        }
    }
    Ok(SnapshotSpace {
        patch,
        boundary: boundary.to_vec(),
        functions,
    })
}

/// Selected local eigenpairs, projected to the patch nodes.
#[derive(Debug, Clone)]
pub struct PatchModes {
    pub eigenvalues: Vec<f64>,
    /// `n_patch x k`, columns ordered by ascending eigenvalue.
    pub modes: DMatrix<f64>,
}

impl PatchModes {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// `R S R^T` for the snapshot matrix `R` (rows = snapshots).
fn reduce(r_t: &DMatrix<f64>, s: &SparseMatrix) -> DMatrix<f64> {
    let sr = s.mul_dense(r_t);
    let mut out = r_t.transpose() * sr;
    symmetrize(&mut out);
    out
}

fn solve_reduced(patch: usize, a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<EigDecomposition> {
    if k > a.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{k} modes requested but the snapshot space has dimension {}",
            a.nrows()
        ))
        .in_patch(patch));
    }
    match eig_sym_generalized_lowest(a, b, k) {
        Ok(d) => Ok(d),
        Err(Error::NotPositiveDefinite { index, value }) => {
            let shift = REGULARIZATION * b.trace();
            log::warn!(
                "patch {patch}: reduced mass not positive definite (pivot {index} = {value:e}); shifting by {shift:e}"
            );
            let mut b = b.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += shift;
            }
            eig_sym_generalized_lowest(a, &b, k).map_err(|e| e.in_patch(patch))
        }
        Err(e) => Err(e.in_patch(patch)),
    }
}

fn project(snap: &SnapshotSpace, d: EigDecomposition) -> PatchModes {
    PatchModes {
        modes: &snap.functions * &d.vectors,
        eigenvalues: d.eigenvalues,
    }
}

/// Type 1: `R A_i R^T v = lambda R B_i R^T v` with `B_i` the eps-kappa mass.
pub fn spectral_type1(snap: &SnapshotSpace, ops: &PatchOperators, n_modes: usize) -> Result<PatchModes> {
    let a = reduce(&snap.functions, &ops.stiffness);
    let b = reduce(&snap.functions, &ops.kappa_mass);
    Ok(project(snap, solve_reduced(snap.patch, &a, &b, n_modes)?))
}

/// Type 2: `D_i = (A_i+G_i)^T M_i (A_i+G_i)` against `N_i = M_i^2`.
pub fn spectral_type2(snap: &SnapshotSpace, ops: &PatchOperators, n_modes: usize) -> Result<PatchModes> {
    let kr = ops.transport().mul_dense(&snap.functions);
    let mkr = ops.mass.mul_dense(&kr);
    let mut d = kr.transpose() * mkr;
    symmetrize(&mut d);
    let mr = ops.mass.mul_dense(&snap.functions);
    let mut n = mr.transpose() * &mr;
    symmetrize(&mut n);
    Ok(project(snap, solve_reduced(snap.patch, &d, &n, n_modes)?))
}

/// Local spectral modes of one patch for the requested basis types.
#[derive(Debug, Clone)]
pub struct PatchBasis {
    pub nodes: Vec<usize>,
    pub type1: Option<PatchModes>,
    pub type2: Option<PatchModes>,
}

impl PatchBasis {
    pub fn modes(&self, t: BasisType) -> Option<&PatchModes> {
        match t {
            BasisType::One => self.type1.as_ref(),
            BasisType::Two => self.type2.as_ref(),
        }
    }
}

/// Runs snapshot and spectral stages for every patch, keeping `max_modes`
/// eigenpairs per requested type. Results are in patch order.
pub fn build_patch_bases(
    grid: &FineGrid,
    field: &CoefficientField,
    cloud: &PointCloud,
    types: &[BasisType],
    max_modes: usize,
) -> Result<Vec<PatchBasis>> {
    let kappa = grid.element_kappa(field);
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let ops = patch_operators(grid, field, &kappa, &cloud.elements[i], &cloud.nodes[i])
                .map_err(|e| e.in_patch(i))?;
            let snap = snapshots(i, &ops, &cloud.boundary_nodes[i])?;
            let type1 = if types.contains(&BasisType::One) {
                Some(spectral_type1(&snap, &ops, max_modes)?)
            } else {
                None
            };
            let type2 = if types.contains(&BasisType::Two) {
                Some(spectral_type2(&snap, &ops, max_modes)?)
            } else {
                None
            };
            log::debug!("patch {i}: {} nodes, {} snapshots", ops.nodes.len(), snap.len());
            Ok(PatchBasis {
                nodes: ops.nodes,
                type1,
                type2,
            })
        })
        .collect()
}

/// Compactly supported cubic kernel on `r = |x - x_i| / r_i`.
pub fn kernel(r: f64) -> f64 {
    if r <= 0.5 {
        2.0 * (2.0 / 3.0 + 4.0 * (r - 1.0) * r * r)
    } else if r <= 1.0 {
        2.0 * (4.0 / 3.0) * (1.0 - r).powi(3)
    } else {
        0.0
    }
}

fn eta(cloud: &PointCloud, i: usize, x: Point3) -> f64 {
    kernel(dist(x, cloud.points[i]) / cloud.radii[i])
}

/// Shepard weight `W_i(x) = eta_i(x) / sum_j eta_j(x)` over all balls.
pub fn pou_weight(cloud: &PointCloud, i: usize, x: Point3) -> Result<f64> {
    let total: f64 = (0..cloud.len()).map(|j| eta(cloud, j, x)).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(format!("point {x:?} is not covered by any patch")));
    }
    Ok(eta(cloud, i, x) / total)
}

/// Nodal partition of unity: for each patch, weights on its node list.
///
/// The Shepard sum at a node runs over the patches whose node set contains
/// it, so that truncating `W_i` to the nodes of `S_i` keeps `sum_i W_i = 1`.
pub fn nodal_pou(grid: &FineGrid, cloud: &PointCloud) -> Result<Vec<Vec<f64>>> {
    let raw: Vec<Vec<f64>> = (0..cloud.len())
        .map(|i| cloud.nodes[i].iter().map(|&v| eta(cloud, i, grid.nodes[v])).collect())
        .collect();
    let mut total = vec![0.0; grid.node_count()];
    for (i, w) in raw.iter().enumerate() {
        for (&v, &e) in cloud.nodes[i].iter().zip(w) {
            total[v] += e;
        }
    }
    let bad: Vec<usize> = (0..grid.node_count()).filter(|&v| !(total[v] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} fine nodes have zero partition-of-unity weight (first: {})",
            bad.len(),
            bad[0]
        )));
    }
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, w)| cloud.nodes[i].iter().zip(w).map(|(&v, e)| e / total[v]).collect())
        .collect())
}

/// Identifies one row of `R_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisMeta {
    pub patch: usize,
    pub mode: usize,
    pub eigenvalue: f64,
    pub basis_type: BasisType,
}

/// Rows are `W_i phi_k^{S_i}` on free fine DOFs, ordered patch-major.
#[derive(Debug, Clone)]
pub struct MultiscaleSpace {
    pub r_ms: SparseMatrix,
    pub meta: Vec<BasisMeta>,
    pub n_basis: usize,
    pub basis_type: BasisType,
}

impl MultiscaleSpace {
    pub fn dim(&self) -> usize {
        self.r_ms.n_rows()
    }

    /// Fine free-DOF vector `R_ms^T c`.
    pub fn prolongate(&self, c: &[f64]) -> Vec<f64> {
        self.r_ms.mul_vec_transpose(c)
    }

    /// Coarse vector `R_ms v`.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.r_ms.mul_vec(v)
    }

    /// Writes `R_ms` in coordinate format and the row metadata.
    pub fn write<W1: Write, W2: Write>(&self, matrix: W1, mut meta: W2) -> std::io::Result<()> {
        self.r_ms.write_coo(matrix)?;
        writeln!(meta, "# n_basis {} basis_type {}", self.n_basis, self.basis_type)?;
        writeln!(meta, "# row patch mode eigenvalue type")?;
        for (r, m) in self.meta.iter().enumerate() {
            writeln!(meta, "{r} {} {} {:e} {}", m.patch, m.mode, m.eigenvalue, m.basis_type)?;
        }
        Ok(())
    }

    pub fn read<R1: BufRead, R2: BufRead>(matrix: R1, meta: R2) -> Result<Self> {
        let r_ms = SparseMatrix::read_coo(matrix)?;
        let mut header = None;
        let mut rows = Vec::new();
        for line in meta.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# n_basis ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 || parts[1] != "basis_type" {
                    return Err(Error::Parse(format!("bad metadata header '{line}'")));
                }
                let nb: usize = parts[0].parse().map_err(|_| Error::Parse(line.to_string()))?;
                header = Some((nb, parts[2].parse::<BasisType>()?));
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad metadata row '{line}'")));
            }
            let p = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(line.to_string()));
            rows.push(BasisMeta {
                patch: p(f[1])?,
                mode: p(f[2])?,
                eigenvalue: f[3].parse().map_err(|_| Error::Parse(line.to_string()))?,
                basis_type: f[4].parse()?,
            });
        }
        let (n_basis, basis_type) = header.ok_or_else(|| Error::Parse("missing metadata header".into()))?;
        if rows.len() != r_ms.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: r_ms.n_rows(),
                found: rows.len(),
            });
        }
        Ok(Self {
            r_ms,
            meta: rows,
            n_basis,
            basis_type,
        })
    }
}

/// Assembles `R_ms` from the first `n_basis` modes of each patch, dropping
/// the Dirichlet columns.
pub fn assemble_rms(
    bases: &[PatchBasis],
    pou: &[Vec<f64>],
    dofs: &DofMap,
    basis_type: BasisType,
    n_basis: usize,
) -> Result<MultiscaleSpace> {
    if bases.len() != pou.len() {
        return Err(Error::DimensionMismatch {
            expected: bases.len(),
            found: pou.len(),
        });
    }
    let mut triplets = Vec::new();
    let mut meta = Vec::with_capacity(bases.len() * n_basis);
    for (i, (pb, w)) in bases.iter().zip(pou).enumerate() {
        let modes = pb.modes(basis_type).ok_or_else(|| {
            Error::InvalidArgument(format!("type {basis_type} modes were not computed")).in_patch(i)
        })?;
        if modes.len() < n_basis {
            return Err(Error::InvalidArgument(format!(
                "{n_basis} modes requested, {} available",
                modes.len()
            ))
            .in_patch(i));
        }
        for k in 0..n_basis {
            let row = meta.len();
            for (l, &v) in pb.nodes.iter().enumerate() {
                if let Some(col) = dofs.full_to_free[v] {
                    let value = w[l] * modes.modes[(l, k)];
                    if value != 0.0 {
                        triplets.push((row, col, value));
                    }
                }
            }
            meta.push(BasisMeta {
                patch: i,
                mode: k,
                eigenvalue: modes.eigenvalues[k],
                basis_type,
            });
        }
    }
    Ok(MultiscaleSpace {
        r_ms: SparseMatrix::from_triplets(meta.len(), dofs.n_free(), &triplets),
        meta,
        n_basis,
        basis_type,
    })
}

/// Dense Gram matrix `R_ms M R_ms^T`.
pub fn gram(space: &MultiscaleSpace, mass: &SparseMatrix) -> DMatrix<f64> {
    let r = &space.r_ms;
    let mr = mass.matmul(&r.transpose());
    let mut g = r.matmul(&mr).to_dense();
    symmetrize(&mut g);
    g
}

/// Spectral condition number of the Gram matrix; fails above the limit.
pub fn check_gram(space: &MultiscaleSpace, mass: &SparseMatrix) -> Result<f64> {
    let ev = gram(space, mass).symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > GRAM_CONDITION_LIMIT {
        return Err(Error::LinearDependence(cond));
    }
    Ok(cond)
}

/// [`assemble_rms`] followed by the Gram conditioning check.
pub fn build_rms(
    bases: &[PatchBasis],
    pou: &[Vec<f64>],
    ops: &FineOperators,
    basis_type: BasisType,
    n_basis: usize,
) -> Result<MultiscaleSpace> {
    let space = assemble_rms(bases, pou, &ops.dofs, basis_type, n_basis)?;
    let cond = check_gram(&space, &ops.mass)?;
    log::info!("R_ms: {} rows, Gram condition {cond:.3e}", space.dim());
    Ok(space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_reduced;
    use crate::grid::{ChannelPreset, Velocity};
    use crate::pointcloud::build_memberships;

    fn lattice(m: usize) -> Vec<Point3> {
        let mut pts = Vec::new();
        for k in 0..m {
            for j in 0..m {
                for i in 0..m {
                    let c = |t: usize| (t as f64 + 0.5) / m as f64;
                    pts.push([c(i), c(j), c(k)]);
                }
            }
        }
        pts
    }

    fn cloud(grid: &FineGrid, m: usize, radius: f64) -> PointCloud {
        let pts = lattice(m);
        let r = vec![radius; pts.len()];
        build_memberships(grid, &pts, &r).unwrap()
    }

    fn patch_setup(grid: &FineGrid, field: &CoefficientField, pc: &PointCloud, i: usize) -> (PatchOperators, SnapshotSpace) {
        let kappa = grid.element_kappa(field);
        let ops = patch_operators(grid, field, &kappa, &pc.elements[i], &pc.nodes[i]).unwrap();
        let snap = snapshots(i, &ops, &pc.boundary_nodes[i]).unwrap();
        (ops, snap)
    }

    #[test]
    fn kernel_values() {
        assert!((kernel(0.0) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(kernel(1.0), 0.0);
        assert_eq!(kernel(1.5), 0.0);
        let left: f64 = 2.0 * (2.0 / 3.0 + 4.0 * (0.5 - 1.0) * 0.25);
        let right: f64 = 2.0 * (4.0 / 3.0) * 0.125;
        assert!((left - 1.0 / 3.0).abs() < 1e-15);
        assert!((right - 1.0 / 3.0).abs() < 1e-15);
        assert!((kernel(0.5) - kernel(0.5 + 1e-12)).abs() < 1e-10);
    }

    #[test]
    fn basis_type_parsing() {
        assert_eq!("1".parse::<BasisType>().unwrap(), BasisType::One);
        assert_eq!(" 2".parse::<BasisType>().unwrap(), BasisType::Two);
        assert!("3".parse::<BasisType>().is_err());
        assert_eq!(BasisType::Two.to_string(), "2");
    }

    #[test]
    fn snapshot_deltas_and_sum() {
        let grid = FineGrid::new(8).unwrap();
        let field = CoefficientField::new(1000.0, &ChannelPreset::PaperLike, 1.0, Velocity::Shear).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let (ops, snap) = patch_setup(&grid, &field, &pc, 3);
        assert_eq!(snap.len(), pc.boundary_nodes[3].len());
        for (j, &v) in snap.boundary.iter().enumerate() {
            for (jj, &w) in snap.boundary.iter().enumerate() {
                let l = ops.local(w).unwrap();
                assert_eq!(snap.functions[(l, j)], if jj == j { 1.0 } else { 0.0 }, "node {v}");
            }
        }
        // Constants are discrete solutions with boundary data summing to one.
        for l in 0..ops.nodes.len() {
            let s: f64 = snap.functions.row(l).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
        // Interior residual vanishes.
        let k = ops.transport();
        let res = k.mul_dense(&snap.functions);
        let is_bd: Vec<bool> = ops.nodes.iter().map(|v| snap.boundary.binary_search(v).is_ok()).collect();
        for l in 0..ops.nodes.len() {
            if !is_bd[l] {
                assert!(res.row(l).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn snapshots_obey_maximum_principle() {
        let grid = FineGrid::new(10).unwrap();
        let field = CoefficientField::homogeneous(1.0, Velocity::Zero);
        let pts = vec![[0.5, 0.5, 0.5]];
        let pc = build_memberships(&grid, &pts, &[0.2]).ok();
        // A single small ball leaves elements uncovered; build the patch by hand.
        assert!(pc.is_none());
        let far = |e: usize| grid.tets[e].iter().map(|&v| dist(grid.nodes[v], pts[0])).fold(0.0, f64::max);
        let elements: Vec<usize> = (0..grid.tet_count()).filter(|&e| far(e) <= 0.2).collect();
        let mut nodes: Vec<usize> = elements.iter().flat_map(|&e| grid.tets[e]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let kappa = grid.element_kappa(&field);
        let ops = patch_operators(&grid, &field, &kappa, &elements, &nodes).unwrap();
        // Boundary: nodes with an incident element outside the patch.
        let mut inside_star = vec![true; grid.node_count()];
        for (e, t) in grid.tets.iter().enumerate() {
            if elements.binary_search(&e).is_err() {
                for &v in t {
                    inside_star[v] = false;
                }
            }
        }
        let boundary: Vec<usize> = nodes.iter().copied().filter(|&v| !inside_star[v]).collect();
        assert!(boundary.len() < nodes.len());
        let snap = snapshots(0, &ops, &boundary).unwrap();

        // Dense oracle for the interior solve.
        let interior: Vec<usize> = (0..nodes.len()).filter(|&l| inside_star[nodes[l]]).collect();
        let bd_local: Vec<usize> = boundary.iter().map(|&v| ops.local(v).unwrap()).collect();
        let k = ops.transport().to_dense();
        let kii = k.select_rows(&interior).select_columns(&interior);
        let kib = k.select_rows(&interior).select_columns(&bd_local);
        let want = kii.lu().solve(&(-kib)).unwrap();
        for (r, &l) in interior.iter().enumerate() {
            for j in 0..boundary.len() {
                let v = snap.functions[(l, j)];
                assert!((v - want[(r, j)]).abs() < 1e-10);
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn type1_constant_mode_and_order() {
        let grid = FineGrid::new(8).unwrap();
        let field = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let (ops, snap) = patch_setup(&grid, &field, &pc, 0);
        let m = spectral_type1(&snap, &ops, 6).unwrap();
        assert!(m.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(m.eigenvalues[0].abs() < 1e-8 * m.eigenvalues[5]);
        let c = m.modes.column(0);
        let mean = c.mean();
        assert!(c.iter().all(|v| (v - mean).abs() < 1e-6 * mean.abs()));
        // Prefix property.
        let m3 = spectral_type1(&snap, &ops, 3).unwrap();
        assert_eq!(&m.eigenvalues[..3], &m3.eigenvalues[..]);
    }

    #[test]
    fn type1_two_snapshot_toy() {
        // Two nodes on a segment-like toy: snapshots are the hat functions.
        let functions = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let snap = SnapshotSpace {
            patch: 0,
            boundary: vec![0, 1],
            functions,
        };
        let a = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 3.0]));
        let b = SparseMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        let ops = PatchOperators {
            nodes: vec![0, 1],
            stiffness: a,
            advection: SparseMatrix::from_triplets(2, 2, &[]),
            mass: b.clone(),
            kappa_mass: b,
        };
        let m = spectral_type1(&snap, &ops, 2).unwrap();
        // det(A - l B) = (2-2l)(3-l) - (-1-0.5l)^2 = 1.75 l^2 - 9 l + 5
        let (qa, qb, qc): (f64, f64, f64) = (1.75, -9.0, 5.0);
        let disc = (qb * qb - 4.0 * qa * qc).sqrt();
        let roots = [(-qb - disc) / (2.0 * qa), (-qb + disc) / (2.0 * qa)];
        for k in 0..2 {
            assert!((m.eigenvalues[k] - roots[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn type2_spectrum() {
        let grid = FineGrid::new(8).unwrap();
        let field = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let (ops, snap) = patch_setup(&grid, &field, &pc, 5);
        let m = spectral_type2(&snap, &ops, 8).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| l >= -1e-10));
        assert!(m.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(m.eigenvalues[0].abs() < 1e-8 * m.eigenvalues[7]);
    }

    fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let s = (qa.transpose() * qb).singular_values();
        s.min().clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn advection_separates_spectral_types() {
        let grid = FineGrid::new(8).unwrap();
        let field = CoefficientField::new(1000.0, &ChannelPreset::PaperLike, 1.0 / 20.0, Velocity::Shear).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let (ops, snap) = patch_setup(&grid, &field, &pc, 2);
        let m1 = spectral_type1(&snap, &ops, 5).unwrap();
        let m2 = spectral_type2(&snap, &ops, 5).unwrap();
        let angle = largest_principal_angle(&m1.modes, &m2.modes);
        assert!(angle > 0.01, "angle {angle}");
        // Same subspace compared with itself.
        assert!(largest_principal_angle(&m1.modes, &m1.modes) < 1e-6);
    }

    #[test]
    fn partition_of_unity() {
        let grid = FineGrid::new(8).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let pou = nodal_pou(&grid, &pc).unwrap();
        let mut sum = vec![0.0; grid.node_count()];
        for (i, w) in pou.iter().enumerate() {
            for (&v, &x) in pc.nodes[i].iter().zip(w) {
                assert!(x >= 0.0);
                sum[v] += x;
            }
        }
        assert!(sum.iter().all(|s| (s - 1.0).abs() <= 1e-14));
        for &x in &[[0.3, 0.2, 0.9], [0.5, 0.5, 0.5]] {
            let s: f64 = (0..pc.len()).map(|i| pou_weight(&pc, i, x).unwrap()).sum();
            assert!((s - 1.0).abs() <= 1e-14);
        }
    }

    fn small_space(field: &CoefficientField, n_basis: usize, t: BasisType) -> (FineGrid, FineOperators, PointCloud, MultiscaleSpace) {
        let grid = FineGrid::new(8).unwrap();
        let ops = assemble_reduced(&grid, field).unwrap();
        let pc = cloud(&grid, 2, 0.7);
        let bases = build_patch_bases(&grid, field, &pc, &[t], n_basis).unwrap();
        let pou = nodal_pou(&grid, &pc).unwrap();
        let space = build_rms(&bases, &pou, &ops, t, n_basis).unwrap();
        (grid, ops, pc, space)
    }

    #[test]
    fn rms_shape_support_and_boundary() {
        let field = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Shear).unwrap();
        let (grid, ops, pc, space) = small_space(&field, 3, BasisType::One);
        assert_eq!(space.dim(), pc.len() * 3);
        assert_eq!(space.r_ms.n_cols(), ops.n());
        for (r, m) in space.meta.iter().enumerate() {
            assert_eq!((m.patch, m.mode), (r / 3, r % 3));
            for &c in space.r_ms.row(r).0 {
                let node = ops.dofs.free[c];
                assert!(pc.nodes[m.patch].binary_search(&node).is_ok());
                assert!(!grid.is_boundary(node));
            }
        }
    }

    #[test]
    fn constants_are_reproduced() {
        let field = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
        let (_, ops, _, space) = small_space(&field, 1, BasisType::One);
        // Least-squares fit of the constant: min |R^T c - 1|.
        let rt = space.r_ms.transpose().to_dense();
        let ones = nalgebra::DVector::from_element(ops.n(), 1.0);
        let c = (rt.transpose() * &rt).lu().solve(&(rt.transpose() * &ones)).unwrap();
        let fit = &rt * c;
        assert!((fit - ones).amax() < 1e-8);
    }

    #[test]
    fn persistence_round_trip() {
        let field = CoefficientField::homogeneous(1.0, Velocity::Shear);
        let (_, _, _, space) = small_space(&field, 2, BasisType::Two);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        space.write(&mut a, &mut b).unwrap();
        let back = MultiscaleSpace::read(&a[..], &b[..]).unwrap();
        assert_eq!(back.n_basis, 2);
        assert_eq!(back.basis_type, BasisType::Two);
        assert_eq!(back.meta, space.meta);
        assert_eq!(back.r_ms.to_dense(), space.r_ms.to_dense());
    }
}
