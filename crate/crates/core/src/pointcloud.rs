//! Coarse point cloud: density field, probabilistic centroidal Voronoi
//! points, coverage radii and the fine-element memberships of each patch.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::assemble;
use crate::error::{Error, Result};
use crate::grid::{CoefficientField, FineGrid, Point3, ProblemSpec};
use crate::linalg::solve_general;

/// Nodal density on the fine grid used to place coarse points.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub values: Vec<f64>,
    pub alpha: f64,
    pub eps_bd: f64,
}

impl DensityField {
    pub fn uniform(grid: &FineGrid, value: f64) -> Self {
        Self {
            values: vec![value; grid.node_count()],
            alpha: 0.0,
            eps_bd: value,
        }
    }

    /// Piecewise-linear interpolation.
    pub fn at(&self, grid: &FineGrid, x: Point3) -> f64 {
        let (e, bary) = grid.locate(x);
        grid.tets[e]
            .iter()
            .zip(bary)
            .map(|(&v, w)| w * self.values[v])
            .sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }
}

/// Solves `alpha(-eps div(kappa grad rho) + beta . grad rho) + rho = u0` with
/// `rho = eps_bd` on the boundary, then clamps from below at `eps_bd`.
pub fn solve_density(
    grid: &FineGrid,
    field: &CoefficientField,
    spec: &ProblemSpec,
    alpha: f64,
    eps_bd: f64,
) -> Result<DensityField> {
    if !(alpha > 0.0) || !(eps_bd > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha and eps_bd must be positive (got {alpha}, {eps_bd})"
        )));
    }
    let ops = assemble(grid, field)?;
    let k = ops
        .stiffness
        .add_scaled(&ops.advection, 1.0)
        .scale(alpha)
        .add_scaled(&ops.mass, 1.0);
    let u0: Vec<f64> = grid.nodes.iter().map(|&x| spec.initial_at(x)).collect();
    let rhs_full = ops.mass.mul_vec(&u0);

    let free: Vec<usize> = (0..grid.node_count()).filter(|&i| !grid.is_boundary(i)).collect();
    let bnd = &grid.boundary_nodes;
    let k_ii = k.submatrix(&free, &free);
    let k_ib = k.submatrix(&free, bnd);
    let lift = k_ib.mul_vec(&vec![eps_bd; bnd.len()]);
    let rhs: Vec<f64> = free.iter().zip(&lift).map(|(&i, l)| rhs_full[i] - l).collect();
    let rho_i = solve_general(&k_ii, &rhs, 1e-10)?;

    let mut values = vec![eps_bd; grid.node_count()];
    for (k, &i) in free.iter().enumerate() {
        values[i] = rho_i[k].max(eps_bd);
    }
    Ok(DensityField {
        values,
        alpha,
        eps_bd,
    })
}

/// Parameters of the probabilistic CVT iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvtParams {
    pub iterations: usize,
    pub samples: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl CvtParams {
    pub fn paper() -> Self {
        Self {
            iterations: 200,
            samples: 50_000,
            alpha1: 0.5,
            alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            samples: 10_000,
            ..Self::paper()
        }
    }

    fn validate(&self) -> Result<()> {
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 || (self.beta1 + self.beta2 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "CVT weights must satisfy alpha1+alpha2 = beta1+beta2 = 1 (got {}, {})",
                self.alpha1 + self.alpha2,
                self.beta1 + self.beta2
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("CVT needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Rejection sampler for the piecewise-linear density.
struct DensitySampler<'a> {
    grid: &'a FineGrid,
    density: &'a DensityField,
    envelope: f64,
}

impl DensitySampler<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        loop {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let u = rng.gen::<f64>() * self.envelope;
            if u < self.density.at(self.grid, x) {
                return x;
            }
        }
    }
}

/// Index of the nearest point; ties go to the lowest index.
pub fn nearest(points: &[Point3], y: Point3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, y);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn dist2(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn dist(a: Point3, b: Point3) -> f64 {
    dist2(a, b).sqrt()
}

const ASSIGN_CHUNK: usize = 1024;

/// Result of the CVT iteration together with the per-iteration Monte-Carlo
/// quantization energy (mean squared distance of the samples to their
/// nearest generator, before each update).
#[derive(Debug, Clone)]
pub struct CvtOutput {
    pub points: Vec<Point3>,
    pub energy: Vec<f64>,
}

/// Probabilistic construction of centroidal Voronoi points.
pub fn cvt_points(
    grid: &FineGrid,
    density: &DensityField,
    n_points: usize,
    params: &CvtParams,
    seed: u64,
) -> Result<CvtOutput> {
    params.validate()?;
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one coarse point".into()));
    }
    let envelope = density.max();
    if !(envelope > 0.0) {
        return Err(Error::InvalidArgument("density must be positive somewhere".into()));
    }
    let sampler = DensitySampler {
        grid,
        density,
        envelope,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Point3> = (0..n_points).map(|_| sampler.sample(&mut rng)).collect();
    let mut counters = vec![1.0f64; n_points];
    let mut energy = Vec::with_capacity(params.iterations);
    let mut samples = vec![[0.0; 3]; params.samples];

    for _ in 0..params.iterations {
        for s in samples.iter_mut() {
            *s = sampler.sample(&mut rng);
        }
        // Fixed chunking and in-order reduction keep the sums independent of
        // the thread count.
        let partials: Vec<(Vec<[f64; 4]>, f64)> = samples
            .par_chunks(ASSIGN_CHUNK)
            .map(|chunk| {
                let mut acc = vec![[0.0; 4]; n_points];
                let mut e = 0.0;
                for &y in chunk {
                    let (i, d2) = nearest(&points, y);
                    acc[i][0] += y[0];
                    acc[i][1] += y[1];
                    acc[i][2] += y[2];
                    acc[i][3] += 1.0;
                    e += d2;
                }
                (acc, e)
            })
            .collect();
        let mut acc = vec![[0.0; 4]; n_points];
        let mut e = 0.0;
        for (part, pe) in &partials {
            for (a, p) in acc.iter_mut().zip(part) {
                for d in 0..4 {
                    a[d] += p[d];
                }
            }
            e += pe;
        }
        energy.push(e / params.samples as f64);

        for i in 0..n_points {
            let count = acc[i][3];
            if count == 0.0 {
                continue;
            }
            let c = counters[i];
            let w_old = params.alpha1 * c + params.beta1;
            let w_new = params.alpha2 * c + params.beta2;
            for d in 0..3 {
                let centroid = acc[i][d] / count;
                points[i][d] = (w_old * points[i][d] + w_new * centroid) / (c + 1.0);
            }
            counters[i] += 1.0;
        }
    }
    Ok(CvtOutput { points, energy })
}

/// Coverage radii from a uniform pseudo-point lattice (boundary included),
/// enlarged by `gamma`.
pub fn radii(points: &[Point3], pseudo_spacing: f64, gamma: f64) -> Result<Vec<f64>> {
    if !(pseudo_spacing > 0.0) || !(gamma >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_spacing must be positive and gamma >= 1 (got {pseudo_spacing}, {gamma})"
        )));
    }
    let m = (1.0 / pseudo_spacing).round().max(1.0) as usize;
    let h = 1.0 / m as f64;
    let np = m + 1;
    let r2 = (0..np * np)
        .into_par_iter()
        .map(|jk| {
            let (j, k) = (jk % np, jk / np);
            let mut local = vec![0.0f64; points.len()];
            for i in 0..np {
                let p = [i as f64 * h, j as f64 * h, k as f64 * h];
                let (nearest_i, d2) = nearest(points, p);
                if d2 > local[nearest_i] {
                    local[nearest_i] = d2;
                }
            }
            local
        })
        .reduce(
            || vec![0.0; points.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = x.max(y);
                }
                a
            },
        );
    r2.iter()
        .enumerate()
        .map(|(i, &d2)| {
            if d2 == 0.0 {
                Err(Error::ZeroRadius(i))
            } else {
                Ok(gamma * d2.sqrt())
            }
        })
        .collect()
}

/// Coarse points, radii, and per-patch fine-grid memberships.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub radii: Vec<f64>,
    /// Fine elements of each patch `S_i`, ascending.
    pub elements: Vec<Vec<usize>>,
    /// Fine nodes touched by `S_i`, ascending.
    pub nodes: Vec<Vec<usize>>,
    /// Nodes on the patch boundary `J(S_i)`, ascending.
    pub boundary_nodes: Vec<Vec<usize>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Element neighbours across each face: `nb[e][s]` is the element sharing
/// the face opposite local vertex `s`, if any.
pub fn face_neighbors(grid: &FineGrid) -> Vec<[Option<usize>; 4]> {
    let mut faces: HashMap<[usize; 3], (usize, usize)> = HashMap::with_capacity(grid.tet_count() * 2);
    let mut nb = vec![[None; 4]; grid.tet_count()];
    for (e, t) in grid.tets.iter().enumerate() {
        for s in 0..4 {
            let f = face_key(t, s);
            if let Some((other, os)) = faces.remove(&f) {
                nb[e][s] = Some(other);
                nb[other][os] = Some(e);
            } else {
                faces.insert(f, (e, s));
            }
        }
    }
    nb
}

fn face_key(t: &[usize; 4], skip: usize) -> [usize; 3] {
    let mut f = [0; 3];
    let mut c = 0;
    for (s, &v) in t.iter().enumerate() {
        if s != skip {
            f[c] = v;
            c += 1;
        }
    }
    f.sort_unstable();
    f
}

/// Builds `S_i = { K : max_{y in K} |y - x_i| <= r_i }` and the patch-boundary
/// node sets. Fails if some fine element is left uncovered.
pub fn build_memberships(grid: &FineGrid, points: &[Point3], radii: &[f64]) -> Result<PointCloud> {
    if points.len() != radii.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: radii.len(),
        });
    }
    let neighbors = face_neighbors(grid);
    let per_patch: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = points
        .par_iter()
        .zip(radii.par_iter())
        .map(|(&x, &r)| {
            let mut inside = vec![false; grid.tet_count()];
            let mut elements = Vec::new();
            for (e, t) in grid.tets.iter().enumerate() {
                let far = t.iter().map(|&v| dist(grid.nodes[v], x)).fold(0.0, f64::max);
                if far <= r {
                    inside[e] = true;
                    elements.push(e);
                }
            }
            let mut on_boundary = vec![false; grid.node_count()];
            let mut touched = vec![false; grid.node_count()];
            for &e in &elements {
                let t = &grid.tets[e];
                for &v in t {
                    touched[v] = true;
                }
                for s in 0..4 {
                    let exposed = match neighbors[e][s] {
                        None => true,
                        Some(o) => !inside[o],
                    };
                    if exposed {
                        for (k, &v) in t.iter().enumerate() {
                            if k != s {
                                on_boundary[v] = true;
                            }
                        }
                    }
                }
            }
            let nodes = (0..grid.node_count()).filter(|&v| touched[v]).collect();
            let bnodes = (0..grid.node_count()).filter(|&v| on_boundary[v]).collect();
            (elements, nodes, bnodes)
        })
        .collect();

    let mut covered = vec![false; grid.tet_count()];
    for (elements, _, _) in &per_patch {
        for &e in elements {
            covered[e] = true;
        }
    }
    let uncovered: Vec<usize> = (0..grid.tet_count()).filter(|&e| !covered[e]).collect();
    if !uncovered.is_empty() {
        return Err(Error::Uncovered(uncovered));
    }
    for (i, (_, _, b)) in per_patch.iter().enumerate() {
        if b.is_empty() {
            return Err(Error::InvalidArgument(format!("patch {i} has an empty boundary node set")));
        }
    }
    let mut elements = Vec::with_capacity(per_patch.len());
    let mut nodes = Vec::with_capacity(per_patch.len());
    let mut boundary_nodes = Vec::with_capacity(per_patch.len());
    for (e, n, b) in per_patch {
        elements.push(e);
        nodes.push(n);
        boundary_nodes.push(b);
    }
    Ok(PointCloud {
        points: points.to_vec(),
        radii: radii.to_vec(),
        elements,
        nodes,
        boundary_nodes,
    })
}

/// Writes one `index x y z r` line per coarse point.
pub fn write_table<W: Write>(mut w: W, points: &[Point3], radii: &[f64]) -> std::io::Result<()> {
    writeln!(w, "# index x y z r")?;
    for (i, (p, r)) in points.iter().zip(radii).enumerate() {
        writeln!(w, "{i} {:e} {:e} {:e} {:e}", p[0], p[1], p[2], r)?;
    }
    Ok(())
}

pub fn read_table<R: BufRead>(r: R) -> Result<(Vec<Point3>, Vec<f64>)> {
    let mut points = Vec::new();
    let mut radii = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("expected 5 columns in '{line}'")));
        }
        let idx: usize = f[0].parse().map_err(|e| Error::Parse(format!("{e}")))?;
        if idx != points.len() {
            return Err(Error::Parse(format!("point index {idx} out of order")));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{e}"))))
            .collect::<Result<_>>()?;
        points.push([v[0], v[1], v[2]]);
        radii.push(v[3]);
    }
    Ok((points, radii))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ChannelPreset, InitialCondition, SourceKind, Velocity};

    fn spec(initial: InitialCondition) -> ProblemSpec {
        ProblemSpec::new(SourceKind::F1, initial, 0.2).unwrap()
    }

    #[test]
    fn density_zero_forcing() {
        let g = FineGrid::new(6).unwrap();
        let f = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Shear).unwrap();
        let d = solve_density(&g, &f, &spec(InitialCondition::Zero), 0.1, 1e-4).unwrap();
        for &v in &d.values {
            assert!((v - 1e-4).abs() < 1e-9);
        }
        assert!(d.values.iter().all(|&v| v >= 1e-4));
    }

    #[test]
    fn density_small_alpha_tracks_initial() {
        let g = FineGrid::new(8).unwrap();
        let f = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Shear).unwrap();
        let s = spec(InitialCondition::Bubble);
        let d = solve_density(&g, &f, &s, 1e-6, 1e-4).unwrap();
        for (i, x) in g.nodes.iter().enumerate() {
            if g.is_boundary(i) {
                assert_eq!(d.values[i], 1e-4);
                continue;
            }
            // The eps_bd boundary lift leaks into the interior through the
            // consistent mass matrix, so allow a few eps_bd on top of O(alpha).
            let u0 = s.initial_at(*x);
            assert!((d.values[i] - u0).abs() < 5e-4, "node {i}: {} vs {u0}", d.values[i]);
        }
    }

    #[test]
    fn cvt_rejects_bad_weights() {
        let g = FineGrid::new(3).unwrap();
        let d = DensityField::uniform(&g, 1.0);
        let p = CvtParams {
            alpha1: 0.6,
            ..CvtParams::desk()
        };
        assert!(cvt_points(&g, &d, 4, &p, 0).is_err());
    }

    #[test]
    fn single_point_moves_to_center() {
        let g = FineGrid::new(4).unwrap();
        let d = DensityField::uniform(&g, 1.0);
        let p = CvtParams {
            samples: 2000,
            ..CvtParams::paper()
        };
        let out = cvt_points(&g, &d, 1, &p, 7).unwrap();
        assert!(dist(out.points[0], [0.5; 3]) < 0.05);
    }

    #[test]
    fn cvt_is_deterministic_and_inside() {
        let g = FineGrid::new(4).unwrap();
        let d = DensityField::uniform(&g, 1.0);
        let p = CvtParams {
            iterations: 20,
            samples: 3000,
            ..CvtParams::paper()
        };
        let a = cvt_points(&g, &d, 8, &p, 42).unwrap();
        let b = cvt_points(&g, &d, 8, &p, 42).unwrap();
        assert_eq!(a.points, b.points);
        for (i, x) in a.points.iter().enumerate() {
            assert!(x.iter().all(|&c| (0.0..=1.0).contains(&c)));
            for y in &a.points[..i] {
                assert!(x != y);
            }
        }
    }

    #[test]
    fn radius_of_single_center_point() {
        let r = radii(&[[0.5; 3]], 0.1, 1.0).unwrap();
        assert!((r[0] - 3.0f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_has_equal_radii() {
        let r = radii(&[[0.3, 0.5, 0.5], [0.7, 0.5, 0.5]], 0.05, 2.0).unwrap();
        assert!((r[0] - r[1]).abs() <= 0.05);
    }

    #[test]
    fn shadowed_point_is_an_error() {
        // Duplicate points: the second never wins a tie.
        let err = radii(&[[0.5; 3], [0.5; 3]], 0.1, 2.0).unwrap_err();
        assert!(matches!(err, Error::ZeroRadius(1)));
    }

    #[test]
    fn full_patch_boundary_is_domain_boundary() {
        let g = FineGrid::new(3).unwrap();
        let pc = build_memberships(&g, &[[0.5; 3]], &[2.0]).unwrap();
        assert_eq!(pc.elements[0].len(), g.tet_count());
        assert_eq!(pc.boundary_nodes[0], g.boundary_nodes);
    }

    #[test]
    fn membership_is_inclusive() {
        let g = FineGrid::new(3).unwrap();
        let x = [0.1, 0.2, 0.05];
        let e = 17;
        let r = g.tets[e].iter().map(|&v| dist(g.nodes[v], x)).fold(0.0, f64::max);
        let pc = build_memberships(&g, &[x, [0.5; 3]], &[r, 2.0]).unwrap();
        assert!(pc.elements[0].contains(&e));
    }

    #[test]
    fn uncovered_elements_are_reported() {
        let g = FineGrid::new(3).unwrap();
        let err = build_memberships(&g, &[[0.5; 3]], &[0.3]).unwrap_err();
        assert!(matches!(err, Error::Uncovered(_)));
    }

    #[test]
    fn table_round_trip() {
        let pts = vec![[0.1, 0.2, 0.3], [1.0 / 3.0, 0.5, 0.9]];
        let r = vec![0.25, 0.125 + 1e-17];
        let mut buf = Vec::new();
        write_table(&mut buf, &pts, &r).unwrap();
        let (p2, r2) = read_table(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(pts, p2);
        assert_eq!(r, r2);
    }
}
