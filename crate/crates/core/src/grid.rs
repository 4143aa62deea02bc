//! Structured tetrahedral fine grid of the unit cube and the coefficient
//! fields evaluated on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

const BOUNDARY_TOL: f64 = 1e-12;

/// Structured mesh of (0,1)^3: `n^3` cubes, each split into 6 Kuhn tetrahedra.
///
/// Nodes are numbered lexicographically with x fastest.
#[derive(Debug, Clone)]
pub struct FineGrid {
    pub n_per_axis: usize,
    pub nodes: Vec<Point3>,
    pub tets: Vec<[usize; 4]>,
    pub boundary_nodes: Vec<usize>,
    is_boundary: Vec<bool>,
}

// Kuhn paths: each permutation of the axes walks from corner (0,0,0) to (1,1,1).
const KUHN_PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl FineGrid {
    pub fn new(n_per_axis: usize) -> Result<Self> {
        if n_per_axis < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_per_axis must be at least 2, got {n_per_axis}"
            )));
        }
        let n = n_per_axis;
        let np = n + 1;
        let h = 1.0 / n as f64;
        let mut nodes = Vec::with_capacity(np * np * np);
        let mut is_boundary = Vec::with_capacity(np * np * np);
        for k in 0..np {
            for j in 0..np {
                for i in 0..np {
                    nodes.push([i as f64 * h, j as f64 * h, k as f64 * h]);
                    is_boundary.push(i == 0 || j == 0 || k == 0 || i == n || j == n || k == n);
                }
            }
        }
        // Lattice coordinates are exact multiples of h except at the far faces.
        for p in nodes.iter_mut() {
            for c in p.iter_mut() {
                if (*c - 1.0).abs() < BOUNDARY_TOL {
                    *c = 1.0;
                }
            }
        }

        let mut tets = Vec::with_capacity(6 * n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    for perm in KUHN_PERMUTATIONS {
                        let mut corner = [i, j, k];
                        let mut tet = [0usize; 4];
                        tet[0] = index(np, corner);
                        for (s, &axis) in perm.iter().enumerate() {
                            corner[axis] += 1;
                            tet[s + 1] = index(np, corner);
                        }
                        if signed_volume(&nodes, &tet) < 0.0 {
                            tet.swap(0, 1);
                        }
                        tets.push(tet);
                    }
                }
            }
        }

        let boundary_nodes = is_boundary
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();

        Ok(Self {
            n_per_axis,
            nodes,
            tets,
            boundary_nodes,
            is_boundary,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn tet_count(&self) -> usize {
        self.tets.len()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n_per_axis as f64
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        index(self.n_per_axis + 1, [i, j, k])
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.is_boundary
    }

    pub fn tet_volume(&self, e: usize) -> f64 {
        signed_volume(&self.nodes, &self.tets[e])
    }

    pub fn tet_vertices(&self, e: usize) -> [Point3; 4] {
        self.tets[e].map(|v| self.nodes[v])
    }

    pub fn centroid(&self, e: usize) -> Point3 {
        let v = self.tet_vertices(e);
        let mut c = [0.0; 3];
        for p in &v {
            for d in 0..3 {
                c[d] += 0.25 * p[d];
            }
        }
        c
    }

    /// Containing tetrahedron and barycentric coordinates of a point in the closed cube.
    pub fn locate(&self, x: Point3) -> (usize, [f64; 4]) {
        let n = self.n_per_axis;
        let mut cell = [0usize; 3];
        let mut local = [0.0; 3];
        for d in 0..3 {
            let s = x[d].clamp(0.0, 1.0) * n as f64;
            let c = (s.floor() as usize).min(n - 1);
            cell[d] = c;
            local[d] = s - c as f64;
        }
        // The Kuhn simplex containing `local` is the one whose axis order sorts
        // the local coordinates in decreasing order.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| local[b].partial_cmp(&local[a]).unwrap().then(a.cmp(&b)));
        let perm_id = KUHN_PERMUTATIONS.iter().position(|p| *p == order).unwrap();
        let e = 6 * (cell[0] + n * (cell[1] + n * cell[2])) + perm_id;

        // Barycentric coordinates along the Kuhn path.
        let (a, b, c) = (local[order[0]], local[order[1]], local[order[2]]);
        let path = [1.0 - a, a - b, b - c, c];
        // Vertex order may have been swapped to fix orientation.
        let mut corner = [cell[0], cell[1], cell[2]];
        let mut path_nodes = [0usize; 4];
        path_nodes[0] = self.node_index(corner[0], corner[1], corner[2]);
        for (s, &axis) in order.iter().enumerate() {
            corner[axis] += 1;
            path_nodes[s + 1] = self.node_index(corner[0], corner[1], corner[2]);
        }
        let tet = self.tets[e];
        let mut bary = [0.0; 4];
        for (slot, v) in tet.iter().enumerate() {
            let s = path_nodes.iter().position(|p| p == v).unwrap();
            bary[slot] = path[s];
        }
        (e, bary)
    }

    /// Element-constant diffusion coefficient sampled at tetrahedron centroids.
    pub fn element_kappa(&self, field: &CoefficientField) -> Vec<f64> {
        (0..self.tet_count())
            .map(|e| field.kappa_at(self.centroid(e)))
            .collect()
    }
}

fn index(np: usize, c: [usize; 3]) -> usize {
    c[0] + np * (c[1] + np * c[2])
}

fn signed_volume(nodes: &[Point3], tet: &[usize; 4]) -> f64 {
    let p0 = nodes[tet[0]];
    let d = |v: usize| {
        let p = nodes[tet[v]];
        [p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]]
    };
    let (a, b, c) = (d(1), d(2), d(3));
    let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]);
    det / 6.0
}

/// Axis-aligned box of high conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelBox {
    pub lo: Point3,
    pub hi: Point3,
}

impl ChannelBox {
    pub fn contains(&self, x: Point3) -> bool {
        (0..3).all(|d| x[d] >= self.lo[d] && x[d] <= self.hi[d])
    }
}

/// Named channel layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChannelPreset {
    /// Eight square channels along x1, placed on a staggered (x2, x3) lattice.
    PaperLike,
    /// `count` channels along x1 with seeded random (x2, x3) offsets.
    Random { count: usize, seed: u64 },
    /// No channels: homogeneous background.
    None,
}

pub const CHANNEL_WIDTH: f64 = 0.1;

impl ChannelPreset {
    pub fn channels(&self) -> Vec<ChannelBox> {
        let along_x1 = |y: f64, z: f64| {
            let hw = 0.5 * CHANNEL_WIDTH;
            ChannelBox {
                lo: [0.0, y - hw, z - hw],
                hi: [1.0, y + hw, z + hw],
            }
        };
        match self {
            ChannelPreset::PaperLike => [
                (0.2, 0.2),
                (0.2, 0.6),
                (0.4, 0.4),
                (0.4, 0.8),
                (0.6, 0.2),
                (0.6, 0.6),
                (0.8, 0.4),
                (0.8, 0.8),
            ]
            .iter()
            .map(|&(y, z)| along_x1(y, z))
            .collect(),
            ChannelPreset::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| {
                        let y = rng.gen_range(0.1..0.9);
                        let z = rng.gen_range(0.1..0.9);
                        along_x1(y, z)
                    })
                    .collect()
            }
            ChannelPreset::None => Vec::new(),
        }
    }
}

/// Advection velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Velocity {
    /// beta = (2 + sin(4 sqrt(2) pi x2), 0, 0)
    Shear,
    Constant { value: Point3 },
    Zero,
}

impl Velocity {
    pub fn at(&self, x: Point3) -> Point3 {
        match self {
            Velocity::Shear => beta_at(x),
            Velocity::Constant { value } => *value,
            Velocity::Zero => [0.0; 3],
        }
    }
}

/// The shear velocity `(2 + sin(4 sqrt(2) pi x2), 0, 0)`.
pub fn beta_at(x: Point3) -> Point3 {
    let x2 = x[1].clamp(0.0, 1.0);
    [
        2.0 + (4.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI * x2).sin(),
        0.0,
        0.0,
    ]
}

/// Diffusion coefficient, velocity and the advection/diffusion ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub contrast: f64,
    pub channels: Vec<ChannelBox>,
    pub epsilon: f64,
    pub velocity: Velocity,
}

impl CoefficientField {
    pub fn new(
        contrast: f64,
        preset: &ChannelPreset,
        epsilon: f64,
        velocity: Velocity,
    ) -> Result<Self> {
        if !(contrast >= 1.0) || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "contrast must be >= 1 and epsilon > 0 (got {contrast}, {epsilon})"
            )));
        }
        Ok(Self {
            contrast,
            channels: preset.channels(),
            epsilon,
            velocity,
        })
    }

    /// Homogeneous kappa = 1 with the given velocity.
    pub fn homogeneous(epsilon: f64, velocity: Velocity) -> Self {
        Self {
            contrast: 1.0,
            channels: Vec::new(),
            epsilon,
            velocity,
        }
    }

    pub fn kappa_at(&self, x: Point3) -> f64 {
        let x = x.map(|c| c.clamp(0.0, 1.0));
        if self.channels.iter().any(|c| c.contains(x)) {
            self.contrast
        } else {
            1.0
        }
    }

    pub fn beta_at(&self, x: Point3) -> Point3 {
        self.velocity.at(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// 100 x1(0.1-x1) x2(0.1-x2) x3(0.1-x3) sin(t)
    F1,
    /// u(u-1)(u+1)
    F2,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialCondition {
    /// x1(1-x1) x2(1-x2) x3(1-x3)
    Bubble,
    Zero,
}

impl InitialCondition {
    pub fn at(&self, x: Point3) -> f64 {
        match self {
            InitialCondition::Bubble => x.iter().map(|&c| c * (1.0 - c)).product(),
            InitialCondition::Zero => 0.0,
        }
    }
}

/// Right-hand side, initial data and time horizon of one problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub source: SourceKind,
    pub initial: InitialCondition,
    pub t_final: f64,
    pub dirichlet_value: f64,
}

impl ProblemSpec {
    pub fn new(source: SourceKind, initial: InitialCondition, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "final time must be positive, got {t_final}"
            )));
        }
        Ok(Self {
            source,
            initial,
            t_final,
            dirichlet_value: 0.0,
        })
    }

    pub fn source_at(&self, x: Point3, t: f64, u: f64) -> f64 {
        match self.source {
            SourceKind::F1 => {
                100.0 * x.iter().map(|&c| c * (0.1 - c)).product::<f64>() * t.sin()
            }
            SourceKind::F2 => u * (u - 1.0) * (u + 1.0),
            SourceKind::Zero => 0.0,
        }
    }

    pub fn initial_at(&self, x: Point3) -> f64 {
        self.initial.at(x)
    }
}
