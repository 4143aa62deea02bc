//! Coarse-scale time stepping in the multiscale space: backward Euler on
//! coarse coefficients (FD) and the upscaled exponential integrator (EI).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::FineOperators;
use crate::error::{Error, Result};
use crate::fine_integrators::{fine_load, TimeGrid, Trajectory};
use crate::grid::{FineGrid, ProblemSpec};
use crate::linalg::dense::{asymmetry, eig_sym_generalized, symmetrize};
use crate::linalg::{phi1_apply, EigDecomposition, SparseMatrix};

/// Relative asymmetry tolerated in projected symmetric operators.
pub const ASYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseMethod {
    /// Backward Euler on the coarse Galerkin system.
    Fd,
    /// Exponential Euler with coarse-space increments.
    Ei,
}

impl fmt::Display for CoarseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoarseMethod::Fd => "fd",
            CoarseMethod::Ei => "ei",
        })
    }
}

impl FromStr for CoarseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fd" => Ok(CoarseMethod::Fd),
            "ei" => Ok(CoarseMethod::Ei),
            other => Err(Error::Parse(format!("unknown method '{other}' (expected fd or ei)"))),
        }
    }
}

/// Galerkin projections `R S R^T` of the fine operators.
#[derive(Debug, Clone)]
pub struct CoarseOperators {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub advection: DMatrix<f64>,
}

impl CoarseOperators {
    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }
}

fn project(r_dense: &DMatrix<f64>, r_t: &DMatrix<f64>, s: &SparseMatrix) -> DMatrix<f64> {
    r_dense * s.mul_dense(r_t)
}

fn symmetric_checked(mut m: DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = asymmetry(&m) / scale;
    if asym > ASYMMETRY_TOLERANCE {
        return Err(Error::Asymmetric {
            name,
            asymmetry: asym,
            tolerance: ASYMMETRY_TOLERANCE,
        });
    }
    symmetrize(&mut m);
    Ok(m)
}

/// `M_H`, `A_H`, `G_H` from `R_ms` (coarse rows by free fine columns).
pub fn project_operators(r_ms: &SparseMatrix, ops: &FineOperators) -> Result<CoarseOperators> {
    if r_ms.n_cols() != ops.n() {
        return Err(Error::DimensionMismatch {
            expected: ops.n(),
            found: r_ms.n_cols(),
        });
    }
    let r_dense = r_ms.to_dense();
    let r_t = r_dense.transpose();
    Ok(CoarseOperators {
        mass: symmetric_checked(project(&r_dense, &r_t, &ops.mass), "M_H")?,
        stiffness: symmetric_checked(project(&r_dense, &r_t, &ops.stiffness), "A_H")?,
        advection: project(&r_dense, &r_t, &ops.advection),
    })
}

fn mass_solve(cops: &CoarseOperators, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let chol = cops
        .mass
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { index: 0, value: 0.0 })?;
    Ok(chol.solve(&rhs))
}

/// Coefficients of the M-orthogonal projection: `M_H^-1 R_ms M u0`.
pub fn project_initial(r_ms: &SparseMatrix, mass: &SparseMatrix, cops: &CoarseOperators, u0: &[f64]) -> Result<Vec<f64>> {
    let rhs = r_ms.mul_vec(&mass.mul_vec(u0));
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; rhs.len()]);
    }
    Ok(mass_solve(cops, DVector::from_vec(rhs))?.as_slice().to_vec())
}

/// `R_ms F(R_ms^T c, t)`
fn coarse_load(
    r_ms: &SparseMatrix,
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    c: &[f64],
    t: f64,
) -> Vec<f64> {
    let u = r_ms.mul_vec_transpose(c);
    r_ms.mul_vec(&fine_load(ops, grid, spec, t, &u))
}

/// Coarse backward Euler with `M_H + tau (A_H + G_H)` factored once.
pub struct CoarseBackwardEuler {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    mass: DMatrix<f64>,
    tau: f64,
}

impl CoarseBackwardEuler {
    pub fn new(cops: &CoarseOperators, tau: f64) -> Result<Self> {
        let k = &cops.mass + (&cops.stiffness + &cops.advection) * tau;
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular(0));
        }
        Ok(Self {
            lu,
            mass: cops.mass.clone(),
            tau,
        })
    }

    pub fn step(
        &self,
        r_ms: &SparseMatrix,
        ops: &FineOperators,
        grid: &FineGrid,
        spec: &ProblemSpec,
        c_prev: &[f64],
        t_prev: f64,
    ) -> Result<Vec<f64>> {
        let mut rhs = &self.mass * DVector::from_column_slice(c_prev);
        if spec.source != crate::grid::SourceKind::Zero {
            let f = coarse_load(r_ms, ops, grid, spec, c_prev, t_prev);
            for (r, fi) in rhs.iter_mut().zip(f) {
                *r += self.tau * fi;
            }
        }
        let c = self.lu.solve(&rhs).ok_or(Error::Singular(0))?;
        Ok(c.as_slice().to_vec())
    }
}

/// One coarse backward Euler step (factors the system each call).
pub fn coarse_backward_euler_step(
    cops: &CoarseOperators,
    r_ms: &SparseMatrix,
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    c_prev: &[f64],
    t_prev: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    CoarseBackwardEuler::new(cops, tau)?.step(r_ms, ops, grid, spec, c_prev, t_prev)
}

/// Eigendecomposition of the coarse pencil `-tau A_H q = lambda M_H q`.
pub fn coarse_exp_decomposition(cops: &CoarseOperators, tau: f64) -> Result<EigDecomposition> {
    eig_sym_generalized(&(&cops.stiffness * -tau), &cops.mass)
}

/// Fine-state exponential step with a coarse increment:
/// `u + tau R^T Q_H phi1(D_H) Q_H^T R (F(u) - (A + G) u)`.
#[allow(clippy::too_many_arguments)]
pub fn coarse_exp_step(
    decomp: &EigDecomposition,
    r_ms: &SparseMatrix,
    transport: &SparseMatrix,
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u_prev: &[f64],
    t_prev: f64,
    tau: f64,
) -> Vec<f64> {
    let mut r = fine_load(ops, grid, spec, t_prev, u_prev);
    let au = transport.mul_vec(u_prev);
    for (ri, ai) in r.iter_mut().zip(au) {
        *ri -= ai;
    }
    let inc = r_ms.mul_vec_transpose(&phi1_apply(decomp, &r_ms.mul_vec(&r)));
    u_prev.iter().zip(inc).map(|(u, d)| u + tau * d).collect()
}

/// Coarse trajectory, prolongated to free fine DOFs. Both methods start
/// from the prolongated M-orthogonal projection of `u0`.
#[allow(clippy::too_many_arguments)]
pub fn run_coarse(
    method: CoarseMethod,
    r_ms: &SparseMatrix,
    cops: &CoarseOperators,
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u0: &[f64],
    time: TimeGrid,
    stride: usize,
) -> Result<Trajectory> {
    let c0 = project_initial(r_ms, &ops.mass, cops, u0)?;
    let start = r_ms.mul_vec_transpose(&c0);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![start.clone()],
    };
    let mut keep = |n: usize, u: Vec<f64>| -> Result<()> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{method} produced a non-finite state at step {n}")));
        }
        if n % stride.max(1) == 0 || n == time.steps {
            traj.times.push(time.time(n));
            traj.states.push(u);
        }
        Ok(())
    };
    match method {
        CoarseMethod::Fd => {
            let stepper = CoarseBackwardEuler::new(cops, time.tau)?;
            let mut c = c0;
            for n in 1..=time.steps {
                c = stepper.step(r_ms, ops, grid, spec, &c, time.time(n - 1))?;
                keep(n, r_ms.mul_vec_transpose(&c))?;
            }
        }
        CoarseMethod::Ei => {
            let decomp = coarse_exp_decomposition(cops, time.tau)?;
            let transport = ops.transport();
            let mut u = start;
            for n in 1..=time.steps {
                u = coarse_exp_step(&decomp, r_ms, &transport, ops, grid, spec, &u, time.time(n - 1), time.tau);
                keep(n, u.clone())?;
            }
        }
    }
    Ok(traj)
}
