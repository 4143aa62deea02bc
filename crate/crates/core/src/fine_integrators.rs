//! Fine-grid time steppers: backward Euler and exponential Euler.
//!
//! States live on free DOFs of reduced [`FineOperators`]; loads are built
//! from the full-length state with zero boundary values reinstated.

use crate::assembly::{assemble_load, FineOperators};
use crate::error::{Error, Result};
use crate::grid::{FineGrid, ProblemSpec};
use crate::linalg::dense::eig_sym_generalized;
use crate::linalg::{phi1_apply, solve_general, solve_spd, BandedLu, EigDecomposition, SparseMatrix};

/// The fine exponential integrator needs a dense eigendecomposition.
pub const FINE_EXP_MAX_DIM: usize = 5000;

/// Uniform time grid on `[0, t_final]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
    pub tau: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs T > 0 and at least one step, got T={t_final}, steps={steps}"
            )));
        }
        Ok(Self {
            t_final,
            steps,
            tau: t_final / steps as f64,
        })
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.t_final
        } else {
            n as f64 * self.tau
        }
    }
}

/// Times and free-DOF states, kept every `stride` steps plus the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    fn start(u0: Vec<f64>) -> Self {
        Self {
            times: vec![0.0],
            states: vec![u0],
        }
    }

    fn record(&mut self, n: usize, time: &TimeGrid, stride: usize, u: &[f64]) {
        if n % stride.max(1) == 0 || n == time.steps {
            self.times.push(time.time(n));
            self.states.push(u.to_vec());
        }
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds the initial time")
    }
}

/// How the initial data is transferred to the fine space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialTransfer {
    #[default]
    Interpolation,
    L2Projection,
}

/// Initial state on free DOFs.
pub fn initial_condition(
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    transfer: InitialTransfer,
) -> Result<Vec<f64>> {
    let nodal: Vec<f64> = grid.nodes.iter().map(|&x| spec.initial_at(x)).collect();
    match transfer {
        InitialTransfer::Interpolation => Ok(ops.dofs.restrict(&nodal)),
        InitialTransfer::L2Projection => {
            let rhs = ops.load_mass.mul_vec(&nodal);
            if rhs.iter().all(|&v| v == 0.0) {
                return Ok(vec![0.0; ops.n()]);
            }
            solve_spd(&ops.mass, &rhs, 1e-13)
        }
    }
}

/// `F(u, t)` on free rows for a free-DOF state `u`.
pub fn fine_load(ops: &FineOperators, grid: &FineGrid, spec: &ProblemSpec, t: f64, u: &[f64]) -> Vec<f64> {
    let full = ops.dofs.extend(u, spec.dirichlet_value);
    assemble_load(ops, grid, spec, t, &full)
}

/// Right-hand side `M u_prev + tau F(u_prev, t_prev)`.
fn be_rhs(ops: &FineOperators, grid: &FineGrid, spec: &ProblemSpec, u_prev: &[f64], t_prev: f64, tau: f64) -> Vec<f64> {
    let mut rhs = ops.mass.mul_vec(u_prev);
    if spec.source != crate::grid::SourceKind::Zero {
        let f = fine_load(ops, grid, spec, t_prev, u_prev);
        for (r, fi) in rhs.iter_mut().zip(f) {
            *r += tau * fi;
        }
    }
    rhs
}

/// `M + tau (A + G)`
pub fn backward_euler_matrix(ops: &FineOperators, tau: f64) -> SparseMatrix {
    ops.mass.add_scaled(&ops.transport(), tau)
}

/// One backward Euler step with an iterative solve.
pub fn backward_euler_step(
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u_prev: &[f64],
    t_prev: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    let rhs = be_rhs(ops, grid, spec, u_prev, t_prev, tau);
    if rhs.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; rhs.len()]);
    }
    solve_general(&backward_euler_matrix(ops, tau), &rhs, 1e-12)
}

/// Backward Euler with the system matrix factored once for a fixed step.
#[derive(Debug, Clone)]
pub struct BackwardEuler {
    lu: BandedLu,
    tau: f64,
}

impl BackwardEuler {
    pub fn new(ops: &FineOperators, tau: f64) -> Result<Self> {
        Ok(Self {
            lu: BandedLu::factor(&backward_euler_matrix(ops, tau))?,
            tau,
        })
    }

    pub fn step(&self, ops: &FineOperators, grid: &FineGrid, spec: &ProblemSpec, u_prev: &[f64], t_prev: f64) -> Vec<f64> {
        self.lu.solve(&be_rhs(ops, grid, spec, u_prev, t_prev, self.tau))
    }
}

/// Eigendecomposition of `-tau A q = lambda M q` on free DOFs.
pub fn fine_exp_decomposition(ops: &FineOperators, tau: f64) -> Result<EigDecomposition> {
    let n = ops.n();
    if n > FINE_EXP_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "fine exponential integrator limited to {FINE_EXP_MAX_DIM} DOFs, got {n}"
        )));
    }
    let a = ops.stiffness.scale(-tau).to_dense();
    let m = ops.mass.to_dense();
    eig_sym_generalized(&a, &m)
}

/// One exponential Euler step:
/// `u + tau Q phi1(D) Q^T (F(u, t_prev) - (A + G) u)`.
pub fn exp_euler_step(
    decomp: &EigDecomposition,
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u_prev: &[f64],
    t_prev: f64,
    tau: f64,
) -> Vec<f64> {
    let mut r = fine_load(ops, grid, spec, t_prev, u_prev);
    let au = ops.transport().mul_vec(u_prev);
    for (ri, ai) in r.iter_mut().zip(au) {
        *ri -= ai;
    }
    let inc = phi1_apply(decomp, &r);
    u_prev.iter().zip(inc).map(|(u, d)| u + tau * d).collect()
}

/// Backward Euler trajectory from `u0`, keeping every `stride`-th state.
pub fn run_backward_euler(
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u0: Vec<f64>,
    time: TimeGrid,
    stride: usize,
) -> Result<Trajectory> {
    let stepper = BackwardEuler::new(ops, time.tau)?;
    let mut traj = Trajectory::start(u0.clone());
    let mut u = u0;
    for n in 1..=time.steps {
        u = stepper.step(ops, grid, spec, &u, time.time(n - 1));
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite state at step {n}")));
        }
        traj.record(n, &time, stride, &u);
    }
    Ok(traj)
}

/// Exponential Euler trajectory on the fine grid (small problems only).
pub fn run_exp_euler(
    ops: &FineOperators,
    grid: &FineGrid,
    spec: &ProblemSpec,
    u0: Vec<f64>,
    time: TimeGrid,
    stride: usize,
) -> Result<Trajectory> {
    let decomp = fine_exp_decomposition(ops, time.tau)?;
    let mut traj = Trajectory::start(u0.clone());
    let mut u = u0;
    for n in 1..=time.steps {
        u = exp_euler_step(&decomp, ops, grid, spec, &u, time.time(n - 1), time.tau);
        traj.record(n, &time, stride, &u);
    }
    Ok(traj)
}
