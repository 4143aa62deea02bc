//! Experiment matrix: grid, cloud, bases, reference and coarse runs, with
//! content-hash keyed caching of every stage and a CSV error table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::assembly::{assemble_reduced, FineOperators};
use crate::coarse_solver::{project_operators, run_coarse, CoarseMethod, CoarseOperators};
use crate::config::{Example, SimulationConfig};
use crate::error::{Error, Result};
use crate::fine_integrators::{initial_condition, run_backward_euler, InitialTransfer, TimeGrid, Trajectory};
use crate::grid::{CoefficientField, FineGrid, ProblemSpec, SourceKind};
use crate::io;
use crate::metrics::{relative_errors, ErrorReport};
use crate::msbasis::{build_patch_bases, build_rms, nodal_pou, BasisType, MultiscaleSpace, PatchBasis};
use crate::pointcloud::{build_memberships, cvt_points, radii, solve_density, PointCloud};

/// Bumped whenever a stage's numerics change so stale artifacts are ignored.
const CACHE_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 9] = [
    "example",
    "method",
    "basis_type",
    "n_basis",
    "tau",
    "l2_pct",
    "h1_pct",
    "seconds",
    "status",
];

/// Identifies one coarse run of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RunKey {
    pub example: usize,
    pub method: CoarseMethod,
    pub basis_type: BasisType,
    pub n_basis: usize,
}

impl RunKey {
    pub fn id(&self) -> String {
        format!("ex{}-{}-type{}-nb{}", self.example, self.method, self.basis_type, self.n_basis)
    }
}

/// One row of the error table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub key: RunKey,
    pub tau: f64,
    pub report: Option<ErrorReport>,
    pub seconds: f64,
    pub status: String,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.report.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub csv_path: PathBuf,
}

impl ExperimentOutput {
    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| !r.ok())
    }

    pub fn get(&self, key: &RunKey) -> Option<&RunRecord> {
        self.records.iter().find(|r| &r.key == key)
    }
}

/// Expands the configured lists into run keys, in CSV order.
pub fn run_keys(cfg: &SimulationConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &example in &cfg.examples {
        for &basis_type in &cfg.basis_types {
            for &n_basis in &cfg.n_basis {
                for &method in &cfg.methods {
                    keys.push(RunKey {
                        example,
                        method,
                        basis_type,
                        n_basis,
                    });
                }
            }
        }
    }
    keys
}

/// Writes the error table.
pub fn write_csv<W: std::io::Write>(w: W, records: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let (l2, h1) = match &r.report {
            Some(rep) => (rep.l2_pct.to_string(), rep.h1_pct.to_string()),
            None => (String::new(), String::new()),
        };
        out.write_record([
            r.key.example.to_string(),
            r.key.method.to_string(),
            r.key.basis_type.to_string(),
            r.key.n_basis.to_string(),
            r.tau.to_string(),
            l2,
            h1,
            r.seconds.to_string(),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Content-addressed artifact store under `out_dir/cache`.
#[derive(Debug, Clone)]
struct Cache {
    dir: PathBuf,
    read: bool,
    write: bool,
}

impl Cache {
    fn key<T: Serialize>(stage: &str, inputs: &T) -> String {
        let json = serde_json::to_string(inputs).expect("stage inputs serialize");
        let mut h = Sha256::new();
        h.update(format!("{stage}/v{CACHE_VERSION}/").as_bytes());
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.bin"))
    }

    fn get(&self, stage: &str, key: &str) -> Result<Option<Vec<u8>>> {
        if !self.read {
            return Ok(None);
        }
        io::read_optional(&self.path(stage, key))
    }

    fn put(&self, stage: &str, key: &str, bytes: &[u8]) -> Result<()> {
        if self.write {
            io::write_atomic(&self.path(stage, key), bytes)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct FieldInputs<'a> {
    fine_n: usize,
    contrast: f64,
    epsilon: f64,
    channels: &'a crate::grid::ChannelPreset,
    velocity: &'a crate::grid::Velocity,
}

#[derive(Serialize)]
struct CloudInputs<'a> {
    field: FieldInputs<'a>,
    initial: crate::grid::InitialCondition,
    density_alpha: f64,
    eps_bd: f64,
    cvt: &'a crate::pointcloud::CvtParams,
    coarse_points: usize,
    seed: u64,
    pseudo_spacing: f64,
    gamma: f64,
}

#[derive(Serialize)]
struct BasisInputs<'a> {
    cloud: &'a str,
    basis_type: BasisType,
    modes: usize,
}

#[derive(Serialize)]
struct ReferenceInputs<'a> {
    field: FieldInputs<'a>,
    source: SourceKind,
    initial: crate::grid::InitialCondition,
    t_final: f64,
    steps: usize,
    stride: usize,
}

#[derive(Serialize)]
struct RunInputs<'a> {
    basis: &'a str,
    source: SourceKind,
    initial: crate::grid::InitialCondition,
    t_final: f64,
    steps: usize,
    stride: usize,
    method: CoarseMethod,
    n_basis: usize,
}

/// Cache keys of one regime, derived from inputs only.
struct RegimeKeys {
    cloud: String,
    basis: BTreeMap<BasisType, String>,
}

/// Shared state of the pipeline for one configuration.
struct Pipeline<'a> {
    cfg: &'a SimulationConfig,
    grid: FineGrid,
    cache: Cache,
}

/// Artifacts shared by the examples of one (contrast, epsilon) regime.
struct Regime {
    field: CoefficientField,
    ops: FineOperators,
    keys: RegimeKeys,
}

fn stage_err(stage: &str, e: &Error) -> String {
    format!("failed: {stage}: {e}").replace(['\n', '\r'], " ")
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a SimulationConfig, read_cache: bool) -> Result<Self> {
        cfg.validate()?;
        let cache = Cache {
            dir: cfg.out_dir.join("cache"),
            read: read_cache,
            write: cfg.cache,
        };
        Ok(Self {
            cfg,
            grid: FineGrid::new(cfg.fine_n)?,
            cache,
        })
    }

    fn field_inputs(&self, ex: &Example) -> FieldInputs<'a> {
        FieldInputs {
            fine_n: self.cfg.fine_n,
            contrast: ex.contrast,
            epsilon: ex.epsilon,
            channels: &self.cfg.channels,
            velocity: &self.cfg.velocity,
        }
    }

    fn regime_keys(&self, ex: &Example) -> RegimeKeys {
        let c = self.cfg;
        let cloud = Cache::key(
            "cloud",
            &CloudInputs {
                field: self.field_inputs(ex),
                initial: c.initial,
                density_alpha: c.density_alpha,
                eps_bd: c.eps_bd,
                cvt: &c.cvt,
                coarse_points: c.coarse_points,
                seed: c.seed,
                pseudo_spacing: c.pseudo_spacing,
                gamma: c.gamma,
            },
        );
        let basis = c
            .basis_types
            .iter()
            .map(|&t| {
                let key = Cache::key(
                    "basis",
                    &BasisInputs {
                        cloud: &cloud,
                        basis_type: t,
                        modes: c.max_basis(),
                    },
                );
                (t, key)
            })
            .collect();
        RegimeKeys { cloud, basis }
    }

    fn spec(&self, ex: &Example) -> Result<ProblemSpec> {
        ProblemSpec::new(ex.source, self.cfg.initial, self.cfg.t_final)
    }

    fn reference_stride(&self) -> usize {
        if self.cfg.trace {
            self.cfg.steps_reference / self.cfg.steps_coarse
        } else {
            self.cfg.steps_reference
        }
    }

    fn coarse_stride(&self) -> usize {
        if self.cfg.trace {
            1
        } else {
            self.cfg.steps_coarse
        }
    }

    fn reference_key(&self, ex: &Example) -> String {
        Cache::key(
            "reference",
            &ReferenceInputs {
                field: self.field_inputs(ex),
                source: ex.source,
                initial: self.cfg.initial,
                t_final: self.cfg.t_final,
                steps: self.cfg.steps_reference,
                stride: self.reference_stride(),
            },
        )
    }

    fn run_key(&self, basis_key: &str, ex: &Example, key: &RunKey) -> String {
        Cache::key(
            "run",
            &RunInputs {
                basis: basis_key,
                source: ex.source,
                initial: self.cfg.initial,
                t_final: self.cfg.t_final,
                steps: self.cfg.steps_coarse,
                stride: self.coarse_stride(),
                method: key.method,
                n_basis: key.n_basis,
            },
        )
    }

    fn regime(&self, ex: &Example) -> Result<Regime> {
        let c = self.cfg;
        let field = CoefficientField::new(ex.contrast, &c.channels, ex.epsilon, c.velocity)?;
        let ops = assemble_reduced(&self.grid, &field)?;
        Ok(Regime {
            field,
            ops,
            keys: self.regime_keys(ex),
        })
    }

    fn cloud(&self, regime: &Regime) -> Result<PointCloud> {
        let c = self.cfg;
        let key = &regime.keys.cloud;
        let (points, rad) = match self.cache.get("cloud", key)? {
            Some(bytes) => {
                let (flat, rad) = io::decode_vector(&bytes)?;
                let points = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
                (points, rad)
            }
            None => {
                let t = Instant::now();
                let spec = ProblemSpec::new(SourceKind::Zero, c.initial, c.t_final)?;
                let density = solve_density(&self.grid, &regime.field, &spec, c.density_alpha, c.eps_bd)?;
                let points = cvt_points(&self.grid, &density, c.coarse_points, &c.cvt, c.seed)?.points;
                let rad = radii(&points, c.pseudo_spacing, c.gamma)?;
                let flat: Vec<f64> = points.iter().flatten().copied().collect();
                self.cache.put("cloud", key, &io::encode_vector(&flat, &rad))?;
                log::info!("cloud built in {:.1?}", t.elapsed());
                (points, rad)
            }
        };
        build_memberships(&self.grid, &points, &rad)
    }

    /// Local modes for every configured basis type, from cache when possible.
    fn bases(&self, regime: &Regime, cloud: &PointCloud) -> Result<Vec<PatchBasis>> {
        let mut out: Vec<PatchBasis> = cloud
            .nodes
            .iter()
            .map(|n| PatchBasis {
                nodes: n.clone(),
                type1: None,
                type2: None,
            })
            .collect();
        for (&t, key) in &regime.keys.basis {
            let modes = match self.cache.get("basis", key)? {
                Some(bytes) => io::decode_modes(&bytes)?,
                None => {
                    let time = Instant::now();
                    let built = build_patch_bases(&self.grid, &regime.field, cloud, &[t], self.cfg.max_basis())?;
                    let modes: Vec<_> = built
                        .into_iter()
                        .map(|b| b.modes(t).cloned().expect("requested type is built"))
                        .collect();
                    self.cache.put("basis", key, &io::encode_modes(&modes))?;
                    log::info!("type {t} bases built in {:.1?}", time.elapsed());
                    modes
                }
            };
            if modes.len() != out.len() {
                return Err(Error::DimensionMismatch {
                    expected: out.len(),
                    found: modes.len(),
                });
            }
            for (pb, m) in out.iter_mut().zip(modes) {
                if m.modes.nrows() != pb.nodes.len() {
                    return Err(Error::DimensionMismatch {
                        expected: pb.nodes.len(),
                        found: m.modes.nrows(),
                    });
                }
                match t {
                    BasisType::One => pb.type1 = Some(m),
                    BasisType::Two => pb.type2 = Some(m),
                }
            }
        }
        Ok(out)
    }

    fn reference(&self, regime: &Regime, ex: &Example) -> Result<Trajectory> {
        let key = self.reference_key(ex);
        if let Some(bytes) = self.cache.get("reference", &key)? {
            return Ok(io::decode_trajectory(&bytes)?.0);
        }
        let t = Instant::now();
        let spec = self.spec(ex)?;
        let u0 = initial_condition(&regime.ops, &self.grid, &spec, InitialTransfer::Interpolation)?;
        let time = TimeGrid::new(self.cfg.t_final, self.cfg.steps_reference)?;
        let traj = run_backward_euler(&regime.ops, &self.grid, &spec, u0, time, self.reference_stride())?;
        self.cache.put("reference", &key, &io::encode_trajectory(&traj, 0.0))?;
        log::info!("example {}: reference in {:.1?}", ex.id, t.elapsed());
        Ok(traj)
    }

    fn coarse(
        &self,
        regime: &Regime,
        space: &MultiscaleSpace,
        cops: &CoarseOperators,
        ex: &Example,
        method: CoarseMethod,
    ) -> Result<(Trajectory, f64)> {
        let spec = self.spec(ex)?;
        let t = Instant::now();
        let u0 = initial_condition(&regime.ops, &self.grid, &spec, InitialTransfer::Interpolation)?;
        let time = TimeGrid::new(self.cfg.t_final, self.cfg.steps_coarse)?;
        let traj = run_coarse(
            method,
            &space.r_ms,
            cops,
            &regime.ops,
            &self.grid,
            &spec,
            &u0,
            time,
            self.coarse_stride(),
        )?;
        let seconds = if self.cfg.timings { t.elapsed().as_secs_f64() } else { 0.0 };
        Ok((traj, seconds))
    }

    fn errors(&self, field: &CoefficientField, ops: &FineOperators, reference: &Trajectory, run: &Trajectory) -> Result<ErrorReport> {
        let full = |u: &[f64]| ops.dofs.extend(u, 0.0);
        relative_errors(&self.grid, field, &full(reference.final_state()), &full(run.final_state()))
    }

    fn write_trace(&self, key: &RunKey, field: &CoefficientField, ops: &FineOperators, reference: &Trajectory, run: &Trajectory) -> Result<()> {
        let dir = self.cfg.out_dir.join("traces");
        fs::create_dir_all(&dir)?;
        let mut text = String::from("time,l2_pct,h1_pct\n");
        for ((t, r), u) in reference.times.iter().zip(&reference.states).zip(&run.states).skip(1) {
            let rep = relative_errors(&self.grid, field, &ops.dofs.extend(r, 0.0), &ops.dofs.extend(u, 0.0))?;
            text.push_str(&format!("{t},{},{}\n", rep.l2_pct, rep.h1_pct));
        }
        fs::write(dir.join(format!("{}.csv", key.id())), text)?;
        Ok(())
    }

    fn dump(&self, name: &str, ops: &FineOperators, traj: &Trajectory) -> Result<()> {
        if self.cfg.vtk {
            io::dump_fields(traj, &self.grid, &ops.dofs, &self.cfg.out_dir.join("runs").join(name))?;
        }
        Ok(())
    }
}

/// Groups configured examples by regime, preserving first-appearance order.
fn regimes(cfg: &SimulationConfig) -> Result<Vec<Vec<Example>>> {
    let mut groups: Vec<Vec<Example>> = Vec::new();
    for ex in cfg.example_defs()? {
        match groups.iter_mut().find(|g| g[0].regime() == ex.regime()) {
            Some(g) => g.push(ex),
            None => groups.push(vec![ex]),
        }
    }
    Ok(groups)
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn failed(key: RunKey, tau: f64, status: String) -> RunRecord {
    RunRecord {
        key,
        tau,
        report: None,
        seconds: 0.0,
        status,
    }
}

/// Runs the whole matrix and writes `out_dir/errors.csv`. Stage failures
/// mark the affected runs as failed; the rest of the matrix continues.
pub fn run_experiment(cfg: &SimulationConfig) -> Result<ExperimentOutput> {
    let pipe = Pipeline::new(cfg, cfg.cache)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let records = with_pool(cfg.jobs, || run_matrix(&pipe))??;
    finish(cfg, records)
}

fn finish(cfg: &SimulationConfig, mut records: Vec<RunRecord>) -> Result<ExperimentOutput> {
    let order: Vec<RunKey> = run_keys(cfg);
    records.sort_by_key(|r| order.iter().position(|k| k == &r.key));
    let csv_path = cfg.out_dir.join("errors.csv");
    let mut buf = Vec::new();
    write_csv(&mut buf, &records)?;
    io::write_atomic(&csv_path, &buf)?;
    Ok(ExperimentOutput { records, csv_path })
}

fn run_matrix(pipe: &Pipeline) -> Result<Vec<RunRecord>> {
    let cfg = pipe.cfg;
    let tau = cfg.coarse_tau();
    let keys = run_keys(cfg);
    let mut records = Vec::with_capacity(keys.len());
    for group in regimes(cfg)? {
        let in_group = |k: &RunKey| group.iter().any(|e| e.id == k.example);
        let group_keys: Vec<RunKey> = keys.iter().copied().filter(|k| in_group(k)).collect();
        let prepared = pipe
            .regime(&group[0])
            .map_err(|e| ("assembly", e))
            .and_then(|regime| match pipe.cloud(&regime) {
                Ok(cloud) => Ok((regime, cloud)),
                Err(e) => Err(("cloud", e)),
            });
        let (regime, cloud) = match prepared {
            Ok(v) => v,
            Err((stage, e)) => {
                log::warn!("regime of example {}: {stage} failed: {e}", group[0].id);
                records.extend(group_keys.iter().map(|&k| failed(k, tau, stage_err(stage, &e))));
                continue;
            }
        };
        records.extend(run_regime(pipe, &regime, &cloud, &group, &group_keys)?);
    }
    Ok(records)
}

fn run_regime(pipe: &Pipeline, regime: &Regime, cloud: &PointCloud, group: &[Example], keys: &[RunKey]) -> Result<Vec<RunRecord>> {
    let cfg = pipe.cfg;
    let tau = cfg.coarse_tau();
    let references: Vec<(usize, Result<Trajectory>)> = group
        .par_iter()
        .map(|ex| {
            let r = pipe.reference(regime, ex);
            if let Ok(traj) = &r {
                if let Err(e) = pipe.dump(&format!("reference-ex{}", ex.id), &regime.ops, traj) {
                    return (ex.id, Err(e));
                }
            }
            (ex.id, r)
        })
        .collect();
    let reference_of = |id: usize| references.iter().find(|(e, _)| *e == id).map(|(_, r)| r).expect("reference slot");

    // Runs whose coarse states are all cached need neither bases nor R_ms.
    let cached: BTreeMap<RunKey, (Trajectory, f64)> = keys
        .iter()
        .filter_map(|k| {
            let ex = group.iter().find(|e| e.id == k.example)?;
            let bytes = pipe.cache.get("run", &pipe.run_key(&regime.keys.basis[&k.basis_type], ex, k)).ok()??;
            io::decode_trajectory(&bytes).ok().map(|v| (*k, v))
        })
        .collect();
    let bases = if keys.iter().all(|k| cached.contains_key(k)) {
        Ok(Vec::new())
    } else {
        pipe.bases(regime, cloud)
    };
    let pou = match &bases {
        Ok(b) if !b.is_empty() => nodal_pou(&pipe.grid, cloud).map(Some),
        _ => Ok(None),
    };

    let mut combos: Vec<(BasisType, usize)> = keys.iter().map(|k| (k.basis_type, k.n_basis)).collect();
    combos.dedup();
    combos.sort();
    combos.dedup();
    let per_combo: Vec<Vec<RunRecord>> = combos
        .par_iter()
        .map(|&(t, nb)| {
            let combo_keys: Vec<RunKey> = keys.iter().copied().filter(|k| k.basis_type == t && k.n_basis == nb).collect();
            let fail_all = |stage: &str, e: &Error| combo_keys.iter().map(|&k| failed(k, tau, stage_err(stage, e))).collect::<Vec<_>>();
            let need_build = combo_keys.iter().any(|k| !cached.contains_key(k));
            let coarse = if need_build {
                let bases = match &bases {
                    Ok(b) => b,
                    Err(e) => return fail_all("basis", e),
                };
                let pou = match &pou {
                    Ok(Some(p)) => p,
                    Ok(None) => unreachable!("partition of unity is built with the bases"),
                    Err(e) => return fail_all("partition of unity", e),
                };
                let space = match build_rms(bases, pou, &regime.ops, t, nb) {
                    Ok(s) => s,
                    Err(e) => return fail_all("R_ms", &e),
                };
                match project_operators(&space.r_ms, &regime.ops) {
                    Ok(c) => Some((space, c)),
                    Err(e) => return fail_all("coarse operators", &e),
                }
            } else {
                None
            };
            combo_keys
                .iter()
                .map(|k| {
                    let ex = group.iter().find(|e| e.id == k.example).expect("key belongs to group");
                    let reference = match reference_of(k.example) {
                        Ok(r) => r,
                        Err(e) => return failed(*k, tau, stage_err("reference", e)),
                    };
                    let run = match cached.get(k) {
                        Some(v) => Ok(v.clone()),
                        None => {
                            let (space, cops) = coarse.as_ref().expect("coarse space built for uncached runs");
                            pipe.coarse(regime, space, cops, ex, k.method).and_then(|v| {
                                let rk = pipe.run_key(&regime.keys.basis[&k.basis_type], ex, k);
                                pipe.cache.put("run", &rk, &io::encode_trajectory(&v.0, v.1))?;
                                Ok(v)
                            })
                        }
                    };
                    let (traj, seconds) = match run {
                        Ok(v) => v,
                        Err(e) => return failed(*k, tau, stage_err("coarse run", &e)),
                    };
                    let finish = || -> Result<ErrorReport> {
                        pipe.dump(&k.id(), &regime.ops, &traj)?;
                        if cfg.trace {
                            pipe.write_trace(k, &regime.field, &regime.ops, reference, &traj)?;
                        }
                        pipe.errors(&regime.field, &regime.ops, reference, &traj)
                    };
                    match finish() {
                        Ok(report) => {
                            log::info!("{}: L2 {:.3}% H1 {:.3}%", k.id(), report.l2_pct, report.h1_pct);
                            RunRecord {
                                key: *k,
                                tau,
                                report: Some(report),
                                seconds,
                                status: "ok".into(),
                            }
                        }
                        Err(e) => failed(*k, tau, stage_err("metrics", &e)),
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_combo.into_iter().flatten().collect())
}

/// Recomputes the error table from cached reference and coarse states only.
pub fn recompute_errors(cfg: &SimulationConfig) -> Result<ExperimentOutput> {
    let pipe = Pipeline::new(cfg, true)?;
    let tau = cfg.coarse_tau();
    let keys = run_keys(cfg);
    let mut records = Vec::with_capacity(keys.len());
    for group in regimes(cfg)? {
        let regime = pipe.regime(&group[0])?;
        for ex in &group {
            let reference = pipe
                .cache
                .get("reference", &pipe.reference_key(ex))?
                .map(|b| io::decode_trajectory(&b))
                .transpose()?;
            for k in keys.iter().filter(|k| k.example == ex.id) {
                let run = pipe
                    .cache
                    .get("run", &pipe.run_key(&regime.keys.basis[&k.basis_type], ex, k))?
                    .map(|b| io::decode_trajectory(&b))
                    .transpose()?;
                let rec = match (&reference, run) {
                    (Some((r, _)), Some((u, seconds))) => match pipe.errors(&regime.field, &regime.ops, r, &u) {
                        Ok(report) => RunRecord {
                            key: *k,
                            tau,
                            report: Some(report),
                            seconds,
                            status: "ok".into(),
                        },
                        Err(e) => failed(*k, tau, stage_err("metrics", &e)),
                    },
                    (None, _) => failed(*k, tau, "failed: reference not cached".into()),
                    (_, None) => failed(*k, tau, "failed: coarse run not cached".into()),
                };
                records.push(rec);
            }
        }
    }
    finish(cfg, records)
}

/// Status of one artifact-producing task outside the error table.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStatus {
    pub name: String,
    pub path: Option<PathBuf>,
    pub error: Option<String>,
}

fn task(name: String, r: Result<PathBuf>) -> TaskStatus {
    match r {
        Ok(p) => TaskStatus {
            name,
            path: Some(p),
            error: None,
        },
        Err(e) => TaskStatus {
            name,
            path: None,
            error: Some(e.to_string()),
        },
    }
}

fn write_space(space: &MultiscaleSpace, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let matrix = dir.join(format!("{stem}.coo"));
    let meta = dir.join(format!("{stem}.meta"));
    space.write(
        std::io::BufWriter::new(fs::File::create(&matrix)?),
        std::io::BufWriter::new(fs::File::create(&meta)?),
    )?;
    Ok(matrix)
}

/// Builds and persists `R_ms` for every configured example, type and count
/// under `out_dir/basis`.
pub fn build_bases(cfg: &SimulationConfig) -> Result<Vec<TaskStatus>> {
    let pipe = Pipeline::new(cfg, cfg.cache)?;
    with_pool(cfg.jobs, || -> Result<Vec<TaskStatus>> {
        let mut out = Vec::new();
        let dir = cfg.out_dir.join("basis");
        for group in regimes(cfg)? {
            let built = pipe.regime(&group[0]).and_then(|regime| {
                let cloud = pipe.cloud(&regime)?;
                let bases = pipe.bases(&regime, &cloud)?;
                let pou = nodal_pou(&pipe.grid, &cloud)?;
                Ok((regime, bases, pou))
            });
            for &t in &cfg.basis_types {
                for &nb in &cfg.n_basis {
                    let space = built
                        .as_ref()
                        .map_err(|e| Error::InvalidArgument(e.to_string()))
                        .and_then(|(regime, bases, pou)| build_rms(bases, pou, &regime.ops, t, nb));
                    for ex in &group {
                        let stem = format!("ex{}-type{t}-nb{nb}", ex.id);
                        let r = space.as_ref().map_err(|e| Error::InvalidArgument(e.to_string())).and_then(|s| write_space(s, &dir, &stem));
                        out.push(task(stem, r));
                    }
                }
            }
        }
        Ok(out)
    })?
}

/// Runs the fine reference for every configured example and writes
/// `out_dir/reference/ex<N>/final.bin` (plus VTK when enabled).
pub fn run_references(cfg: &SimulationConfig) -> Result<Vec<TaskStatus>> {
    let pipe = Pipeline::new(cfg, cfg.cache)?;
    with_pool(cfg.jobs, || -> Result<Vec<TaskStatus>> {
        let mut out = Vec::new();
        for group in regimes(cfg)? {
            let regime = match pipe.regime(&group[0]) {
                Ok(r) => r,
                Err(e) => {
                    let msg = e.to_string();
                    out.extend(group.iter().map(|ex| task(format!("ex{}", ex.id), Err(Error::InvalidArgument(msg.clone())))));
                    continue;
                }
            };
            let done: Vec<TaskStatus> = group
                .par_iter()
                .map(|ex| {
                    let name = format!("ex{}", ex.id);
                    let r = pipe.reference(&regime, ex).and_then(|traj| {
                        let dir = cfg.out_dir.join("reference").join(&name);
                        fs::create_dir_all(&dir)?;
                        let path = dir.join("final.bin");
                        io::write_raw_f64(&path, &regime.ops.dofs.extend(traj.final_state(), 0.0))?;
                        pipe.dump(&format!("reference-{name}"), &regime.ops, &traj)?;
                        Ok(path)
                    });
                    task(name, r)
                })
                .collect();
            out.extend(done);
        }
        Ok(out)
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn smoke(dir: &Path) -> SimulationConfig {
        SimulationConfig {
            examples: vec![1, 2],
            out_dir: dir.to_path_buf(),
            ..SimulationConfig::preset(Preset::Smoke)
        }
    }

    #[test]
    fn keys_follow_list_order() {
        let cfg = SimulationConfig::preset(Preset::Smoke);
        let keys = run_keys(&cfg);
        assert_eq!(keys.len(), 8 * 2 * 2 * 2);
        assert_eq!(keys[0].id(), "ex1-fd-type1-nb2");
        assert_eq!(keys[1].id(), "ex1-ei-type1-nb2");
        assert_eq!(keys.last().unwrap().id(), "ex8-ei-type2-nb4");
    }

    #[test]
    fn cache_keys_depend_on_inputs() {
        let a = Cache::key("s", &(1, 2.0));
        assert_eq!(a, Cache::key("s", &(1, 2.0)));
        assert_ne!(a, Cache::key("s", &(1, 2.5)));
        assert_ne!(a, Cache::key("t", &(1, 2.0)));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn csv_quotes_failures() {
        let key = RunKey {
            example: 3,
            method: CoarseMethod::Ei,
            basis_type: BasisType::Two,
            n_basis: 5,
        };
        let recs = vec![
            RunRecord {
                key,
                tau: 0.004,
                report: Some(ErrorReport { l2_pct: 1.5, h1_pct: 2.0 }),
                seconds: 0.0,
                status: "ok".into(),
            },
            failed(key, 0.004, "failed: basis: a, b".into()),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "example,method,basis_type,n_basis,tau,l2_pct,h1_pct,seconds,status");
        assert_eq!(lines[1], "3,ei,2,5,0.004,1.5,2,0,ok");
        assert_eq!(lines[2], "3,ei,2,5,0.004,,,0,\"failed: basis: a, b\"");
    }

    #[test]
    fn smoke_matrix_is_cached_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke(dir.path());
        let cold = run_experiment(&cfg).unwrap();
        assert!(!cold.any_failed(), "{:?}", cold.records);
        assert_eq!(cold.records.len(), 2 * 2 * 2 * 2);
        for r in &cold.records {
            let rep = r.report.as_ref().unwrap();
            assert!(rep.l2_pct.is_finite() && rep.l2_pct >= 0.0, "{r:?}");
            // The unforced example decays to roundoff level, so only the
            // forced one has a meaningful relative error.
            if r.key.example == 1 {
                assert!(rep.l2_pct < 100.0, "{r:?}");
            }
        }
        let cold_csv = fs::read(&cold.csv_path).unwrap();
        let artifacts = fs::read_dir(dir.path().join("cache")).unwrap().count();
        assert!(artifacts > 0);

        let warm = run_experiment(&cfg).unwrap();
        assert_eq!(fs::read(&warm.csv_path).unwrap(), cold_csv);
        assert_eq!(fs::read_dir(dir.path().join("cache")).unwrap().count(), artifacts);

        let fresh_dir = tempfile::tempdir().unwrap();
        let fresh = run_experiment(&SimulationConfig {
            cache: false,
            ..smoke(fresh_dir.path())
        })
        .unwrap();
        assert_eq!(fs::read(&fresh.csv_path).unwrap(), cold_csv);

        let again = recompute_errors(&cfg).unwrap();
        assert_eq!(fs::read(&again.csv_path).unwrap(), cold_csv);
    }

    #[test]
    fn stage_failures_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        // More modes than any patch can supply.
        let cfg = SimulationConfig {
            n_basis: vec![100_000],
            methods: vec![CoarseMethod::Ei],
            basis_types: vec![BasisType::One],
            examples: vec![1],
            ..smoke(dir.path())
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.any_failed());
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].status.starts_with("failed: basis"), "{}", out.records[0].status);
        let text = fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn errors_verb_reports_missing_cache() {
        let dir = tempfile::tempdir().unwrap();
        let out = recompute_errors(&smoke(dir.path())).unwrap();
        assert!(out.any_failed());
        assert!(out.records.iter().all(|r| r.status == "failed: reference not cached"));
    }
}
