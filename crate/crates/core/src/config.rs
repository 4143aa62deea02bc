//! Experiment configuration: presets, TOML overrides and the example table.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coarse_solver::CoarseMethod;
use crate::error::{Error, Result};
use crate::grid::{ChannelPreset, InitialCondition, SourceKind, Velocity};
use crate::msbasis::BasisType;
use crate::pointcloud::CvtParams;

/// One cell of the eight-example matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example {
    pub id: usize,
    pub contrast: f64,
    pub epsilon: f64,
    pub source: SourceKind,
}

impl Example {
    /// Examples sharing a regime share the coarse cloud and the local bases.
    pub fn regime(&self) -> (u64, u64) {
        (self.contrast.to_bits(), self.epsilon.to_bits())
    }
}

/// Examples 1-4 use epsilon = 1, 5-8 use epsilon = 1/20; contrasts alternate
/// 1000, 1000, 10, 10 and sources alternate f1, f2.
pub fn example(id: usize) -> Result<Example> {
    if !(1..=8).contains(&id) {
        return Err(Error::InvalidArgument(format!("example id must be in 1..=8, got {id}")));
    }
    let k = id - 1;
    Ok(Example {
        id,
        contrast: if k % 4 < 2 { 1000.0 } else { 10.0 },
        epsilon: if k < 4 { 1.0 } else { 1.0 / 20.0 },
        source: if k % 2 == 0 { SourceKind::F1 } else { SourceKind::F2 },
    })
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Smoke,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "smoke" => Ok(Preset::Smoke),
            other => Err(Error::Parse(format!("unknown preset '{other}' (expected paper, desk or smoke)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Smoke => "smoke",
        })
    }
}

/// Full description of an experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Fine grid cells per axis.
    pub fine_n: usize,
    pub coarse_points: usize,
    pub t_final: f64,
    pub steps_coarse: usize,
    pub steps_reference: usize,
    pub n_basis: Vec<usize>,
    pub basis_types: Vec<BasisType>,
    pub methods: Vec<CoarseMethod>,
    pub examples: Vec<usize>,
    pub channels: ChannelPreset,
    pub velocity: Velocity,
    pub initial: InitialCondition,
    pub density_alpha: f64,
    pub eps_bd: f64,
    pub cvt: CvtParams,
    pub pseudo_spacing: f64,
    pub gamma: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Reuse stage artifacts from `out_dir/cache`.
    pub cache: bool,
    /// Record wall-clock seconds; when off the column is 0 and the CSV is
    /// reproducible byte for byte.
    pub timings: bool,
    /// Write VTK dumps of the stored states of every run.
    pub vtk: bool,
    /// Also report errors at every coarse time step.
    pub trace: bool,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl SimulationConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            fine_n: 20,
            coarse_points: 64,
            t_final: 0.2,
            steps_coarse: 50,
            steps_reference: 500,
            n_basis: vec![5, 10, 15, 20],
            basis_types: vec![BasisType::One, BasisType::Two],
            methods: vec![CoarseMethod::Fd, CoarseMethod::Ei],
            examples: (1..=8).collect(),
            channels: ChannelPreset::PaperLike,
            velocity: Velocity::Shear,
            initial: InitialCondition::Bubble,
            density_alpha: 0.1,
            eps_bd: 1e-4,
            cvt: CvtParams::desk(),
            pseudo_spacing: 0.02,
            gamma: 2.0,
            seed: 42,
            out_dir: PathBuf::from("out"),
            cache: true,
            timings: false,
            vtk: false,
            trace: false,
            jobs: 0,
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => Self {
                fine_n: 50,
                coarse_points: 1000,
                steps_reference: 20_000,
                cvt: CvtParams::paper(),
                pseudo_spacing: 0.005,
                ..desk
            },
            Preset::Smoke => Self {
                fine_n: 6,
                coarse_points: 8,
                steps_coarse: 10,
                steps_reference: 40,
                n_basis: vec![2, 4],
                cvt: CvtParams {
                    iterations: 20,
                    samples: 2000,
                    ..CvtParams::desk()
                },
                pseudo_spacing: 0.05,
                ..desk
            },
        }
    }

    /// Parses TOML. An optional top-level `preset = "..."` key selects the
    /// base (desk by default); every other key overrides it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
        let preset = match table.remove("preset") {
            None => Preset::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Parse(format!("preset must be a string, got {other}"))),
        };
        Self::preset(preset).merged(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Applies TOML overrides on top of `self`; nested tables merge per key.
    pub fn merged(&self, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Parse(format!("config: {e}")))?;
        merge(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.fine_n == 0 || self.coarse_points == 0 || self.steps_coarse == 0 || self.steps_reference == 0 {
            return bad("grid size, coarse points and step counts must be positive".into());
        }
        if self.steps_reference < self.steps_coarse {
            return bad(format!(
                "steps_reference ({}) must be at least steps_coarse ({})",
                self.steps_reference, self.steps_coarse
            ));
        }
        if self.trace && self.steps_reference % self.steps_coarse != 0 {
            return bad("trace needs steps_reference to be a multiple of steps_coarse".into());
        }
        for (name, v) in [
            ("t_final", self.t_final),
            ("density_alpha", self.density_alpha),
            ("eps_bd", self.eps_bd),
            ("pseudo_spacing", self.pseudo_spacing),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gamma >= 1.0) {
            return bad(format!("gamma must be at least 1, got {}", self.gamma));
        }
        if self.n_basis.is_empty() || self.n_basis.contains(&0) {
            return bad("n_basis must be a non-empty list of positive counts".into());
        }
        if self.basis_types.is_empty() || self.methods.is_empty() || self.examples.is_empty() {
            return bad("basis_types, methods and examples must be non-empty".into());
        }
        for &id in &self.examples {
            example(id)?;
        }
        Ok(())
    }

    pub fn max_basis(&self) -> usize {
        self.n_basis.iter().copied().max().unwrap_or(0)
    }

    pub fn coarse_tau(&self) -> f64 {
        self.t_final / self.steps_coarse as f64
    }

    pub fn example_defs(&self) -> Result<Vec<Example>> {
        self.examples.iter().map(|&id| example(id)).collect()
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses a comma-separated list such as `1,7` or `fd,ei`.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_table() {
        let e: Vec<Example> = (1..=8).map(|i| example(i).unwrap()).collect();
        let contrasts: Vec<f64> = e.iter().map(|x| x.contrast).collect();
        assert_eq!(contrasts, [1000.0, 1000.0, 10.0, 10.0, 1000.0, 1000.0, 10.0, 10.0]);
        assert!(e[..4].iter().all(|x| x.epsilon == 1.0));
        assert!(e[4..].iter().all(|x| x.epsilon == 0.05));
        for pair in e.chunks(2) {
            assert_eq!(pair[0].source, SourceKind::F1);
            assert_eq!(pair[1].source, SourceKind::F2);
            assert_eq!(pair[0].regime(), pair[1].regime());
        }
        assert!(example(0).is_err() && example(9).is_err());
    }

    #[test]
    fn presets_are_valid() {
        for p in [Preset::Paper, Preset::Desk, Preset::Smoke] {
            SimulationConfig::preset(p).validate().unwrap();
        }
        let paper = SimulationConfig::preset(Preset::Paper);
        assert_eq!((paper.fine_n, paper.coarse_points, paper.steps_reference), (50, 1000, 20_000));
        assert_eq!((paper.t_final, paper.steps_coarse), (0.2, 50));
        let desk = SimulationConfig::default();
        assert_eq!((desk.fine_n, desk.coarse_points, desk.steps_reference), (20, 64, 500));
    }

    #[test]
    fn toml_overrides_merge_into_preset() {
        let cfg = SimulationConfig::from_toml_str(
            r#"
            preset = "smoke"
            examples = [1, 7]
            methods = ["ei"]
            basis_types = [2]
            seed = 9
            [cvt]
            iterations = 3
            [channels]
            kind = "random"
            count = 4
            seed = 1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.fine_n, 6);
        assert_eq!(cfg.examples, [1, 7]);
        assert_eq!(cfg.methods, [CoarseMethod::Ei]);
        assert_eq!(cfg.basis_types, [BasisType::Two]);
        assert_eq!(cfg.cvt.iterations, 3);
        assert_eq!(cfg.cvt.samples, 2000);
        assert_eq!(cfg.channels, ChannelPreset::Random { count: 4, seed: 1 });
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = SimulationConfig::preset(Preset::Smoke);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(SimulationConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "steps_reference = 10\nsteps_coarse = 50",
            "fine_n = 0",
            "n_basis = []",
            "examples = [9]",
            "gamma = 0.5",
            "t_final = -1.0",
            "no_such_key = 1",
            "preset = \"huge\"",
            "basis_types = [3]",
            "trace = true\nsteps_reference = 75",
        ] {
            assert!(SimulationConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<usize>("1, 7").unwrap(), [1, 7]);
        assert_eq!(parse_list::<CoarseMethod>("fd,ei").unwrap(), [CoarseMethod::Fd, CoarseMethod::Ei]);
        assert!(parse_list::<usize>("1,x").is_err());
    }
}
