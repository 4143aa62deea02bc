//! Field dumps (legacy VTK, flat binary) and binary cache blobs.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::assembly::DofMap;
use crate::error::{Error, Result};
use crate::fine_integrators::Trajectory;
use crate::grid::FineGrid;
use crate::msbasis::PatchModes;

const VECTOR_MAGIC: &[u8; 8] = b"MFGVEC01";
const MODES_MAGIC: &[u8; 8] = b"MFGMOD01";
const TRAJ_MAGIC: &[u8; 8] = b"MFGTRJ01";

/// Legacy ASCII VTK unstructured grid with nodal scalar fields.
pub fn write_vtk<W: Write>(mut w: W, grid: &FineGrid, title: &str, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = grid.node_count();
    for (name, values) in fields {
        if values.len() != n {
            return Err(Error::InvalidArgument(format!(
                "field '{name}' has {} values for {n} nodes",
                values.len()
            )));
        }
    }
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{}", title.lines().next().unwrap_or(""))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {n} double")?;
    for x in &grid.nodes {
        writeln!(w, "{:e} {:e} {:e}", x[0], x[1], x[2])?;
    }
    let m = grid.tet_count();
    writeln!(w, "CELLS {m} {}", 5 * m)?;
    for t in &grid.tets {
        writeln!(w, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    writeln!(w, "CELL_TYPES {m}")?;
    for _ in 0..m {
        writeln!(w, "10")?;
    }
    if !fields.is_empty() {
        writeln!(w, "POINT_DATA {n}")?;
        for (name, values) in fields {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(w, "{v:e}")?;
            }
        }
    }
    Ok(())
}

/// Writes each kept state as `state_NNNN.vtk` plus `final.bin`, with the
/// Dirichlet values reinstated.
pub fn dump_fields(traj: &Trajectory, grid: &FineGrid, dofs: &DofMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, (t, u)) in traj.times.iter().zip(&traj.states).enumerate() {
        let full = dofs.extend(u, 0.0);
        let file = BufWriter::new(fs::File::create(dir.join(format!("state_{k:04}.vtk")))?);
        write_vtk(file, grid, &format!("u at t = {t:e}"), &[("u", &full)])?;
    }
    let full = dofs.extend(traj.final_state(), 0.0);
    write_raw_f64(&dir.join("final.bin"), &full)
}

/// Flat little-endian f64 array without header.
pub fn write_raw_f64(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("truncated binary blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        if self.take(8)? != m {
            return Err(Error::Parse("unexpected binary blob header".into()));
        }
        Ok(())
    }
}

/// Vector blob with a header, used for cached states.
pub fn encode_vector(values: &[f64], extra: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * (values.len() + extra.len()));
    out.extend_from_slice(VECTOR_MAGIC);
    put_u64(&mut out, values.len() as u64);
    put_u64(&mut out, extra.len() as u64);
    put_f64s(&mut out, values);
    put_f64s(&mut out, extra);
    out
}

/// Inverse of [`encode_vector`]: `(values, extra)`.
pub fn decode_vector(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(VECTOR_MAGIC)?;
    let n = r.u64()? as usize;
    let m = r.u64()? as usize;
    Ok((r.f64s(n)?, r.f64s(m)?))
}

/// Per-patch spectral modes.
pub fn encode_modes(modes: &[PatchModes]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODES_MAGIC);
    put_u64(&mut out, modes.len() as u64);
    for m in modes {
        put_u64(&mut out, m.modes.nrows() as u64);
        put_u64(&mut out, m.modes.ncols() as u64);
        put_f64s(&mut out, &m.eigenvalues);
        put_f64s(&mut out, m.modes.as_slice());
    }
    out
}

pub fn decode_modes(bytes: &[u8]) -> Result<Vec<PatchModes>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(MODES_MAGIC)?;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let eigenvalues = r.f64s(cols)?;
        let data = r.f64s(rows * cols)?;
        out.push(PatchModes {
            eigenvalues,
            modes: DMatrix::from_vec(rows, cols, data),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes in mode blob".into()));
    }
    Ok(out)
}

/// Stored states of a trajectory plus a scalar tag (wall-clock seconds).
pub fn encode_trajectory(traj: &Trajectory, seconds: f64) -> Vec<u8> {
    let dim = traj.states.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(32 + 8 * traj.times.len() * (dim + 1));
    out.extend_from_slice(TRAJ_MAGIC);
    put_u64(&mut out, traj.times.len() as u64);
    put_u64(&mut out, dim as u64);
    put_f64s(&mut out, &[seconds]);
    put_f64s(&mut out, &traj.times);
    for s in &traj.states {
        put_f64s(&mut out, s);
    }
    out
}

/// Inverse of [`encode_trajectory`].
pub fn decode_trajectory(bytes: &[u8]) -> Result<(Trajectory, f64)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(TRAJ_MAGIC)?;
    let count = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let seconds = r.f64s(1)?[0];
    let times = r.f64s(count)?;
    let states = (0..count).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
    if count == 0 || r.pos != bytes.len() {
        return Err(Error::Parse("malformed trajectory blob".into()));
    }
    Ok((Trajectory { times, states }, seconds))
}

/// Reads a whole file, mapping "not found" to `None`.
pub fn read_optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::File::open(path) {
        Ok(mut f) => {
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            Ok(Some(buf))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Writes via a temporary file and rename so readers never see partial data.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
