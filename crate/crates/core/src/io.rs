//! On-disk artifacts: the shared binary matrix format, JSON headers and
//! atomic writes.
//!
//! A matrix dump is a 16-byte header (`b"BSDM"`, then little-endian `u32`
//! rows, cols and flags) followed by `rows·cols` little-endian `f64` values in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::elliptic_dtn::DtnOperator;
use crate::error::{Error, Result};
use crate::geometry::FieldKind;
use crate::hyperbolic_dtn::WaveTrace;
use crate::spectral::{BoundaryLayer, Estimates, SpectralData};

pub const MAGIC: &[u8; 4] = b"BSDM";
pub const HEADER_LEN: usize = 16;

/// Set when the dumped matrix is symmetric.
pub const FLAG_SYMMETRIC: u32 = 1;
/// Set when rows are modes (ψ and eigenvector dumps).
pub const FLAG_MODE_ROWS: u32 = 2;

pub fn encode_matrix(m: &Array2<f64>, flags: u32) -> Result<Vec<u8>> {
    let (r, c) = m.dim();
    let r32 = u32::try_from(r).map_err(|_| Error::Invalid("too many rows for the dump format".into()))?;
    let c32 = u32::try_from(c).map_err(|_| Error::Invalid("too many columns for the dump format".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * r * c);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    // `iter` walks logical row-major order whatever the memory layout.
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f64>, u32)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Invalid("not a BSDM matrix dump".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (r, c, flags) = (word(4) as usize, word(8) as usize, word(12));
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * r * c {
        return Err(Error::Invalid(format!(
            "dump declares {r}x{c} but carries {} bytes of data",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let m = Array2::from_shape_vec((r, c), data).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((m, flags))
}

/// Writes to a temporary file in the target directory, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_matrix(path: &Path, m: &Array2<f64>, flags: u32) -> Result<()> {
    write_atomic(path, &encode_matrix(m, flags)?)
}

pub fn read_matrix(path: &Path) -> Result<(Array2<f64>, u32)> {
    decode_matrix(&fs::read(path)?)
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Rows of strings to CSV bytes, header first.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// JSON side of a saved spectral record; the matrices live next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralHeader {
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub resolution: usize,
    pub kind: FieldKind,
    pub theta: f64,
    pub c_trace: f64,
    pub estimates: Estimates,
    pub lambdas: Vec<f64>,
    pub mass_weight: Vec<f64>,
    pub boundary_weight: Vec<f64>,
    pub n_total: usize,
    pub max_residual: f64,
    pub boundary_layer: Option<BoundaryLayer>,
    pub psi_file: String,
    pub eigvecs_file: Option<String>,
}

fn sibling(path: &Path, suffix: &str) -> (PathBuf, String) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("spectral");
    let name = format!("{stem}{suffix}");
    (path.with_file_name(&name), name)
}

/// Writes `path` (JSON header) plus `<stem>_psi.bsdm` and, when present,
/// `<stem>_eigvecs.bsdm` beside it. Returns every file written.
pub fn save_spectral(path: &Path, sd: &SpectralData) -> Result<Vec<PathBuf>> {
    let est = sd.estimates();
    let (psi_path, psi_name) = sibling(path, "_psi.bsdm");
    let eig = sd.eigvecs.as_ref().map(|_| sibling(path, "_eigvecs.bsdm"));
    let header = SpectralHeader {
        k: sd.k(),
        n: sd.dim,
        resolution: sd.resolution,
        kind: sd.kind,
        theta: est.theta,
        c_trace: est.c_trace,
        estimates: est,
        lambdas: sd.lambdas.clone(),
        mass_weight: sd.mass_weight.clone(),
        boundary_weight: sd.boundary_weight.clone(),
        n_total: sd.n_total,
        max_residual: sd.max_residual,
        boundary_layer: sd.boundary_layer.clone(),
        psi_file: psi_name,
        eigvecs_file: eig.as_ref().map(|e| e.1.clone()),
    };
    write_matrix(&psi_path, &sd.psis, FLAG_MODE_ROWS)?;
    let mut files = vec![psi_path];
    if let (Some(v), Some((p, _))) = (&sd.eigvecs, &eig) {
        write_matrix(p, v, FLAG_MODE_ROWS)?;
        files.push(p.clone());
    }
    write_json(path, &header)?;
    files.insert(0, path.to_path_buf());
    Ok(files)
}

pub fn load_spectral(path: &Path) -> Result<SpectralData> {
    let h: SpectralHeader = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let (psis, _) = read_matrix(&dir.join(&h.psi_file))?;
    if psis.dim() != (h.k, h.boundary_weight.len()) {
        return Err(Error::Mismatch(format!("{} has shape {:?}", h.psi_file, psis.dim())));
    }
    let eigvecs = match &h.eigvecs_file {
        Some(f) => {
            let (v, _) = read_matrix(&dir.join(f))?;
            if v.dim() != (h.k, h.mass_weight.len()) {
                return Err(Error::Mismatch(format!("{f} has shape {:?}", v.dim())));
            }
            Some(v)
        }
        None => None,
    };
    if h.lambdas.len() != h.k {
        return Err(Error::Mismatch("header K disagrees with the eigenvalue list".into()));
    }
    Ok(SpectralData {
        dim: h.n,
        resolution: h.resolution,
        kind: h.kind,
        lambdas: h.lambdas,
        psis,
        mass_weight: h.mass_weight,
        boundary_weight: h.boundary_weight,
        eigvecs,
        n_total: h.n_total,
        boundary_layer: h.boundary_layer,
        max_residual: h.max_residual,
    })
}

/// DtN matrix dump; symmetric operators carry [`FLAG_SYMMETRIC`].
pub fn save_dtn(path: &Path, op: &DtnOperator) -> Result<()> {
    let flags = if op.symmetry_defect() < 1e-9 { FLAG_SYMMETRIC } else { 0 };
    write_matrix(path, &op.matrix, flags)
}

/// Traces as one matrix: row `p·N + n` holds probe `p` at time step `n`.
pub fn wave_trace_matrix(tr: &WaveTrace) -> Array2<f64> {
    let nt = tr.times.len();
    let nb = tr.weight.len();
    let mut m = Array2::zeros((tr.traces.len() * nt, nb));
    for (p, probe) in tr.traces.iter().enumerate() {
        for (n, row) in probe.iter().enumerate() {
            for (i, x) in row.iter().enumerate() {
                m[[p * nt + n, i]] = *x;
            }
        }
    }
    m
}

pub fn save_wave_trace(path: &Path, tr: &WaveTrace) -> Result<()> {
    write_matrix(path, &wave_trace_matrix(tr), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble;
    use crate::geometry::{build_box_mesh, make_field, Bounds, Expression};
    use crate::spectral::eigensolve;

    #[test]
    fn header_layout() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode_matrix(&m, 5).unwrap();
        assert_eq!(b.len(), 16 + 48);
        assert_eq!(&b[..4], b"BSDM");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&b[24..32], &2.0f64.to_le_bytes());
        // Row-major even for a transposed view.
        let t = m.t().to_owned();
        let bt = encode_matrix(&t, 0).unwrap();
        assert_eq!(&bt[24..32], &4.0f64.to_le_bytes());
        let (back, flags) = decode_matrix(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(flags, 5);
    }

    #[test]
    fn bad_dumps_are_rejected() {
        assert!(decode_matrix(b"XXXX").is_err());
        let mut b = encode_matrix(&Array2::zeros((2, 2)), 0).unwrap();
        b.pop();
        assert!(decode_matrix(&b).is_err());
    }

    #[test]
    fn spectral_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = build_box_mesh(2, 8).unwrap();
        let f = make_field(&mesh, FieldKind::Metric, &Expression::identity(), None, Bounds::default()).unwrap();
        let sd = eigensolve(&assemble(&mesh, &f).unwrap(), 5).unwrap();
        let p = dir.path().join("sq.json");
        let files = save_spectral(&p, &sd).unwrap();
        assert_eq!(files.len(), 3);
        let back = load_spectral(&p).unwrap();
        assert_eq!(back, sd);
        let h: serde_json::Value = read_json(&p).unwrap();
        assert_eq!(h["K"], 5);
        assert!(h["theta"].as_f64().unwrap() >= 1.0);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"second");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
