//! Output formats: CSV grids and vectors, 16-bit PGM heatmaps, JSON
//! documents and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{hex_digest, ArchSpec};
use crate::erf::Grid;
use crate::error::{Error, Result};

pub const PGM_MAXVAL: u16 = 65535;
pub const MANIFEST_VERSION: u32 = 1;

/// A written file and the SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<OutputFile> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(OutputFile {
        path: name.to_string(),
        sha256: hex_digest(bytes),
    })
}

/// 17 significant digits: enough for every `f64` to round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .flexible(true)
        .from_writer(vec![]);
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Grid rows as CSV records, top row first, no header.
pub fn grid_csv(grid: &Grid) -> Result<Vec<u8>> {
    csv_bytes(
        grid.data
            .chunks(grid.w)
            .map(|row| row.iter().map(|&v| fmt_f64(v)).collect()),
    )
}

pub fn write_grid_csv(dir: &Path, name: &str, grid: &Grid) -> Result<OutputFile> {
    write_bytes(dir, name, &grid_csv(grid)?)
}

pub fn read_grid_csv(path: &Path) -> Result<Grid> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut data = vec![];
    let (mut h, mut w) = (0, 0);
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w = rec.len();
        for f in &rec {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad number '{f}'", path.display())))?,
            );
        }
        h += 1;
    }
    Grid::new(h, w, data)
}

/// `tau,value` rows with a header.
pub fn write_temporal_csv(dir: &Path, name: &str, values: &[f64]) -> Result<OutputFile> {
    let rows = std::iter::once(vec!["tau".to_string(), "value".to_string()])
        .chain(values.iter().enumerate().map(|(t, &v)| vec![t.to_string(), fmt_f64(v)]));
    write_bytes(dir, name, &csv_bytes(rows)?)
}

pub fn write_table_csv(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<OutputFile> {
    let all = std::iter::once(header.iter().map(|s| s.to_string()).collect()).chain(rows.iter().cloned());
    write_bytes(dir, name, &csv_bytes(all)?)
}

/// Binary PGM, maxval 65535, big-endian samples, `round(v * 65535)`.
pub fn pgm_bytes(grid: &Grid) -> Result<Vec<u8>> {
    if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("heatmap value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n{PGM_MAXVAL}\n", grid.w, grid.h).into_bytes();
    for &v in &grid.data {
        let q = (v * f64::from(PGM_MAXVAL)).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(dir: &Path, name: &str, grid: &Grid) -> Result<OutputFile> {
    write_bytes(dir, name, &pgm_bytes(grid)?)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<OutputFile> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(dir, name, &bytes)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<OutputFile> {
    write_bytes(dir, name, text.as_bytes())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Where the parameters came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSource {
    /// Always the string `"random-init"`.
    RandomInit(String),
    File {
        path: PathBuf,
        sha256: String,
    },
}

impl WeightSource {
    pub fn random() -> Self {
        WeightSource::RandomInit("random-init".into())
    }
}

/// One analysed architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestArch {
    pub label: String,
    pub arch: ArchSpec,
    pub weights: WeightSource,
    /// Stand-in components that are not part of the analysed method.
    pub standin_components: Vec<String>,
}

/// Everything needed to re-run a command and reproduce its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub archs: Vec<ManifestArch>,
    pub seed: u64,
    pub samples: usize,
    pub stimulus: String,
    pub input_distribution: String,
    pub stimulus_value: f64,
    pub probes: Vec<String>,
    pub read_at: crate::blocks::ReadAt,
    pub channels: crate::erf::ChannelAgg,
    pub gamma: f64,
    pub outputs: Vec<OutputFile>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_quantization() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let b = pgm_bytes(&g).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&b[..header.len()], header);
        let px: Vec<u16> = b[header.len()..]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, [0, 65535, 32768, 16384]);
        let z = pgm_bytes(&Grid::zeros(3, 1)).unwrap();
        assert!(z[b"P5\n1 3\n65535\n".len()..].iter().all(|&v| v == 0));
        assert!(pgm_bytes(&Grid::new(1, 1, vec![1.5]).unwrap()).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX, 5e-324, -0.0, 123456.789];
        let g = Grid::new(1, 7, vals.clone()).unwrap();
        let f = write_grid_csv(dir.path(), "g.csv", &g).unwrap();
        let back = read_grid_csv(&dir.path().join(&f.path)).unwrap();
        for (a, b) in vals.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(f.sha256, file_sha256(&dir.path().join("g.csv")).unwrap());
    }

    #[test]
    fn temporal_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_temporal_csv(dir.path(), "t.csv", &[48.0]).unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "tau,value\r\n0,4.8000000000000000e1\r\n");
    }

    #[test]
    fn io_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = write_text(&blocker, "a.txt", "hi").unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
