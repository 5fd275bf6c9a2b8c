//! Raw little-endian volume files with a plain-text sidecar header.
//!
//! A volume at `P` is stored as `P` (dims product × 8 bytes of f64 LE, first
//! index fastest) plus `P.hdr` with one `key = value` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{NlctfError, Result};
use crate::tensor::Tensor3;

pub const FORMAT: &str = "nlctf-volume-1";
const LAYOUT: &str = "column-major";
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub data: Tensor3,
    /// What the payload holds, e.g. `attenuation`, `counts`, `sinogram`.
    pub kind: String,
    pub units: String,
    pub bin_edges_kev: Vec<f64>,
    pub scale: f64,
    pub seed: u64,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn format_err(path: &Path, reason: impl Into<String>) -> NlctfError {
    NlctfError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

impl VolumeFile {
    pub fn new(data: Tensor3, kind: &str, units: &str) -> Self {
        Self {
            data,
            kind: kind.into(),
            units: units.into(),
            bin_edges_kev: Vec::new(),
            scale: 1.0,
            seed: 0,
        }
    }

    pub fn with_bins(mut self, edges: &[f64]) -> Self {
        self.bin_edges_kev = edges.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn header_text(&self) -> String {
        let [a, b, c] = self.data.dims();
        let edges: Vec<String> = self.bin_edges_kev.iter().map(|e| e.to_string()).collect();
        let mut h = String::new();
        writeln!(h, "format = {FORMAT}").unwrap();
        writeln!(h, "dims = {a} {b} {c}").unwrap();
        writeln!(h, "layout = {LAYOUT}").unwrap();
        writeln!(h, "dtype = {DTYPE}").unwrap();
        writeln!(h, "units = {}", self.units).unwrap();
        writeln!(h, "kind = {}", self.kind).unwrap();
        writeln!(h, "bin_edges_kev = {}", edges.join(" ")).unwrap();
        writeln!(h, "scale = {}", self.scale).unwrap();
        writeln!(h, "seed = {}", self.seed).unwrap();
        h
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in self.data.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        fs::write(header_path(path), self.header_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let hpath = header_path(path);
        let text = fs::read_to_string(&hpath).map_err(|e| format_err(&hpath, e.to_string()))?;
        let mut dims = None;
        let mut out = Self::new(Tensor3::zeros([1, 1, 1]), "", "");
        let mut seen_format = false;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(&hpath, format!("line {}: expected key = value", n + 1)))?;
            let v = v.trim();
            let num = |s: &str| s.parse::<f64>().map_err(|e| format_err(&hpath, format!("{}: {e}", k.trim())));
            match k.trim() {
                "format" if v == FORMAT => seen_format = true,
                "format" => return Err(format_err(&hpath, format!("unsupported format {v:?}"))),
                "dims" => {
                    let d: Vec<usize> = v
                        .split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| format_err(&hpath, format!("dims: {e}")))?;
                    if d.len() != 3 || d.contains(&0) {
                        return Err(format_err(&hpath, "dims must be three positive integers"));
                    }
                    dims = Some([d[0], d[1], d[2]]);
                }
                "layout" if v != LAYOUT => return Err(format_err(&hpath, format!("unsupported layout {v:?}"))),
                "dtype" if v != DTYPE => return Err(format_err(&hpath, format!("unsupported dtype {v:?}"))),
                "layout" | "dtype" => {}
                "units" => out.units = v.to_string(),
                "kind" => out.kind = v.to_string(),
                "bin_edges_kev" => out.bin_edges_kev = v.split_whitespace().map(num).collect::<Result<_>>()?,
                "scale" => out.scale = num(v)?,
                "seed" => out.seed = v.parse().map_err(|e| format_err(&hpath, format!("seed: {e}")))?,
                other => return Err(format_err(&hpath, format!("unknown key {other:?}"))),
            }
        }
        if !seen_format {
            return Err(format_err(&hpath, "missing format line"));
        }
        let dims = dims.ok_or_else(|| format_err(&hpath, "missing dims"))?;
        let bytes = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
        let want = dims.iter().product::<usize>() * 8;
        if bytes.len() != want {
            return Err(format_err(path, format!("payload has {} bytes, dims need {want}", bytes.len())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.data = Tensor3::from_vec(dims, values)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/v.raw");
        let t = Tensor3::from_fn([3, 4, 2], |i, j, k| (i as f64 - 1.3) * 1e-7 + j as f64 * 0.1 + k as f64);
        let mut v = VolumeFile::new(t, "attenuation", "cm^-1")
            .with_bins(&[16.0, 22.5, 50.0])
            .with_seed(42);
        v.scale = 0.125;
        v.write(&path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 3 * 4 * 2 * 8);
        assert_eq!(VolumeFile::read(&path).unwrap(), v);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        VolumeFile::new(Tensor3::zeros([2, 2, 2]), "counts", "1").write(&path).unwrap();
        fs::write(&path, [0u8; 24]).unwrap();
        assert!(matches!(VolumeFile::read(&path), Err(NlctfError::Format { .. })));
        let h = header_path(&path);
        fs::write(&h, "format = nlctf-volume-1\ndims = 2 0 2\n").unwrap();
        assert!(VolumeFile::read(&path).is_err());
        fs::write(&h, "dims = 2 2 2\n").unwrap();
        assert!(VolumeFile::read(&path).is_err());
        fs::write(&h, "format = nlctf-volume-1\ndims = 2 2 2\ncolour = red\n").unwrap();
        assert!(VolumeFile::read(&path).is_err());
        assert!(VolumeFile::read(&dir.path().join("missing.raw")).is_err());
    }
}
