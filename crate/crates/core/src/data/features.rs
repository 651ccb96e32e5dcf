//! Per-slide feature containers.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TCF1"            4 bytes magic
//! N                 u32 instance count
//! D                 u32 feature width
//! values            N·D f32, row-major
//! ["XY32" + N·(x u32, y u32)]   optional patch origins
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, FeatureFault, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"TCF1";
pub const COORD_TAG: &[u8; 4] = b"XY32";
const HEADER_LEN: u64 = 12;

/// An `N × D` block of `f32` features with optional patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub coords: Option<Vec<(u32, u32)>>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Data(format!(
                "feature block {rows}x{cols} cannot hold {} values",
                values.len()
            )));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            values,
            coords: None,
        })
    }

    pub fn with_coords(mut self, coords: Vec<(u32, u32)>) -> Result<Self> {
        if coords.len() != self.rows {
            return Err(Error::Data(format!(
                "{} coordinates for {} instances",
                coords.len(),
                self.rows
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    /// Lossless promotion to `f64`.
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::matrix(
            self.rows,
            self.cols,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated at construction")
    }

    /// Bitwise equality, distinguishing `-0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &FeatureMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.coords == other.coords
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Declared dimensions of a feature file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub rows: u32,
    pub cols: u32,
    pub has_coords: bool,
}

fn fault(path: &Path, kind: FeatureFault) -> Error {
    Error::Feature {
        path: path.to_path_buf(),
        kind,
    }
}

fn payload_bytes(path: &Path, rows: u32, cols: u32) -> Result<u64> {
    u64::from(rows)
        .checked_mul(u64::from(cols))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fault(path, FeatureFault::SizeOverflow { rows, cols }))
}

/// Validates the header against the file length without reading the payload.
pub fn read_header(path: &Path) -> Result<FeatureHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = [0u8; 12];
    let got = read_up_to(&mut f, &mut head).map_err(|e| Error::io(path, e))?;
    if got < 4 || &head[..4] != MAGIC {
        let mut m = [0u8; 4];
        m[..got.min(4)].copy_from_slice(&head[..got.min(4)]);
        return Err(fault(path, FeatureFault::BadMagic(m)));
    }
    if got < 12 {
        return Err(fault(
            path,
            FeatureFault::Truncated {
                expected: HEADER_LEN,
                actual: len,
            },
        ));
    }
    let rows = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let cols = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let need = payload_bytes(path, rows, cols)?;
    if len < need {
        return Err(fault(
            path,
            FeatureFault::Truncated {
                expected: need - HEADER_LEN,
                actual: len - HEADER_LEN,
            },
        ));
    }
    let trailer = len - need;
    let coord_len = 4 + 8 * u64::from(rows);
    let has_coords = match trailer {
        0 => false,
        t if t == coord_len => true,
        t => {
            return Err(fault(
                path,
                FeatureFault::BadTrailer(format!("{t} trailing bytes, expected 0 or {coord_len}")),
            ))
        }
    };
    Ok(FeatureHeader {
        rows,
        cols,
        has_coords,
    })
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let header = read_header(path)?;
    let (rows, cols) = (header.rows as usize, header.cols as usize);
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let mut skip = [0u8; 12];
    r.read_exact(&mut skip).map_err(io)?;
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw).map_err(io)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut m = FeatureMatrix {
        rows,
        cols,
        values,
        coords: None,
    };
    if header.has_coords {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(io)?;
        if &tag != COORD_TAG {
            return Err(fault(path, FeatureFault::BadTrailer(format!("unknown tag {tag:?}"))));
        }
        let mut raw = vec![0u8; rows * 8];
        r.read_exact(&mut raw).map_err(io)?;
        m.coords = Some(
            raw.chunks_exact(8)
                .map(|c| {
                    (
                        u32::from_le_bytes(c[..4].try_into().unwrap()),
                        u32::from_le_bytes(c[4..].try_into().unwrap()),
                    )
                })
                .collect(),
        );
    }
    Ok(m)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let rows = u32::try_from(m.rows).map_err(|_| Error::Data("too many instances".into()))?;
    let cols = u32::try_from(m.cols).map_err(|_| Error::Data("feature width too large".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&rows.to_le_bytes()).map_err(io)?;
    w.write_all(&cols.to_le_bytes()).map_err(io)?;
    for v in &m.values {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    if let Some(coords) = &m.coords {
        w.write_all(COORD_TAG).map_err(io)?;
        for (x, y) in coords {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
            w.write_all(&y.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// A directory of per-slide feature files.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    root: PathBuf,
}

impl FeatureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn relative_path(slide_id: &str) -> PathBuf {
        PathBuf::from("features").join(format!("{slide_id}.tcf"))
    }

    pub fn path_for(&self, slide_id: &str) -> PathBuf {
        self.root.join(Self::relative_path(slide_id))
    }

    pub fn read(&self, slide_id: &str) -> Result<FeatureMatrix> {
        read_features(&self.path_for(slide_id))
    }

    pub fn write(&self, slide_id: &str, m: &FeatureMatrix) -> Result<()> {
        write_features(&self.path_for(slide_id), m)
    }

    /// Lazily loads one slide at a time; at most one block is resident.
    pub fn stream<'a, I>(&'a self, slide_ids: I) -> impl Iterator<Item = Result<(String, FeatureMatrix)>> + 'a
    where
        I: IntoIterator<Item = &'a str> + 'a,
    {
        slide_ids
            .into_iter()
            .map(move |id| self.read(id).map(|m| (id.to_string(), m)))
    }
}
