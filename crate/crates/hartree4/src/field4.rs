//! Complex fields on a periodic box `[-L/2, L/2)^4` and their on-disk form:
//! raw little-endian interleaved `re, im` f64 values (last axis fastest) next
//! to a JSON header.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vec4::Vec4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid4 {
    /// points per axis
    pub n: usize,
    /// box length
    pub length: f64,
}

impl Grid4 {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return invalid(format!("points per axis must be even and at least 4, got {n}"));
        }
        if !(length > 0.0) || !length.is_finite() {
            return invalid("box length must be positive");
        }
        Ok(Grid4 { n, length })
    }

    pub fn len(&self) -> usize {
        self.n.pow(4)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(4)
    }

    /// Coordinate of index `i` along an axis.
    pub fn coord(&self, i: usize) -> f64 {
        -0.5 * self.length + i as f64 * self.h()
    }

    pub fn index(&self, i: [usize; 4]) -> usize {
        ((i[0] * self.n + i[1]) * self.n + i[2]) * self.n + i[3]
    }

    pub fn point(&self, idx: usize) -> Vec4 {
        let n = self.n;
        let i3 = idx % n;
        let i2 = (idx / n) % n;
        let i1 = (idx / (n * n)) % n;
        let i0 = idx / (n * n * n);
        [self.coord(i0), self.coord(i1), self.coord(i2), self.coord(i3)]
    }

    /// Angular wavenumber of FFT index `i`.
    pub fn wavenumber(&self, i: usize) -> f64 {
        let k = if i <= self.n / 2 { i as f64 } else { i as f64 - self.n as f64 };
        2.0 * std::f64::consts::PI * k / self.length
    }

    /// Distance from `x` to the nearest face of the box.
    pub fn distance_to_boundary(&self, x: &Vec4) -> f64 {
        x.iter().map(|c| 0.5 * self.length - c.abs()).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field4 {
    pub grid: Grid4,
    pub data: Vec<Complex64>,
}

/// JSON header stored next to the raw field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldHeader {
    pub n: usize,
    pub length: f64,
    pub time: f64,
    pub layout: String,
    /// free-form parameter state (modulation parameters, run options)
    #[serde(default)]
    pub params: serde_json::Value,
}

impl Field4 {
    pub fn zeros(grid: Grid4) -> Self {
        Field4 { grid, data: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    pub fn from_fn(grid: Grid4, f: impl Fn(&Vec4) -> Complex64) -> Self {
        Field4 { grid, data: (0..grid.len()).map(|i| f(&grid.point(i))).collect() }
    }

    /// `||u||_{L^2}^2`
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `||self - other||_{L^2}`
    pub fn distance(&self, other: &Field4) -> Result<f64> {
        if self.grid != other.grid {
            return invalid("fields live on different grids");
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        Ok((s * self.grid.cell_volume()).sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 * self.data.len());
        for z in &self.data {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(grid: Grid4, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 16 * grid.len() {
            return Err(Error::Format(format!("expected {} bytes, found {}", 16 * grid.len(), bytes.len())));
        }
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        let data = bytes.chunks_exact(16).map(|c| Complex64::new(f(&c[..8]), f(&c[8..]))).collect();
        Ok(Field4 { grid, data })
    }

    /// Write `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, time: f64, params: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = FieldHeader {
            n: self.grid.n,
            length: self.grid.length,
            time,
            layout: "f64-le interleaved re,im; index ((i0*n+i1)*n+i2)*n+i3".into(),
            params,
        };
        fs::write(dir.join(format!("{stem}.bin")), self.to_bytes())?;
        let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Field4, FieldHeader)> {
        let text = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let header: FieldHeader = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let grid = Grid4::new(header.n, header.length)?;
        let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
        Ok((Field4::from_bytes(grid, &bytes)?, header))
    }
}
