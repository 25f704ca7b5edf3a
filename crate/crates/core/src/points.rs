//! Point sets: ingestion from text/binary files and synthetic generators.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `n` points in `d` dimensions, stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    n: usize,
    d: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(n: usize, d: usize, coords: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("point set must be non-empty (n={n}, d={d})")));
        }
        if coords.len() != n * d {
            return Err(Error::invalid(format!(
                "expected {} coordinates for n={n}, d={d}, got {}",
                n * d,
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite coordinate at point {} dim {}",
                pos / d,
                pos % d
            )));
        }
        Ok(PointSet { n, d, coords })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Squared Euclidean distance between points `i` and `j`.
    #[inline]
    pub fn dist2(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.point(i), self.point(j))
    }

    /// Little-endian binary encoding: `n: u64`, `d: u64`, then `n * d` f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.coords.len());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.coords {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("point file shorter than its 16-byte header".into()));
        }
        let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(16))
            .ok_or_else(|| Error::Format(format!("absurd point header n={n} d={d}")))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "point file has {} bytes, header n={n} d={d} needs {expected}",
                bytes.len()
            )));
        }
        let coords = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        PointSet::new(n, d, coords).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path, format: PointFormat) -> Result<()> {
        let bytes = match format {
            PointFormat::Binary => self.to_bytes(),
            PointFormat::Text => {
                let mut s = String::new();
                for i in 0..self.n {
                    let row: Vec<String> = self.point(i).iter().map(|v| format!("{v:?}")).collect();
                    s.push_str(&row.join(" "));
                    s.push('\n');
                }
                s.into_bytes()
            }
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    /// Whitespace- or comma-delimited, one point per line.
    Text,
    /// `n`, `d` as u64 then point-major f64, all little-endian.
    Binary,
}

impl PointFormat {
    /// `.bin` is binary; `.txt`, `.csv` and anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => PointFormat::Binary,
            _ => PointFormat::Text,
        }
    }
}

pub fn load_points(path: &Path, format: Option<PointFormat>) -> Result<PointSet> {
    let format = format.unwrap_or_else(|| PointFormat::from_path(path));
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        PointFormat::Binary => PointSet::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg,
            },
            other => other,
        }),
        PointFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "file is not valid UTF-8".into(),
            })?;
            parse_text(&text, path)
        }
    }
}

fn parse_text(text: &str, path: &Path) -> Result<PointSet> {
    let mut coords = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut count = 0;
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| perr(format!("cannot parse {tok:?} as a number")))?;
            if !v.is_finite() {
                return Err(perr(format!("non-finite value {tok:?}")));
            }
            coords.push(v);
            count += 1;
        }
        match d {
            None => d = Some(count),
            Some(d) if d != count => {
                return Err(perr(format!("ragged row: expected {d} columns, found {count}")));
            }
            _ => {}
        }
        n += 1;
    }
    let d = d.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no points found".into(),
    })?;
    PointSet::new(n, d, coords)
}

/// Synthetic point distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Unit lattice filled row by row on a `ceil(sqrt(n))`-wide square.
    Grid2d,
    /// Uniform in the unit cube `[0, 1)^dim`.
    UniformRandom { dim: usize },
    /// Uniform on the unit sphere in three dimensions.
    Sphere3d,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Grid2d => write!(f, "grid2d"),
            Shape::UniformRandom { dim } => write!(f, "uniform:{dim}"),
            Shape::Sphere3d => write!(f, "sphere3d"),
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid2d" => Ok(Shape::Grid2d),
            "sphere3d" => Ok(Shape::Sphere3d),
            "uniform" | "uniform_random" => Ok(Shape::UniformRandom { dim: 2 }),
            _ => {
                let dim = s
                    .strip_prefix("uniform:")
                    .or_else(|| s.strip_prefix("uniform_random:"))
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&d| d >= 1)
                    .ok_or_else(|| Error::invalid(format!("unknown point shape {s:?}")))?;
                Ok(Shape::UniformRandom { dim })
            }
        }
    }
}

pub fn synth_points(shape: Shape, n: usize, seed: u64) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::invalid("cannot synthesize an empty point set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match shape {
        Shape::Grid2d => {
            let side = (n as f64).sqrt().ceil() as usize;
            let coords = (0..n)
                .flat_map(|i| [(i % side) as f64, (i / side) as f64])
                .collect();
            PointSet::new(n, 2, coords)
        }
        Shape::UniformRandom { dim } => {
            if dim == 0 {
                return Err(Error::invalid("uniform_random needs dim >= 1"));
            }
            let coords = (0..n * dim).map(|_| rng.random::<f64>()).collect();
            PointSet::new(n, dim, coords)
        }
        Shape::Sphere3d => {
            let mut coords = Vec::with_capacity(3 * n);
            while coords.len() < 3 * n {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    continue;
                }
                coords.extend(v.iter().map(|x| x / norm));
            }
            PointSet::new(n, 3, coords)
        }
    }
}
