//! Kernel functions and on-demand evaluation of kernel sub-blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::points::{sq_dist, PointSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    /// `exp(-|x - y|^2 / (2 h^2))`.
    Gaussian { bandwidth: f64 },
    /// `1 / |x - y|`, with the coincident-point value fixed to `1.0`.
    InverseDistance,
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let k = Kernel::Gaussian { bandwidth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::invalid(format!("Gaussian bandwidth must be positive, got {bandwidth}")),
            ),
            _ => Ok(()),
        }
    }

    /// Kernel value from a squared distance. Symmetric by construction since
    /// `(a - b)^2 == (b - a)^2` exactly in IEEE arithmetic.
    #[inline]
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        match *self {
            Kernel::Gaussian { bandwidth } => (-d2 / (2.0 * bandwidth * bandwidth)).exp(),
            Kernel::InverseDistance => {
                if d2 == 0.0 {
                    1.0
                } else {
                    1.0 / d2.sqrt()
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "kernel arguments have dimensions {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(self.from_sq_dist(sq_dist(x, y)))
    }

    /// Stable byte encoding used in artifact hashes and headers.
    pub fn to_bytes(&self) -> Vec<u8> {
        match *self {
            Kernel::Gaussian { bandwidth } => {
                let mut v = vec![1u8];
                v.extend_from_slice(&bandwidth.to_le_bytes());
                v
            }
            Kernel::InverseDistance => vec![2u8],
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kernel::Gaussian { bandwidth } => write!(f, "gaussian:{bandwidth}"),
            Kernel::InverseDistance => write!(f, "invdist"),
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "invdist" || s == "inverse_distance" {
            return Ok(Kernel::InverseDistance);
        }
        let h = s
            .strip_prefix("gaussian:")
            .ok_or_else(|| Error::invalid(format!("unknown kernel {s:?} (gaussian:H | invdist)")))?;
        let h: f64 = h
            .parse()
            .map_err(|_| Error::invalid(format!("bad Gaussian bandwidth {h:?}")))?;
        Kernel::gaussian(h)
    }
}

/// `result[a, b] = k(x[rows[a]], x[cols[b]])`, column-major.
pub fn dense_block(
    kernel: &Kernel,
    points: &PointSet,
    rows: &[usize],
    cols: &[usize],
) -> Result<DenseMatrix> {
    let n = points.len();
    if let Some(&bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
        return Err(Error::invalid(format!("point index {bad} out of range (n={n})")));
    }
    Ok(dense_block_unchecked(kernel, points, rows, cols))
}

pub(crate) fn dense_block_unchecked(
    kernel: &Kernel,
    points: &PointSet,
    rows: &[usize],
    cols: &[usize],
) -> DenseMatrix {
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &c in cols {
        let y = points.point(c);
        for &r in rows {
            data.push(kernel.from_sq_dist(sq_dist(points.point(r), y)));
        }
    }
    DenseMatrix::from_col_major(rows.len(), cols.len(), data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::points::{synth_points, Shape};

    #[test]
    fn gaussian_values() {
        let k = Kernel::gaussian(5.0).unwrap();
        assert_eq!(k.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        let v = k.eval(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn inverse_distance_values() {
        let k = Kernel::InverseDistance;
        assert_eq!(k.eval(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 0.5);
        assert_eq!(k.eval(&[1.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(Kernel::InverseDistance.eval(&[0.0], &[0.0, 1.0]).is_err());
        assert!(Kernel::gaussian(0.0).is_err());
        assert!(Kernel::gaussian(-1.0).is_err());
    }

    #[test]
    fn dense_block_matches_entrywise_loop() {
        let p = synth_points(Shape::UniformRandom { dim: 3 }, 20, 11).unwrap();
        let k = Kernel::gaussian(0.7).unwrap();
        let rows = [3, 17, 0, 9];
        let cols = [5, 5, 12, 1];
        let b = dense_block(&k, &p, &rows, &cols).unwrap();
        for (a, &r) in rows.iter().enumerate() {
            for (c, &col) in cols.iter().enumerate() {
                assert_eq!(b.get(a, c), k.eval(p.point(r), p.point(col)).unwrap());
            }
        }
        assert!(dense_block(&k, &p, &[20], &[0]).is_err());
    }

    #[test]
    fn duplicate_points_give_ones() {
        let p = PointSet::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let b = dense_block(&Kernel::gaussian(5.0).unwrap(), &p, &[0, 1], &[0, 1]).unwrap();
        assert!(b.as_slice().iter().all(|&v| v == 1.0));
        let one = dense_block(&Kernel::InverseDistance, &p, &[1], &[1]).unwrap();
        assert_eq!(one.as_slice(), &[1.0]);
    }

    #[test]
    fn parse_and_display() {
        let k: Kernel = "gaussian:5".parse().unwrap();
        assert_eq!(k, Kernel::Gaussian { bandwidth: 5.0 });
        assert_eq!(k.to_string().parse::<Kernel>().unwrap(), k);
        assert_eq!("invdist".parse::<Kernel>().unwrap(), Kernel::InverseDistance);
        assert!("cauchy".parse::<Kernel>().is_err());
    }
}
