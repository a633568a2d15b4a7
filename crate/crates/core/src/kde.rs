//! Kernel density estimation baselines with Gaussian and uniform kernels.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Matrix, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Gaussian,
    /// Indicator of the box `[-h, h]^D`, normalised by `(2h)^D`.
    Uniform,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Kernel::Gaussian),
            "uniform" => Ok(Kernel::Uniform),
            other => Err(Error::Parse(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Bandwidth {
    /// `n^{-1/(D+4)} · σ̂`, with `σ̂` the root mean per-coordinate sample variance.
    #[default]
    Scott,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    data: Matrix,
    bandwidth: f64,
    kernel: Kernel,
}

/// Root of the mean unbiased per-coordinate variance.
pub fn pooled_std(data: &Matrix) -> f64 {
    let (n, d) = (data.rows(), data.cols());
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| data[(r, c)]).sum::<f64>() / n as f64;
        total += (0..n).map(|r| (data[(r, c)] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    (total / d as f64).sqrt()
}

pub fn scott_bandwidth(data: &Matrix) -> f64 {
    let (n, d) = (data.rows() as f64, data.cols() as f64);
    n.powf(-1.0 / (d + 4.0)) * pooled_std(data)
}

impl KdeModel {
    pub fn fit(data: &Matrix, kernel: Kernel, bandwidth: Bandwidth) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let h = match bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Scott => {
                if data.rows() < 2 {
                    return Err(Error::InvalidSize(
                        "automatic bandwidth needs at least two points".into(),
                    ));
                }
                scott_bandwidth(data)
            }
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self {
            data: data.clone(),
            bandwidth: h,
            kernel,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// `(1/n) Σ_i K_h(x - X_i)`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let h = self.bandwidth;
        let d = x.len() as f64;
        let n = self.data.rows() as f64;
        Ok(match self.kernel {
            Kernel::Gaussian => {
                let log_norm = -0.5 * d * LN_2PI - d * h.ln();
                let total: f64 = self
                    .data
                    .row_iter()
                    .map(|xi| {
                        let r2: f64 = xi.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                        (log_norm - 0.5 * r2 / (h * h)).exp()
                    })
                    .sum();
                total / n
            }
            Kernel::Uniform => {
                let inside = self
                    .data
                    .row_iter()
                    .filter(|xi| xi.iter().zip(x).all(|(a, b)| (a - b).abs() <= h))
                    .count();
                inside as f64 / (n * (2.0 * h).powf(d))
            }
        })
    }

    /// Pick a datum uniformly and add kernel noise.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix> {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            let i = rng.below(self.data.rows());
            let row = out.row_mut(r);
            row.copy_from_slice(self.data.row(i));
            for v in row.iter_mut() {
                *v += match self.kernel {
                    Kernel::Gaussian => self.bandwidth * rng.normal(),
                    Kernel::Uniform => rng.uniform_range(-self.bandwidth, self.bandwidth),
                };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_moments;

    fn column(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn explicit_bandwidth_is_kept() {
        let m = KdeModel::fit(&column(&[0.0, 1.0]), Kernel::Gaussian, Bandwidth::Fixed(0.5)).unwrap();
        assert_eq!(m.bandwidth(), 0.5);
        assert!(KdeModel::fit(&column(&[0.0]), Kernel::Gaussian, Bandwidth::Fixed(-1.0)).is_err());
        assert!(matches!(
            KdeModel::fit(&Matrix::zeros(0, 1), Kernel::Gaussian, Bandwidth::Scott),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn scott_rule_for_unit_std() {
        // 100 points with unbiased std exactly 1
        let mut rng = Rng::new(1);
        let mut v: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let mean = v.iter().sum::<f64>() / 100.0;
        v.iter_mut().for_each(|x| *x -= mean);
        let s = (v.iter().map(|x| x * x).sum::<f64>() / 99.0).sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        let h = KdeModel::fit(&column(&v), Kernel::Gaussian, Bandwidth::Scott)
            .unwrap()
            .bandwidth();
        assert!((h - 100f64.powf(-0.2)).abs() < 1e-12);
        assert!((h - 0.3981).abs() < 1e-4);
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let h2 = KdeModel::fit(&column(&doubled), Kernel::Gaussian, Bandwidth::Scott)
            .unwrap()
            .bandwidth();
        assert!((h2 - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn single_datum_gaussian_density() {
        let m = KdeModel::fit(
            &Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap(),
            Kernel::Gaussian,
            Bandwidth::Fixed(0.7),
        )
        .unwrap();
        let x = [0.1, 0.2];
        let r2 = 0.4f64.powi(2) + 1.2f64.powi(2);
        let expected = (-0.5 * r2 / 0.49).exp() / (2.0 * std::f64::consts::PI * 0.49);
        assert!((m.density(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn uniform_outside_boxes_is_zero() {
        let m = KdeModel::fit(&column(&[0.0, 1.0]), Kernel::Uniform, Bandwidth::Fixed(0.2)).unwrap();
        assert_eq!(m.density(&[0.5]).unwrap(), 0.0);
        assert!((m.density(&[0.1]).unwrap() - 0.5 / 0.4).abs() < 1e-15);
    }

    #[test]
    fn densities_integrate_to_one() {
        let mut rng = Rng::new(2);
        let data = column(&(0..50).map(|_| rng.normal()).collect::<Vec<_>>());
        for kernel in [Kernel::Gaussian, Kernel::Uniform] {
            let m = KdeModel::fit(&data, kernel, Bandwidth::Scott).unwrap();
            let h = m.bandwidth();
            let lo = data.as_slice().iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * h;
            let hi = data.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * h;
            let cells = 200_000;
            let dx = (hi - lo) / cells as f64;
            let total: f64 = (0..cells)
                .map(|i| m.density(&[lo + dx * (i as f64 + 0.5)]).unwrap() * dx)
                .sum();
            assert!((total - 1.0).abs() < 1e-3, "{kernel:?}: {total}");
        }
    }

    #[test]
    fn tiny_bandwidth_resamples_data() {
        let data = column(&[1.0, 2.0, 3.0]);
        let m = KdeModel::fit(&data, Kernel::Uniform, Bandwidth::Fixed(1e-12)).unwrap();
        let s = m.sample(100, &mut Rng::new(3)).unwrap();
        for v in s.as_slice() {
            assert!([1.0, 2.0, 3.0].iter().any(|d| (d - v).abs() < 1e-11));
        }
    }

    #[test]
    fn single_origin_datum_gives_standard_normal() {
        let m = KdeModel::fit(&Matrix::zeros(1, 2), Kernel::Gaussian, Bandwidth::Fixed(1.0)).unwrap();
        let s = m.sample(50_000, &mut Rng::new(4)).unwrap();
        let (mean, cov) = sample_moments(&s);
        assert!(mean.iter().all(|v| v.abs() < 0.02));
        assert!((cov[(0, 0)] - 1.0).abs() < 0.03 && (cov[(1, 1)] - 1.0).abs() < 0.03);
        assert_eq!(s, m.sample(50_000, &mut Rng::new(4)).unwrap());
    }
}
