//! Gaussian kernel density estimation on the grid.
//!
//! Agent `i`'s local signal is its own scaled kernel `K_h(x - X_i)` sampled at
//! cell centres; the global estimate is the plain average of those signals,
//! so the two are related exactly, not statistically.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};

/// Constant of the default bandwidth rule `h = c * N^(-1/6)`.
pub const BANDWIDTH_SCALE: f64 = 0.3;

/// `h = 0.3 * N^(-1/6)`, the Scott-type exponent for two dimensions.
pub fn default_bandwidth(n: usize) -> f64 {
    BANDWIDTH_SCALE * (n as f64).powf(-1.0 / 6.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    bandwidth: f64,
    /// Optional truncation radius in units of the bandwidth.
    cutoff: Option<f64>,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            bandwidth,
            cutoff: None,
        })
    }

    /// Kernels are set to zero beyond `radius * h`; useful on large grids.
    pub fn with_cutoff(mut self, radius: f64) -> Self {
        self.cutoff = Some(radius);
        self
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    /// `int K(u)^2 du` for the standard bivariate Gaussian.
    pub fn kernel_square_integral(&self) -> f64 {
        1.0 / (4.0 * PI)
    }

    /// Scaled kernel `h^-2 K((x - c) / h)`.
    pub fn eval(&self, x: [f64; 2], center: [f64; 2]) -> f64 {
        let h = self.bandwidth;
        let r2 = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)) / (h * h);
        if let Some(c) = self.cutoff {
            if r2 > c * c {
                return 0.0;
            }
        }
        (-0.5 * r2).exp() / (2.0 * PI * h * h)
    }
}

/// Noise-level constant `kbar = int K^2 / (N h^2)`.
pub fn kbar_constant(spec: &KernelSpec, n: usize) -> f64 {
    assert!(n >= 1, "kbar needs at least one agent");
    spec.kernel_square_integral() / (n as f64 * spec.bandwidth * spec.bandwidth)
}

/// A grid measurement together with its noise constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub field: DensityField,
    pub kbar: f64,
    pub t: f64,
}

/// Agent `x_i`'s kernel sampled at every cell centre.
pub fn kernel_signal(x_i: [f64; 2], spec: &KernelSpec, grid: &Grid) -> Vec<f64> {
    grid.centers().map(|c| spec.eval(c, x_i)).collect()
}

pub fn kernel_signals(positions: &[[f64; 2]], spec: &KernelSpec, grid: &Grid) -> Vec<Vec<f64>> {
    positions.par_iter().map(|&x| kernel_signal(x, spec, grid)).collect()
}

/// Elementwise mean of per-agent signals, summed in agent order.
pub fn average_signals(signals: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = signals.first().ok_or(Error::EmptyPositions)?;
    let mut sum = vec![0.0; first.len()];
    for s in signals {
        if s.len() != sum.len() {
            return Err(Error::ShapeMismatch {
                expected: sum.len(),
                got: s.len(),
            });
        }
        for (a, b) in sum.iter_mut().zip(s) {
            *a += b;
        }
    }
    let n = signals.len() as f64;
    sum.iter_mut().for_each(|a| *a /= n);
    Ok(sum)
}

/// Builds the global measurement from already-computed agent signals.
pub fn measurement_from_signals(signals: &[Vec<f64>], spec: &KernelSpec, grid: &Grid, t: f64) -> Result<Measurement> {
    let values = average_signals(signals)?;
    Ok(Measurement {
        field: DensityField::new(*grid, values)?,
        kbar: kbar_constant(spec, signals.len()),
        t,
    })
}

/// Kernel density estimate of the positions on the grid.
pub fn kde_estimate(positions: &[[f64; 2]], spec: &KernelSpec, grid: &Grid, t: f64) -> Result<Measurement> {
    if positions.is_empty() {
        return Err(Error::EmptyPositions);
    }
    let signals = kernel_signals(positions, spec, grid);
    measurement_from_signals(&signals, spec, grid, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_positions_rejected() {
        let g = Grid::unit(5, 5).unwrap();
        let spec = KernelSpec::gaussian(0.1).unwrap();
        assert!(matches!(kde_estimate(&[], &spec, &g, 0.0), Err(Error::EmptyPositions)));
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
    }

    #[test]
    fn kbar_scaling() {
        let s = KernelSpec::gaussian(1.0).unwrap();
        assert!((kbar_constant(&s, 1) - 1.0 / (4.0 * PI)).abs() < 1e-15);
        let a = kbar_constant(&KernelSpec::gaussian(0.2).unwrap(), 10);
        let b = kbar_constant(&KernelSpec::gaussian(0.2).unwrap(), 20);
        let c = kbar_constant(&KernelSpec::gaussian(0.1).unwrap(), 10);
        assert!((b - a / 2.0).abs() < 1e-15 * a);
        assert!((c - 4.0 * a).abs() < 1e-12 * c);
    }

    #[test]
    fn single_agent_estimate_is_its_signal() {
        let g = Grid::unit(12, 9).unwrap();
        let s = KernelSpec::gaussian(0.15).unwrap();
        let x = [0.31, 0.62];
        let m = kde_estimate(&[x], &s, &g, 0.0).unwrap();
        assert_eq!(m.field.values(), &kernel_signal(x, &s, &g)[..]);
    }

    #[test]
    fn signal_peaks_at_own_cell() {
        let g = Grid::unit(30, 30).unwrap();
        let s = KernelSpec::gaussian(0.05).unwrap();
        let x = g.center(7, 19);
        let z = kernel_signal(x, &s, &g);
        let argmax = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
        assert_eq!(argmax, g.index(7, 19));
    }

    #[test]
    fn cutoff_zeroes_far_cells() {
        let g = Grid::unit(30, 30).unwrap();
        let s = KernelSpec::gaussian(0.02).unwrap().with_cutoff(6.0);
        let z = kernel_signal([0.1, 0.1], &s, &g);
        assert_eq!(z[g.index(29, 29)], 0.0);
        assert!(z[g.index(3, 3)] > 0.0);
    }
}
