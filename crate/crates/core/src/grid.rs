//! Spatial discretization of the rectangular domain, the finite-volume
//! Fokker-Planck generator with reflecting (zero-flux) walls, and the
//! ground-truth density integrator.
//!
//! Cells are indexed row-major with `x` varying fastest:
//! `index(ix, iy) = iy * nx + ix`. A density is stored as cell-centre values
//! in probability per unit area, so `mass = sum(values) * dx * dy`.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::debug;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Values in `[-CLAMP_TOLERANCE, 0)` are rounding noise and are clamped;
/// anything lower is a scheme failure.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    dx: f64,
    dy: f64,
}

impl Grid {
    /// `bounds` is `[x_min, x_max, y_min, y_max]`.
    pub fn new(nx: usize, ny: usize, bounds: [f64; 4]) -> Result<Self> {
        let [x_min, x_max, y_min, y_max] = bounds;
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "cell counts must be at least 3, got {nx} x {ny}"
            )));
        }
        if !bounds.iter().all(|b| b.is_finite()) || x_max <= x_min || y_max <= y_min {
            return Err(Error::InvalidGrid(format!("degenerate bounds {bounds:?}")));
        }
        Ok(Self {
            nx,
            ny,
            x_min,
            x_max,
            y_min,
            y_max,
            dx: (x_max - x_min) / nx as f64,
            dy: (y_max - y_min) / ny as f64,
        })
    }

    /// Grid over the unit square.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, [0.0, 1.0, 0.0, 1.0])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn bounds(&self) -> [f64; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }

    /// State dimension `nx * ny`.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn domain_area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        iy * self.nx + ix
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.x_min + (ix as f64 + 0.5) * self.dx,
            self.y_min + (iy as f64 + 0.5) * self.dy,
        ]
    }

    /// Cell centres in storage order.
    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(move |k| {
            let (ix, iy) = self.coords(k);
            self.center(ix, iy)
        })
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&x[0]) && (self.y_min..=self.y_max).contains(&x[1])
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.to_string(),
                right: other.to_string(),
            })
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} on [{}, {}]x[{}, {}]",
            self.nx, self.ny, self.x_min, self.x_max, self.y_min, self.y_max
        )
    }
}

/// A grid function holding density values at cell centres.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// The normalized uniform density `1 / |domain|`.
    pub fn uniform(grid: Grid) -> Self {
        Self::constant(grid, 1.0 / grid.domain_area())
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = grid.centers().map(&mut f).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn l2_norm(&self) -> f64 {
        weighted_l2(&self.values, self.grid.cell_area())
    }

    pub fn l2_distance(&self, other: &DensityField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(l2_diff(&self.values, &other.values, self.grid.cell_area()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Writes the field as a plain-text matrix: one line per grid row
    /// (`iy` ascending), space-separated values along `x`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for iy in 0..self.grid.ny {
            let row = &self.values[iy * self.grid.nx..(iy + 1) * self.grid.nx];
            let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path, grid: Grid) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::with_capacity(grid.len());
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })?);
            }
        }
        Self::new(grid, values)
    }
}

pub fn l2_norm(p: &DensityField) -> f64 {
    p.l2_norm()
}

pub fn l2_distance(p: &DensityField, q: &DensityField) -> Result<f64> {
    p.l2_distance(q)
}

pub fn mass(p: &DensityField) -> f64 {
    p.mass()
}

pub(crate) fn weighted_l2(v: &[f64], cell_area: f64) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() * cell_area).sqrt()
}

pub(crate) fn l2_diff(a: &[f64], b: &[f64], cell_area: f64) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * cell_area).sqrt()
}

/// Velocity field `v(x, t)` and scalar noise amplitude `D` of the agent SDE
/// `dX = v dt + D dB`. The density then diffuses with coefficient `D^2 / 2`.
pub trait DriftField: Sync {
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2];

    fn diffusion(&self) -> f64;
}

/// Spatially constant drift; `ConstantDrift::still(d)` is pure diffusion.
#[derive(Clone, Copy, Debug)]
pub struct ConstantDrift {
    pub velocity: [f64; 2],
    pub diffusion: f64,
}

impl ConstantDrift {
    pub fn still(diffusion: f64) -> Self {
        Self {
            velocity: [0.0, 0.0],
            diffusion,
        }
    }
}

impl DriftField for ConstantDrift {
    fn velocity(&self, _x: [f64; 2], _t: f64) -> [f64; 2] {
        self.velocity
    }

    fn diffusion(&self) -> f64 {
        self.diffusion
    }
}

/// Drift given by a closure.
pub struct FnDrift<F> {
    f: F,
    diffusion: f64,
}

impl<F> FnDrift<F>
where
    F: Fn([f64; 2], f64) -> [f64; 2] + Sync,
{
    pub fn new(f: F, diffusion: f64) -> Self {
        Self { f, diffusion }
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn([f64; 2], f64) -> [f64; 2] + Sync,
{
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        (self.f)(x, t)
    }

    fn diffusion(&self) -> f64 {
        self.diffusion
    }
}

/// Discretized generator `A(t)` so that `dp/dt = A p`.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    matrix: CsrMatrix,
    grid: Grid,
    t: f64,
    max_outflow: f64,
}

impl SparseOperator {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Largest forward-Euler step that keeps `I + dt A` nonnegative, which
    /// for this Metzler, column-conservative matrix also makes it an
    /// L1 contraction.
    pub fn stable_dt(&self) -> f64 {
        if self.max_outflow > 0.0 {
            1.0 / self.max_outflow
        } else {
            f64::INFINITY
        }
    }

    /// Number of equal Euler substeps needed to cover `dt` stably.
    pub fn substeps(&self, dt: f64) -> usize {
        let ratio = dt / self.stable_dt();
        // tolerate ratios a hair above an integer from rounding
        (ratio * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    pub fn check_stable(&self, dt: f64) -> Result<()> {
        let stable_dt = self.stable_dt();
        if dt > stable_dt * (1.0 + 1e-12) {
            Err(Error::Unstable {
                what: "Fokker-Planck forward Euler",
                dt,
                stable_dt,
            })
        } else {
            Ok(())
        }
    }

    pub fn max_column_sum(&self) -> f64 {
        self.matrix.column_sums().into_iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// `v <- (I + dt A) v`.
    pub fn euler_in_place(&self, v: &mut [f64], dt: f64, scratch: &mut Vec<f64>) {
        scratch.resize(v.len(), 0.0);
        self.matrix.mul_vec_into(v, scratch);
        for (x, d) in v.iter_mut().zip(scratch.iter()) {
            *x += dt * d;
        }
    }

    /// Covers `dt` with `substeps(dt)` forward-Euler steps of the frozen
    /// operator. Returns the substep count.
    pub fn propagate(&self, v: &mut [f64], dt: f64) -> usize {
        let m = self.substeps(dt);
        let h = dt / m as f64;
        let mut scratch = Vec::with_capacity(v.len());
        for _ in 0..m {
            self.euler_in_place(v, h, &mut scratch);
        }
        m
    }
}

/// Finite-volume assembly of `-div(v p) + (D^2/2) lap p` with first-order
/// upwinding of the drift, central diffusion fluxes and zero total flux on
/// every boundary face. Face velocities are sampled at face midpoints.
pub fn assemble_fp_operator(grid: &Grid, drift: &dyn DriftField, t: f64) -> Result<SparseOperator> {
    let kappa = 0.5 * drift.diffusion() * drift.diffusion();
    let (nx, ny) = (grid.nx, grid.ny);
    let mut triplets = Vec::with_capacity(5 * grid.len());
    let mut outflow = vec![0.0; grid.len()];

    // A face flux from cell `l` to cell `r` is `a_l p_l - a_r p_r`, scaled by
    // 1/width to give the rate of change of a cell average.
    let mut add_face = |l: usize, r: usize, u: f64, width: f64| {
        let a_l = (u.max(0.0) + kappa / width) / width;
        let a_r = ((-u).max(0.0) + kappa / width) / width;
        triplets.push((l, l, -a_l));
        triplets.push((r, l, a_l));
        triplets.push((r, r, -a_r));
        triplets.push((l, r, a_r));
        outflow[l] += a_l;
        outflow[r] += a_r;
    };

    for iy in 0..ny {
        for ix in 0..nx {
            let c = grid.center(ix, iy);
            if ix + 1 < nx {
                let xf = [c[0] + 0.5 * grid.dx, c[1]];
                let u = drift.velocity(xf, t)[0];
                if !u.is_finite() {
                    return Err(Error::NonFiniteDrift { ix, iy, t });
                }
                add_face(grid.index(ix, iy), grid.index(ix + 1, iy), u, grid.dx);
            }
            if iy + 1 < ny {
                let yf = [c[0], c[1] + 0.5 * grid.dy];
                let u = drift.velocity(yf, t)[1];
                if !u.is_finite() {
                    return Err(Error::NonFiniteDrift { ix, iy, t });
                }
                add_face(grid.index(ix, iy), grid.index(ix, iy + 1), u, grid.dy);
            }
        }
    }

    let matrix = CsrMatrix::from_triplets(grid.len(), grid.len(), &triplets);
    let max_outflow = outflow.into_iter().fold(0.0, f64::max);
    Ok(SparseOperator {
        matrix,
        grid: *grid,
        t,
        max_outflow,
    })
}

/// Clamps rounding-level negatives to zero. Returns the number of clamped
/// cells, or an error for genuinely negative values.
pub fn enforce_nonnegative(values: &mut [f64]) -> Result<usize> {
    let mut clamped = 0;
    for (cell, v) in values.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < -CLAMP_TOLERANCE {
                return Err(Error::NegativeDensity { cell, value: *v });
            }
            *v = 0.0;
            clamped += 1;
        }
    }
    if clamped > 0 {
        debug!("clamped {clamped} rounding-level negative density values");
    }
    Ok(clamped)
}

/// One forward-Euler step of the Fokker-Planck equation with `A(t)`.
/// Fails if `dt` is beyond the stability bound.
pub fn step_density(p: &DensityField, drift: &dyn DriftField, t: f64, dt: f64) -> Result<DensityField> {
    let op = assemble_fp_operator(&p.grid, drift, t)?;
    op.check_stable(dt)?;
    let mut out = p.clone();
    let mut scratch = Vec::new();
    op.euler_in_place(&mut out.values, dt, &mut scratch);
    enforce_nonnegative(&mut out.values)?;
    Ok(out)
}

/// Advances `p` by `dt` under a pre-assembled operator, splitting into as
/// many stable substeps as required. Returns the substep count.
pub fn advance_density(p: &mut DensityField, op: &SparseOperator, dt: f64) -> Result<usize> {
    p.grid.check_same(&op.grid)?;
    let m = op.propagate(&mut p.values, dt);
    enforce_nonnegative(&mut p.values)?;
    Ok(m)
}
