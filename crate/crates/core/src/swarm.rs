//! Agent-level simulation: the spinning two-component Gaussian mixture that
//! shapes the drift, and an Euler-Maruyama ensemble with reflecting walls.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::DriftField;

/// Equal-weight mixture of two isotropic Gaussians whose means rotate about
/// `center` at `angular_rate` rad/s, half a turn apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixturePdf {
    pub center: [f64; 2],
    pub radius: f64,
    pub angular_rate: f64,
    /// Per-axis variance shared by both components.
    pub variance: f64,
}

impl Default for MixturePdf {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5],
            radius: 0.3,
            angular_rate: 0.04,
            variance: 0.02,
        }
    }
}

impl MixturePdf {
    pub fn means(&self, t: f64) -> [[f64; 2]; 2] {
        let theta = self.angular_rate * t;
        let mean = |phase: f64| {
            [
                self.center[0] + self.radius * (theta + phase).cos(),
                self.center[1] + self.radius * (theta + phase).sin(),
            ]
        };
        [mean(0.0), mean(PI)]
    }

    fn exponents(&self, x: [f64; 2], t: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let means = self.means(t);
        let mut e = [0.0; 2];
        for (k, mu) in means.iter().enumerate() {
            let d2 = (x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2);
            e[k] = -0.5 * d2 / self.variance;
        }
        (e, means)
    }

    pub fn pdf(&self, x: [f64; 2], t: f64) -> f64 {
        let (e, _) = self.exponents(x, t);
        let norm = 1.0 / (2.0 * PI * self.variance);
        0.5 * norm * (e[0].exp() + e[1].exp())
    }

    /// Analytic `grad log f`, evaluated with the larger exponent factored
    /// out so far tails stay finite.
    pub fn grad_log(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let (e, means) = self.exponents(x, t);
        let m = e[0].max(e[1]);
        let w = [(e[0] - m).exp(), (e[1] - m).exp()];
        let total = w[0] + w[1];
        let mut g = [0.0; 2];
        for (wk, mu) in w.iter().zip(&means) {
            for a in 0..2 {
                g[a] -= wk / total * (x[a] - mu[a]) / self.variance;
            }
        }
        g
    }
}

/// `v(x, t) = D grad log f(x, t)` with noise amplitude `D`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureDrift {
    pub mixture: MixturePdf,
    pub diffusion: f64,
}

impl MixtureDrift {
    pub fn new(mixture: MixturePdf, diffusion: f64) -> Self {
        Self { mixture, diffusion }
    }
}

impl DriftField for MixtureDrift {
    fn velocity(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let g = self.mixture.grad_log(x, t);
        [self.diffusion * g[0], self.diffusion * g[1]]
    }

    fn diffusion(&self) -> f64 {
        self.diffusion
    }
}

/// Folds `x` back into `[lo, hi]` by repeated specular reflection.
pub fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if x < lo || x > hi {
        // reduce to one period of the reflected sawtooth
        let period = 2.0 * width;
        let mut r = (x - lo).rem_euclid(period);
        if r > width {
            r = period - r;
        }
        x = lo + r;
    }
    x.clamp(lo, hi)
}

/// N agents with one ChaCha stream each. Stream `i` of the master seed
/// drives agent `i`, so trajectories do not depend on iteration order.
#[derive(Clone, Debug)]
pub struct AgentEnsemble {
    positions: Vec<[f64; 2]>,
    streams: Vec<ChaCha8Rng>,
    bounds: [f64; 4],
    t: f64,
    step: u64,
}

fn agent_stream(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng
}

impl AgentEnsemble {
    /// Agents drawn uniformly over `bounds = [x_min, x_max, y_min, y_max]`.
    pub fn uniform(n: usize, seed: u64, bounds: [f64; 4]) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyPositions);
        }
        let mut streams: Vec<ChaCha8Rng> = (0..n).map(|i| agent_stream(seed, i)).collect();
        let positions = streams
            .iter_mut()
            .map(|rng| {
                [
                    rng.random_range(bounds[0]..bounds[1]),
                    rng.random_range(bounds[2]..bounds[3]),
                ]
            })
            .collect();
        Ok(Self {
            positions,
            streams,
            bounds,
            t: 0.0,
            step: 0,
        })
    }

    pub fn from_positions(positions: Vec<[f64; 2]>, seed: u64, bounds: [f64; 4]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyPositions);
        }
        let streams = (0..positions.len()).map(|i| agent_stream(seed, i)).collect();
        Ok(Self {
            positions,
            streams,
            bounds,
            t: 0.0,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Euler-Maruyama: `X <- X + v(X, t) dt + D sqrt(dt) xi`, then reflection
    /// into the domain.
    pub fn step_sde(&mut self, drift: &dyn DriftField, dt: f64) -> Result<()> {
        assert!(dt > 0.0, "dt must be positive");
        let t = self.t;
        let noise = drift.diffusion() * dt.sqrt();
        let [x0, x1, y0, y1] = self.bounds;
        let step = self.step;
        self.positions
            .par_iter_mut()
            .zip(self.streams.par_iter_mut())
            .enumerate()
            .try_for_each(|(agent, (x, rng))| {
                let v = drift.velocity(*x, t);
                let xi: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let nx = x[0] + v[0] * dt + noise * xi[0];
                let ny = x[1] + v[1] * dt + noise * xi[1];
                if !nx.is_finite() || !ny.is_finite() {
                    return Err(Error::NonFinitePosition { agent, step: step + 1 });
                }
                *x = [reflect(nx, x0, x1), reflect(ny, y0, y1)];
                Ok(())
            })?;
        self.t += dt;
        self.step += 1;
        Ok(())
    }

    /// Appends `step,t,agent_id,x,y` rows.
    pub fn write_csv_rows(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (i, p) in self.positions.iter().enumerate() {
            writeln!(w, "{},{},{},{},{}", self.step, self.t, i, p[0], p[1])?;
        }
        Ok(())
    }
}

pub const AGENTS_CSV_HEADER: &str = "step,t,agent_id,x,y";
