//! Named validation scenarios for the `suite` command.

use std::f64::consts::PI;
use std::fmt;

use faer::Mat;

use crate::consensus::{consensus_error, CommGraph, ConsensusState, PiGains};
use crate::error::{Error, Result};
use crate::filter::{FilterLabel, FilterState};
use crate::grid::{assemble_fp_operator, step_density, ConstantDrift, DensityField, Grid};
use crate::kde::{average_signals, kbar_constant, kde_estimate, kernel_signal, kernel_signals, KernelSpec};
use crate::sparse::CsrMatrix;
use crate::swarm::{AgentEnsemble, MixtureDrift, MixturePdf};

pub const SUITE_NAMES: [&str; 5] = ["consensus", "riccati", "kde", "pde", "sde"];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}/{}: {}", self.name, c.name, c.detail)?;
        }
        let verdict = if self.passed() { "passed" } else { "FAILED" };
        write!(f, "suite {} {verdict}", self.name)
    }
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "consensus" => consensus_suite(),
        "riccati" => riccati_suite(),
        "kde" => kde_suite(),
        "pde" => pde_suite(),
        "sde" => sde_suite(),
        other => Err(Error::UnknownSuite(other.to_string())),
    }
}

/// Result of running PI consensus on a ring with static scalar inputs
/// `u_i = i`.
#[derive(Clone, Debug)]
pub struct RingRun {
    /// `max_i |nu_i - mean(u)|` after each step.
    pub max_error: Vec<f64>,
    pub input_spread: f64,
    /// Largest drift of the per-cell sum of `eta` from its initial value.
    pub eta_sum_drift: f64,
}

impl RingRun {
    /// First step after which the error stays below `fraction` of the spread.
    pub fn settling_step(&self, fraction: f64) -> Option<usize> {
        let tol = fraction * self.input_spread;
        let last_bad = self.max_error.iter().rposition(|e| *e >= tol);
        match last_bad {
            None => Some(0),
            Some(k) if k + 1 < self.max_error.len() => Some(k + 1),
            Some(_) => None,
        }
    }
}

pub fn ring_static_consensus(n: usize, gains: PiGains, dt: f64, steps: usize) -> Result<RingRun> {
    let u: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    let mean = (n - 1) as f64 / 2.0;
    let g = CommGraph::ring(n);
    let mut state = ConsensusState::new(&u, gains)?;
    let eta0 = state.eta_cell_sums()[0];
    let mut max_error = Vec::with_capacity(steps);
    let mut eta_sum_drift: f64 = 0.0;
    for _ in 0..steps {
        state.pi_step(&g, &u, dt)?;
        max_error.push((0..n).map(|i| (state.estimate(i)[0] - mean).abs()).fold(0.0, f64::max));
        eta_sum_drift = eta_sum_drift.max((state.eta_cell_sums()[0] - eta0).abs());
    }
    Ok(RingRun {
        max_error,
        input_spread: (n - 1) as f64,
        eta_sum_drift,
    })
}

fn consensus_suite() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("consensus");
    let run = ring_static_consensus(10, PiGains::default(), 0.1, 100_000)?;
    let settled = run.settling_step(0.01);
    r.check(
        "ring-static-convergence",
        settled.is_some(),
        match settled {
            Some(k) => format!("max error below 1% of spread from step {k} on"),
            None => format!("final max error {:e}", run.max_error.last().unwrap()),
        },
    );
    r.check(
        "eta-sum-conservation",
        run.eta_sum_drift <= 1e-9,
        format!("max drift {:e}", run.eta_sum_drift),
    );

    let u = vec![vec![0.5, -1.0]; 4];
    let s = ConsensusState::new(&u, PiGains::default())?;
    let errs = consensus_error(&s, &u, 1.0)?;
    r.check(
        "exact-average-zero-error",
        errs.iter().all(|e| *e == 0.0),
        format!("errors {errs:?}"),
    );
    Ok(r)
}

/// Scalar Riccati `dP/dt = -P^2 / r` integrated by the filter's update with
/// zero dynamics and a vanishing innovation. Returns `(numeric, exact)`.
pub fn scalar_riccati(p0: f64, r: f64, dt: f64, t_end: f64) -> Result<(f64, f64)> {
    let steps = (t_end / dt).round() as usize;
    let mut s = FilterState::new(
        FilterLabel::Centralized,
        vec![0.0],
        Mat::from_fn(1, 1, |_, _| p0),
        vec![r],
        r * 1e-9,
        0.0,
    )?;
    let zero = CsrMatrix::zeros(1, 1);
    for _ in 0..steps {
        s.predict(&zero, 1, dt)?;
        s.correct(&[0.0], dt)?;
    }
    let exact = 1.0 / (1.0 / p0 + steps as f64 * dt / r);
    Ok((s.covariance()[(0, 0)], exact))
}

fn riccati_suite() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("riccati");
    let (num, exact) = scalar_riccati(1.0, 4.0, 1e-3, 1.0)?;
    let err = (num - exact).abs();
    r.check(
        "scalar-closed-form",
        err <= 1e-5,
        format!("P(1) = {num}, exact {exact}, error {err:e}"),
    );

    // static case: trace P strictly decreasing
    let n = 6;
    let p = Mat::<f64>::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else { 0.2 });
    let mut s = FilterState::new(FilterLabel::Centralized, vec![0.0; n], p, vec![0.5; n], 1e-9, 0.0)?;
    let zero = CsrMatrix::zeros(n, n);
    let mut prev = s.trace_p();
    let mut decreasing = true;
    for _ in 0..200 {
        s.predict(&zero, 1, 0.05)?;
        s.correct(&vec![0.0; n], 0.05)?;
        let tr = s.trace_p();
        decreasing &= tr < prev;
        prev = tr;
    }
    r.check("static-trace-decay", decreasing, format!("final trace {prev:e}"));
    Ok(r)
}

fn kde_suite() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("kde");
    let grid = Grid::unit(30, 30)?;
    let spec = KernelSpec::gaussian(0.1)?;

    let ens = AgentEnsemble::uniform(100, 11, grid.bounds())?;
    let m = kde_estimate(ens.positions(), &spec, &grid, 0.0)?;
    let avg = average_signals(&kernel_signals(ens.positions(), &spec, &grid))?;
    let diff = m
        .field
        .values()
        .iter()
        .zip(&avg)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    r.check("average-identity", diff <= 1e-14, format!("max difference {diff:e}"));

    let mass = DensityField::new(grid, kernel_signal([0.5, 0.5], &spec, &grid))?.mass();
    r.check("kernel-mass", (mass - 1.0).abs() <= 1e-3, format!("mass {mass}"));

    // int K^2 by a midpoint rule on [-8, 8]^2 of the unit kernel
    let unit = KernelSpec::gaussian(1.0)?;
    let (steps, half) = (1600, 8.0);
    let w = 2.0 * half / steps as f64;
    let mut quad = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = [-half + (i as f64 + 0.5) * w, -half + (j as f64 + 0.5) * w];
            quad += unit.eval(x, [0.0, 0.0]).powi(2);
        }
    }
    quad *= w * w;
    let kbar = kbar_constant(&unit, 1);
    r.check(
        "kbar-quadrature",
        (kbar - quad).abs() <= 1e-9,
        format!("kbar {kbar}, quadrature {quad}, 1/(4 pi) = {}", 1.0 / (4.0 * PI)),
    );
    Ok(r)
}

fn pde_suite() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("pde");
    let grid = Grid::unit(30, 30)?;

    let mut p = DensityField::uniform(grid);
    let still = ConstantDrift::still(0.03);
    for k in 0..100 {
        p = step_density(&p, &still, k as f64 * 0.1, 0.1)?;
    }
    let dev = p.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    r.check("uniform-steady-state", dev <= 1e-12, format!("max deviation {dev:e}"));

    let drift = MixtureDrift::new(MixturePdf::default(), 0.03);
    let mut p = DensityField::uniform(grid);
    let mut worst_col: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for k in 0..200 {
        let t = k as f64 * 0.1;
        let op = assemble_fp_operator(&grid, &drift, t)?;
        worst_col = worst_col.max(op.max_column_sum());
        crate::grid::advance_density(&mut p, &op, 0.1)?;
        worst_mass = worst_mass.max((p.mass() - 1.0).abs());
    }
    r.check(
        "column-sums",
        worst_col <= 1e-10,
        format!("max |column sum| {worst_col:e}"),
    );
    r.check(
        "mass-conservation",
        worst_mass <= 1e-8,
        format!("max |mass - 1| {worst_mass:e}"),
    );
    let min = p.min_value();
    r.check("nonnegativity", min >= 0.0, format!("min value {min:e}"));
    Ok(r)
}

/// Per-axis sample variance of `n` zero-drift paths started at the domain
/// centre, after time `t_end`.
pub fn brownian_variance(n: usize, diffusion: f64, dt: f64, t_end: f64, seed: u64) -> Result<[f64; 2]> {
    let mut ens = AgentEnsemble::from_positions(vec![[0.5, 0.5]; n], seed, [0.0, 1.0, 0.0, 1.0])?;
    let still = ConstantDrift::still(diffusion);
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        ens.step_sde(&still, dt)?;
    }
    let mut var = [0.0; 2];
    for a in 0..2 {
        let mean = ens.positions().iter().map(|p| p[a]).sum::<f64>() / n as f64;
        var[a] = ens.positions().iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    Ok(var)
}

fn sde_suite() -> Result<SuiteReport> {
    let mut r = SuiteReport::new("sde");
    let d = 0.03;
    let t_end = 10.0;
    let var = brownian_variance(10_000, d, 0.1, t_end, 5)?;
    let expected = d * d * t_end;
    let rel = var.iter().map(|v| (v / expected - 1.0).abs()).fold(0.0, f64::max);
    r.check(
        "brownian-variance",
        rel <= 0.1,
        format!("variance {:?} vs {expected:e}, max relative deviation {rel:.4}", var),
    );

    let mut ens = AgentEnsemble::uniform(500, 2, [0.0, 1.0, 0.0, 1.0])?;
    let drift = MixtureDrift::new(MixturePdf::default(), 0.3);
    let mut inside = true;
    for _ in 0..100 {
        ens.step_sde(&drift, 0.1)?;
        inside &= ens
            .positions()
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
    }
    r.check("containment", inside, "500 agents, 100 steps, D = 0.3".into());
    Ok(r)
}
