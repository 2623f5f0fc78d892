//! End-to-end experiment: swarm, ground truth, KDE, centralized filter,
//! consensus and local filters, with CSV and snapshot output.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use faer::Par;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::consensus::{build_graph, consensus_error, ConsensusState, PiGains, CONSENSUS_CSV_HEADER};
use crate::error::{Error, Result};
use crate::filter::{filter_step_values, gain_distance_warm, init_from_values, noise_floor, FilterLabel, FilterState};
use crate::grid::{advance_density, assemble_fp_operator, l2_diff, DensityField, Grid};
use crate::kde::{
    default_bandwidth, kbar_constant, kernel_signal, kernel_signals, measurement_from_signals, KernelSpec,
};
use crate::swarm::{AgentEnsemble, MixtureDrift, MixturePdf, AGENTS_CSV_HEADER};

pub const METRICS_CSV_HEADER: &str =
    "step,t,label,l2_error_vs_truth,mass,min_value,trace_P,gain_distance_to_centralized";

/// Wall-clock budget for the default experiment.
pub const RUNTIME_BUDGET: Duration = Duration::from_secs(600);

/// Kernel bandwidth: `"auto"` for the default rule or a positive number.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(try_from = "BandwidthRepr")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = String;

    fn try_from(r: BandwidthRepr) -> std::result::Result<Self, String> {
        match r {
            BandwidthRepr::Name(s) if s == "auto" => Ok(Bandwidth::Auto),
            BandwidthRepr::Name(s) => Err(format!("bandwidth must be \"auto\" or a number, got \"{s}\"")),
            BandwidthRepr::Value(h) => Ok(Bandwidth::Fixed(h)),
        }
    }
}

impl Bandwidth {
    pub fn resolve(self, n_agents: usize) -> f64 {
        match self {
            Bandwidth::Auto => default_bandwidth(n_agents),
            Bandwidth::Fixed(h) => h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub agents: usize,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub steps: usize,
    pub diffusion: f64,
    pub comm_radius: f64,
    pub alpha: f64,
    pub kp: f64,
    pub ki: f64,
    pub bandwidth: Bandwidth,
    /// Optional kernel truncation radius in bandwidths.
    pub kernel_cutoff: Option<f64>,
    pub seed: u64,
    /// Number of agents that run a local filter.
    pub local_filters: usize,
    /// Bandwidth of the Gaussian that initializes local filters. When
    /// unset, a local filter starts from the agent's own kernel signal.
    pub local_init_bandwidth: Option<f64>,
    /// Steps between density snapshots, plus one at the final step; 0
    /// disables them.
    pub snapshot_period: usize,
    /// Run consensus and local filters.
    pub distributed: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gains = PiGains::default();
        Self {
            agents: 100,
            nx: 30,
            ny: 30,
            dt: 0.1,
            steps: 2000,
            diffusion: 0.03,
            comm_radius: 0.25,
            alpha: gains.alpha,
            kp: gains.kp,
            ki: gains.ki,
            bandwidth: Bandwidth::Auto,
            kernel_cutoff: None,
            seed: 0,
            local_filters: 8,
            local_init_bandwidth: None,
            snapshot_period: 100,
            distributed: true,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn gains(&self) -> PiGains {
        PiGains {
            alpha: self.alpha,
            kp: self.kp,
            ki: self.ki,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.agents == 0 {
            return bad("agents must be at least 1".into());
        }
        if self.nx < 3 || self.ny < 3 {
            return bad(format!("grid must be at least 3x3, got {}x{}", self.nx, self.ny));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for (name, v) in [
            ("dt", self.dt),
            ("comm_radius", self.comm_radius),
            ("alpha", self.alpha),
            ("kp", self.kp),
            ("ki", self.ki),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return bad(format!("diffusion must be nonnegative, got {}", self.diffusion));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("bandwidth must be positive, got {h}"));
            }
        }
        for (name, v) in [
            ("kernel_cutoff", self.kernel_cutoff),
            ("local_init_bandwidth", self.local_init_bandwidth),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        if self.local_filters > self.agents {
            return bad(format!(
                "local_filters ({}) exceeds agents ({})",
                self.local_filters, self.agents
            ));
        }
        Ok(())
    }
}

/// One metrics row. `trace_p` and `gain_distance` are absent where they do
/// not apply (the raw KDE has no covariance, the centralized filter is the
/// gain reference).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub t: f64,
    pub label: String,
    pub l2_error: f64,
    pub mass: f64,
    pub min_value: f64,
    pub trace_p: Option<f64>,
    pub gain_distance: Option<f64>,
}

impl MetricRow {
    fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.t,
            self.label,
            self.l2_error,
            self.mass,
            self.min_value,
            opt(self.trace_p),
            opt(self.gain_distance)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub bandwidth: f64,
    pub kbar: f64,
    /// Agents that ran a local filter, ascending.
    pub local_agents: Vec<usize>,
    pub rows: Vec<MetricRow>,
    /// Mean consensus error over agents, per step (distributed runs only).
    pub consensus_mean_error: Vec<f64>,
    pub wall_clock: Duration,
    /// Steps at which the communication graph was disconnected.
    pub connectivity_violations: usize,
    pub max_truth_mass_deviation: f64,
    pub max_operator_column_sum: f64,
    /// `max_t max_i ||P_i - P||_F` over local filters.
    pub max_covariance_gap: f64,
    pub message_values: u64,
}

impl RunReport {
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        labels
    }

    /// Error curve of one label, indexed by step.
    pub fn error_curve(&self, label: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| (r.step, r.l2_error))
            .collect()
    }

    /// Mean L2 error over rows with `step > steps / 2`.
    pub fn final_half_mean(&self, label: &str) -> Option<f64> {
        let half = self.config.steps / 2;
        let errs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.label == label && r.step > half)
            .map(|r| r.l2_error)
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }

    pub fn final_error(&self, label: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.label == label).map(|r| r.l2_error)
    }

    pub fn over_budget(&self) -> bool {
        self.wall_clock > RUNTIME_BUDGET
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "agents {}  grid {}x{}  dt {}  steps {}  seed {}",
            c.agents, c.nx, c.ny, c.dt, c.steps, c.seed
        );
        let _ = writeln!(
            s,
            "diffusion {}  comm_radius {}  gains alpha={} kp={} ki={}",
            c.diffusion, c.comm_radius, c.alpha, c.kp, c.ki
        );
        let _ = writeln!(s, "bandwidth {}  kbar {}", self.bandwidth, self.kbar);
        let _ = writeln!(s, "local agents {:?}", self.local_agents);
        let _ = writeln!(s);
        let _ = writeln!(s, "time-averaged L2 error over the final half of the run:");
        for label in self.labels() {
            if let Some(m) = self.final_half_mean(&label) {
                let _ = writeln!(s, "  {label:<14} {m:.6}");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "max |mass(truth) - 1|        {:e}", self.max_truth_mass_deviation);
        let _ = writeln!(s, "max operator column sum      {:e}", self.max_operator_column_sum);
        if c.distributed {
            let _ = writeln!(
                s,
                "connectivity violations      {} of {} steps",
                self.connectivity_violations, c.steps
            );
            let _ = writeln!(s, "max ||P_i - P||_F            {:e}", self.max_covariance_gap);
            let _ = writeln!(s, "consensus scalars exchanged  {}", self.message_values);
        }
        let _ = writeln!(s, "wall clock                   {:.1} s", self.wall_clock.as_secs_f64());
        if self.over_budget() {
            let _ = writeln!(s, "RUNTIME BUDGET EXCEEDED ({} s)", RUNTIME_BUDGET.as_secs());
        }
        s
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    consensus: BufWriter<File>,
    agents: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv", METRICS_CSV_HEADER)?,
            consensus: open("consensus.csv", CONSENSUS_CSV_HEADER)?,
            agents: open("agents.csv", AGENTS_CSV_HEADER)?,
        })
    }

    fn io(&self, e: std::io::Error) -> Error {
        Error::io(&self.dir, e)
    }

    fn snapshot(&self, label: &str, step: usize, grid: Grid, values: &[f64]) -> Result<()> {
        let field = DensityField::new(grid, values.to_vec())?;
        field.write_snapshot(&self.dir.join(format!("density_{label}_{step}.txt")))
    }
}

/// Agents that run local filters, drawn without replacement from the seed.
pub fn choose_local_agents(n_agents: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a stream no agent uses
    rng.set_stream(u64::MAX);
    let mut picked = rand::seq::index::sample(&mut rng, n_agents, count).into_vec();
    picked.sort_unstable();
    picked
}

struct LocalFilter {
    agent: usize,
    state: FilterState,
    warm: Vec<f64>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    // filters run in parallel with each other; keep each one sequential so
    // results do not depend on the thread count
    faer::set_global_parallelism(Par::Seq);
    let started = Instant::now();

    let grid = Grid::unit(cfg.nx, cfg.ny)?;
    let cell_area = grid.cell_area();
    let bounds = grid.bounds();
    let drift = MixtureDrift::new(MixturePdf::default(), cfg.diffusion);
    let h = cfg.bandwidth.resolve(cfg.agents);
    let mut spec = KernelSpec::gaussian(h)?;
    if let Some(c) = cfg.kernel_cutoff {
        spec = spec.with_cutoff(c);
    }
    let kbar = kbar_constant(&spec, cfg.agents);
    let floor = noise_floor(&grid);

    let mut outputs = cfg.output_dir.as_deref().map(Outputs::create).transpose()?;

    let mut ensemble = AgentEnsemble::uniform(cfg.agents, cfg.seed, bounds)?;
    let mut truth = DensityField::uniform(grid);
    let mut signals = kernel_signals(ensemble.positions(), &spec, &grid);
    let mut y = measurement_from_signals(&signals, &spec, &grid, 0.0)?;
    let mut centralized = init_from_values(FilterLabel::Centralized, y.field.values(), kbar, floor, 0.0)?;

    let local_agents = if cfg.distributed {
        choose_local_agents(cfg.agents, cfg.local_filters, cfg.seed)
    } else {
        Vec::new()
    };
    let mut consensus = if cfg.distributed {
        Some(ConsensusState::new(&signals, cfg.gains())?)
    } else {
        None
    };
    let mut locals: Vec<LocalFilter> = local_agents
        .iter()
        .map(|&agent| {
            let y0 = match cfg.local_init_bandwidth {
                Some(b) => kernel_signal(ensemble.positions()[agent], &KernelSpec::gaussian(b)?, &grid),
                None => signals[agent].clone(),
            };
            Ok(LocalFilter {
                agent,
                state: init_from_values(FilterLabel::Agent(agent), &y0, kbar, floor, 0.0)?,
                warm: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;

    let mut report = RunReport {
        config: cfg.clone(),
        bandwidth: h,
        kbar,
        local_agents: local_agents.clone(),
        rows: Vec::with_capacity((cfg.steps + 1) * (2 + locals.len())),
        consensus_mean_error: Vec::new(),
        wall_clock: Duration::ZERO,
        connectivity_violations: 0,
        max_truth_mass_deviation: (truth.mass() - 1.0).abs(),
        max_operator_column_sum: 0.0,
        max_covariance_gap: 0.0,
        message_values: 0,
    };
    let mut last_components = 1;

    for step in 0..=cfg.steps {
        let t = step as f64 * cfg.dt;
        if step > 0 {
            let mut run = || -> Result<()> {
                let t_prev = (step - 1) as f64 * cfg.dt;
                let op = assemble_fp_operator(&grid, &drift, t_prev)?;
                report.max_operator_column_sum = report.max_operator_column_sum.max(op.max_column_sum());
                let substeps = op.substeps(cfg.dt);

                ensemble.step_sde(&drift, cfg.dt)?;
                advance_density(&mut truth, &op, cfg.dt)?;
                report.max_truth_mass_deviation = report.max_truth_mass_deviation.max((truth.mass() - 1.0).abs());

                signals = kernel_signals(ensemble.positions(), &spec, &grid);
                y = measurement_from_signals(&signals, &spec, &grid, t)?;

                if let Some(cs) = consensus.as_mut() {
                    let graph = build_graph(ensemble.positions(), cfg.comm_radius, t);
                    let comps = graph.component_count();
                    if comps > 1 {
                        report.connectivity_violations += 1;
                    }
                    if comps != last_components {
                        if comps > 1 {
                            warn!("t = {t:.1}: communication graph split into {comps} components");
                        } else {
                            info!("t = {t:.1}: communication graph reconnected");
                        }
                        last_components = comps;
                    }
                    let stats = cs.pi_advance(&graph, &signals, cfg.dt)?;
                    report.message_values += stats.message_values;

                    let errors = consensus_error(cs, &signals, cell_area)?;
                    report
                        .consensus_mean_error
                        .push(errors.iter().sum::<f64>() / errors.len() as f64);
                    if let Some(out) = outputs.as_mut() {
                        let connected = u8::from(graph.is_connected());
                        for (i, e) in errors.iter().enumerate() {
                            writeln!(out.consensus, "{step},{t},{i},{e},{},{connected}", graph.degree(i))
                                .map_err(|e| out.io(e))?;
                        }
                    }
                }

                let a = op.matrix();
                let cs = consensus.as_ref();
                let (central_result, local_results) = rayon::join(
                    || filter_step_values(&mut centralized, a, substeps, y.field.values(), kbar, cfg.dt),
                    || {
                        locals
                            .par_iter_mut()
                            .map(|lf| {
                                let yi = cs.expect("local filters need consensus").estimate(lf.agent);
                                filter_step_values(&mut lf.state, a, substeps, yi, kbar, cfg.dt)
                            })
                            .collect::<Vec<_>>()
                    },
                );
                central_result?;
                local_results.into_iter().collect::<Result<()>>()?;
                Ok(())
            };
            run().map_err(|e| e.at_step(step as u64))?;
        }

        // metrics
        let truth_v = truth.values();
        let row = |label: String, v: &[f64], trace_p, gain_distance| MetricRow {
            step,
            t,
            label,
            l2_error: l2_diff(v, truth_v, cell_area),
            mass: v.iter().sum::<f64>() * cell_area,
            min_value: v.iter().copied().fold(f64::INFINITY, f64::min),
            trace_p,
            gain_distance,
        };
        let mut rows = vec![
            row("kde".into(), y.field.values(), None, None),
            row(
                FilterLabel::Centralized.to_string(),
                centralized.estimate(),
                Some(centralized.trace_p()),
                None,
            ),
        ];
        let central = &centralized;
        let local_diag: Vec<(f64, f64)> = locals
            .par_iter_mut()
            .map(|lf| {
                let d = gain_distance_warm(&lf.state, central, &mut lf.warm)?;
                Ok((d, lf.state.covariance_distance(central)?))
            })
            .collect::<Result<_>>()
            .map_err(|e: Error| e.at_step(step as u64))?;
        for (lf, (d, gap)) in locals.iter().zip(local_diag) {
            report.max_covariance_gap = report.max_covariance_gap.max(gap);
            rows.push(row(
                lf.state.label().to_string(),
                lf.state.estimate(),
                Some(lf.state.trace_p()),
                Some(d),
            ));
        }

        if let Some(out) = outputs.as_mut() {
            for r in &rows {
                r.write_csv(&mut out.metrics).map_err(|e| out.io(e))?;
            }
            ensemble.write_csv_rows(&mut out.agents).map_err(|e| out.io(e))?;
            if cfg.snapshot_period > 0 && (step % cfg.snapshot_period == 0 || step == cfg.steps) {
                out.snapshot("truth", step, grid, truth.values())?;
                out.snapshot("kde", step, grid, y.field.values())?;
                out.snapshot("centralized", step, grid, centralized.estimate())?;
                for lf in &locals {
                    out.snapshot(&lf.state.label().to_string(), step, grid, lf.state.estimate())?;
                }
            }
        }
        report.rows.extend(rows);
        if step > 0 && step % 100 == 0 {
            info!("step {step}/{} ({:.1} s)", cfg.steps, started.elapsed().as_secs_f64());
        }
    }

    report.wall_clock = started.elapsed();
    if let Some(mut out) = outputs {
        for w in [&mut out.metrics, &mut out.consensus, &mut out.agents] {
            w.flush().map_err(|e| Error::io(&out.dir, e))?;
        }
        let path = out.dir.join("report.txt");
        fs::write(&path, report.summary()).map_err(|e| Error::io(&path, e))?;
    }
    if report.over_budget() {
        warn!(
            "run took {:.0} s, over the {} s budget",
            report.wall_clock.as_secs_f64(),
            RUNTIME_BUDGET.as_secs()
        );
    }
    Ok(report)
}
