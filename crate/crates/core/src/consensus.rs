//! Proximity communication graph and the proportional-integral dynamic
//! average consensus estimator, run independently on every grid cell.
//!
//! Per agent `i` and cell:
//!
//! ```text
//! nu_i'  = -kp sum_j (nu_i - nu_j) + ki sum_j (eta_i - eta_j) - alpha (nu_i - u_i)
//! eta_i' = -ki sum_j (nu_i - nu_j)
//! ```
//!
//! with the sums over current neighbours. `nu_i` tracks the network average
//! of the inputs `u`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::weighted_l2;
use crate::sparse::CsrMatrix;

/// Undirected proximity graph: `i ~ j` iff `|X_i - X_j| <= radius`.
#[derive(Clone, Debug)]
pub struct CommGraph {
    neighbors: Vec<Vec<usize>>,
    radius: f64,
    t: f64,
    components: usize,
}

impl CommGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Sorted neighbour list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn component_count(&self) -> usize {
        self.components
    }

    pub fn is_connected(&self) -> bool {
        self.components <= 1
    }

    /// Builds a graph from explicit undirected edges (used for fixed
    /// topologies such as rings).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            assert!(i != j, "self-loop at {i}");
            if !neighbors[i].contains(&j) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for ns in &mut neighbors {
            ns.sort_unstable();
        }
        let components = count_components(&neighbors);
        Self {
            neighbors,
            radius: f64::NAN,
            t: 0.0,
            components,
        }
    }

    /// Ring `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).filter(|(i, j)| i != j).collect();
        Self::from_edges(n, &edges)
    }
}

fn count_components(neighbors: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; neighbors.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..neighbors.len() {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &w in &neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    count
}

/// Proximity graph via a uniform cell list with bin width `d`, so only
/// agents in adjacent bins are compared.
pub fn build_graph(positions: &[[f64; 2]], d: f64, t: f64) -> CommGraph {
    assert!(d > 0.0, "communication radius must be positive");
    let bin = |x: f64| (x / d).floor() as i64;
    let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        bins.entry((bin(p[0]), bin(p[1]))).or_default().push(i);
    }
    let d2 = d * d;
    let mut neighbors = vec![Vec::new(); positions.len()];
    for (i, p) in positions.iter().enumerate() {
        let (bx, by) = (bin(p[0]), bin(p[1]));
        for ox in -1..=1 {
            for oy in -1..=1 {
                let Some(members) = bins.get(&(bx + ox, by + oy)) else {
                    continue;
                };
                for &j in members {
                    if j == i {
                        continue;
                    }
                    let q = positions[j];
                    let r2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if r2 <= d2 {
                        neighbors[i].push(j);
                    }
                }
            }
        }
        neighbors[i].sort_unstable();
    }
    let components = count_components(&neighbors);
    CommGraph {
        neighbors,
        radius: d,
        t,
        components,
    }
}

/// Graph Laplacian `Deg - Adj`.
pub fn laplacian(g: &CommGraph) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(g.len() + 2 * g.edge_count());
    for i in 0..g.len() {
        triplets.push((i, i, g.degree(i) as f64));
        for &j in g.neighbors(i) {
            triplets.push((i, j, -1.0));
        }
    }
    CsrMatrix::from_triplets(g.len(), g.len(), &triplets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiGains {
    pub alpha: f64,
    pub kp: f64,
    pub ki: f64,
}

impl Default for PiGains {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            kp: 0.4,
            ki: 0.04,
        }
    }
}

impl PiGains {
    /// Explicit-Euler step bound `2 / (alpha + 2 (kp + ki) deg_max)`;
    /// steps must be strictly below it.
    pub fn safe_dt(&self, max_degree: usize) -> f64 {
        2.0 / (self.alpha + 2.0 * (self.kp + self.ki) * max_degree as f64)
    }
}

/// Counters from one consensus round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundStats {
    pub substeps: usize,
    /// Scalars sent over all links: each directed link carries `nu` and
    /// `eta`, one value per cell, per substep.
    pub message_values: u64,
}

/// Estimator state for all agents, stored row-major (`agent * dim + cell`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusState {
    n_agents: usize,
    dim: usize,
    nu: Vec<f64>,
    eta: Vec<f64>,
    gains: PiGains,
}

impl ConsensusState {
    /// `nu_i(t0) = u_i(t0)`, `eta_i(t0) = 0`.
    pub fn new(inputs: &[Vec<f64>], gains: PiGains) -> Result<Self> {
        let dim = inputs.first().ok_or(Error::EmptyPositions)?.len();
        let mut nu = Vec::with_capacity(inputs.len() * dim);
        for u in inputs {
            if u.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: dim,
                    got: u.len(),
                });
            }
            nu.extend_from_slice(u);
        }
        Ok(Self {
            n_agents: inputs.len(),
            dim,
            eta: vec![0.0; nu.len()],
            nu,
            gains,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gains(&self) -> PiGains {
        self.gains
    }

    /// Agent `i`'s current estimate of the average input.
    pub fn estimate(&self, i: usize) -> &[f64] {
        &self.nu[i * self.dim..(i + 1) * self.dim]
    }

    pub fn internal(&self, i: usize) -> &[f64] {
        &self.eta[i * self.dim..(i + 1) * self.dim]
    }

    /// `sum_i eta_i` per cell; invariant under the dynamics.
    pub fn eta_cell_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for row in self.eta.chunks(self.dim) {
            for (s, e) in sums.iter_mut().zip(row) {
                *s += e;
            }
        }
        sums
    }

    fn check_inputs(&self, g: &CommGraph, u: &[Vec<f64>]) -> Result<()> {
        if g.len() != self.n_agents {
            return Err(Error::ShapeMismatch {
                expected: self.n_agents,
                got: g.len(),
            });
        }
        if u.len() != self.n_agents {
            return Err(Error::ShapeMismatch {
                expected: self.n_agents,
                got: u.len(),
            });
        }
        if let Some(bad) = u.iter().find(|ui| ui.len() != self.dim) {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                got: bad.len(),
            });
        }
        Ok(())
    }

    /// One synchronous forward-Euler round. Fails when `dt` is not below
    /// [`PiGains::safe_dt`] for the graph's maximum degree.
    pub fn pi_step(&mut self, g: &CommGraph, u: &[Vec<f64>], dt: f64) -> Result<RoundStats> {
        self.check_inputs(g, u)?;
        let stable_dt = self.gains.safe_dt(g.max_degree());
        if !(dt > 0.0 && dt < stable_dt) {
            return Err(Error::Unstable {
                what: "PI consensus forward Euler",
                dt,
                stable_dt,
            });
        }
        self.euler_round(g, u, dt);
        Ok(RoundStats {
            substeps: 1,
            message_values: 2 * self.dim as u64 * 2 * g.edge_count() as u64,
        })
    }

    /// Covers `dt` with the fewest equal rounds that satisfy the stability
    /// bound, holding `u` and the graph fixed.
    pub fn pi_advance(&mut self, g: &CommGraph, u: &[Vec<f64>], dt: f64) -> Result<RoundStats> {
        let stable_dt = self.gains.safe_dt(g.max_degree());
        let mut m = (dt / stable_dt).ceil().max(1.0) as usize;
        if dt / m as f64 >= stable_dt {
            m += 1;
        }
        let h = dt / m as f64;
        let mut stats = RoundStats::default();
        for _ in 0..m {
            let s = self.pi_step(g, u, h)?;
            stats.substeps += s.substeps;
            stats.message_values += s.message_values;
        }
        Ok(stats)
    }

    fn euler_round(&mut self, g: &CommGraph, u: &[Vec<f64>], dt: f64) {
        let PiGains { alpha, kp, ki } = self.gains;
        let dim = self.dim;
        let mut nu_next = self.nu.clone();
        let mut eta_next = self.eta.clone();
        let mut lap_nu = vec![0.0; dim];
        let mut lap_eta = vec![0.0; dim];
        for i in 0..self.n_agents {
            let nu_i = &self.nu[i * dim..(i + 1) * dim];
            let eta_i = &self.eta[i * dim..(i + 1) * dim];
            lap_nu.iter_mut().for_each(|x| *x = 0.0);
            lap_eta.iter_mut().for_each(|x| *x = 0.0);
            for &j in g.neighbors(i) {
                let nu_j = &self.nu[j * dim..(j + 1) * dim];
                let eta_j = &self.eta[j * dim..(j + 1) * dim];
                for k in 0..dim {
                    lap_nu[k] += nu_i[k] - nu_j[k];
                    lap_eta[k] += eta_i[k] - eta_j[k];
                }
            }
            let u_i = &u[i];
            let nu_out = &mut nu_next[i * dim..(i + 1) * dim];
            let eta_out = &mut eta_next[i * dim..(i + 1) * dim];
            for k in 0..dim {
                nu_out[k] += dt * (-kp * lap_nu[k] + ki * lap_eta[k] - alpha * (nu_i[k] - u_i[k]));
                eta_out[k] -= dt * ki * lap_nu[k];
            }
        }
        self.nu = nu_next;
        self.eta = eta_next;
    }
}

/// Per-agent weighted L2 norm of `nu_i - mean(u)`.
pub fn consensus_error(state: &ConsensusState, u: &[Vec<f64>], cell_area: f64) -> Result<Vec<f64>> {
    if u.len() != state.n_agents {
        return Err(Error::ShapeMismatch {
            expected: state.n_agents,
            got: u.len(),
        });
    }
    let avg = crate::kde::average_signals(u)?;
    Ok((0..state.n_agents)
        .map(|i| {
            let diff: Vec<f64> = state.estimate(i).iter().zip(&avg).map(|(a, b)| a - b).collect();
            weighted_l2(&diff, cell_area)
        })
        .collect())
}

pub const CONSENSUS_CSV_HEADER: &str = "step,t,agent_id,consensus_l2_error,degree,connected";
