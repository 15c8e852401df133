//! Principal–follower gridworld.
//!
//! The principal proposes one of four moves. A follower, who sees a perturbed
//! copy of the grid, either accepts (no-op) or overrides it with its own move.
//! The follower responds to the principal's policy with a Boltzmann softmax
//! over its optimal Q-function, which makes the principal's dynamics and
//! rewards depend on the deployed policy.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PerformativeEnv;
use crate::error::{PepgError, Result};
use crate::mdp::{StochasticPolicy, TabularTables};
use crate::policy::{softmax, softmax_row, PolicyParams};

/// Principal actions: up, down, left, right.
pub const N_MOVES: usize = 4;
/// Follower actions: no-op followed by the four moves.
pub const N_FOLLOWER_ACTIONS: usize = 5;
pub const NOOP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Blank,
    Start,
    Goal,
    Hazard,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::Blank, Cell::Start, Cell::Goal, Cell::Hazard];

    pub fn from_char(c: char) -> Option<Cell> {
        match c {
            '.' => Some(Cell::Blank),
            'S' => Some(Cell::Start),
            'G' => Some(Cell::Goal),
            'H' => Some(Cell::Hazard),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            Cell::Blank => '.',
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Hazard => 'H',
        }
    }
}

/// Default 8×8 map.
pub const DEFAULT_LAYOUT: &str = "\
S.......
........
...H....
.....H..
...H....
.HH...H.
.H..H.H.
...H...G";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridworldConfig {
    /// Rows of `.`, `S`, `G`, `H`.
    pub layout: Vec<String>,
    pub gamma: f64,
    pub cost_blank: f64,
    pub cost_goal: f64,
    pub cost_hazard: f64,
    pub cost_intervention: f64,
    pub n_followers: usize,
    /// Probability that a follower sees a cell's true type.
    pub match_prob: f64,
    /// Boltzmann inverse temperature of the follower response.
    pub beta_b: f64,
    pub perturbation_seed: u64,
    pub vi_tol: f64,
    pub vi_max_iter: usize,
}

impl Default for GridworldConfig {
    fn default() -> Self {
        GridworldConfig {
            layout: DEFAULT_LAYOUT.lines().map(str::to_owned).collect(),
            gamma: 0.9,
            cost_blank: -0.01,
            cost_goal: -0.02,
            cost_hazard: -0.5,
            cost_intervention: -0.05,
            n_followers: 1,
            match_prob: 0.7,
            beta_b: 200.0,
            perturbation_seed: 0,
            vi_tol: 1e-8,
            vi_max_iter: 100_000,
        }
    }
}

impl GridworldConfig {
    /// Parses a layout: one character per cell, rows separated by newlines.
    pub fn parse_layout(text: &str) -> Result<Vec<String>> {
        let rows: Vec<String> =
            text.lines().map(|l| l.trim_end_matches('\r').to_owned()).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(PepgError::config("layout", "empty grid"));
        }
        for (i, row) in rows.iter().enumerate() {
            if let Some(c) = row.chars().find(|c| Cell::from_char(*c).is_none()) {
                return Err(PepgError::config("layout", format!("row {i}: unknown cell `{c}`")));
            }
        }
        Ok(rows)
    }

    pub fn load_layout(path: &Path) -> Result<Vec<String>> {
        Self::parse_layout(&std::fs::read_to_string(path)?)
    }

    pub fn cells(&self) -> Result<(usize, usize, Vec<Cell>)> {
        let rows = self.layout.len();
        let cols = self.layout.first().map(|r| r.chars().count()).unwrap_or(0);
        if rows == 0 || cols == 0 {
            return Err(PepgError::config("layout", "empty grid"));
        }
        let mut cells = Vec::with_capacity(rows * cols);
        for (i, row) in self.layout.iter().enumerate() {
            if row.chars().count() != cols {
                return Err(PepgError::config("layout", format!("row {i} has a different width")));
            }
            for c in row.chars() {
                cells.push(Cell::from_char(c).ok_or_else(|| PepgError::config("layout", format!("unknown cell `{c}`")))?);
            }
        }
        Ok((rows, cols, cells))
    }

    pub fn validate(&self) -> Result<()> {
        let (_, _, cells) = self.cells()?;
        if cells.iter().filter(|c| **c == Cell::Goal).count() != 1 {
            return Err(PepgError::config("layout", "needs exactly one goal cell"));
        }
        if !cells.contains(&Cell::Start) {
            return Err(PepgError::config("layout", "needs at least one start cell"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PepgError::config("gamma", "must lie in (0, 1)"));
        }
        if self.n_followers == 0 {
            return Err(PepgError::config("n_followers", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.match_prob) {
            return Err(PepgError::config("match_prob", "must lie in [0, 1]"));
        }
        if !(self.beta_b >= 0.0 && self.beta_b.is_finite()) {
            return Err(PepgError::config("beta_b", "must be finite and non-negative"));
        }
        if !(self.vi_tol > 0.0) || self.vi_max_iter == 0 {
            return Err(PepgError::config("vi_tol", "value-iteration tolerance and cap must be positive"));
        }
        for (k, v) in [
            ("cost_blank", self.cost_blank),
            ("cost_goal", self.cost_goal),
            ("cost_hazard", self.cost_hazard),
            ("cost_intervention", self.cost_intervention),
        ] {
            if !v.is_finite() {
                return Err(PepgError::config(k, "must be finite"));
            }
        }
        Ok(())
    }

    pub fn cost(&self, cell: Cell) -> f64 {
        match cell {
            Cell::Blank | Cell::Start => self.cost_blank,
            Cell::Goal => self.cost_goal,
            Cell::Hazard => self.cost_hazard,
        }
    }
}

/// Follower `j`'s optimal Q-function and the quantities needed to differentiate it.
#[derive(Clone)]
struct FollowerSolution {
    q: Vec<f64>,
    v: Vec<f64>,
    greedy: Vec<usize>,
    lu_t: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Collective follower response to a principal policy.
#[derive(Clone)]
pub struct FollowerResponse {
    /// Averaged optimal Q-function `[s][x]`.
    pub q_bar: Vec<f64>,
    /// Boltzmann response `π2(x|s)`.
    pub pi2: Vec<f64>,
    followers: Vec<FollowerSolution>,
}

impl fmt::Debug for FollowerResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FollowerResponse").field("q_bar", &self.q_bar).field("pi2", &self.pi2).finish()
    }
}

#[derive(Debug, Clone)]
pub struct GridworldEnv {
    pub config: GridworldConfig,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
    pub goal: usize,
    /// Destination of each move from each cell, `[s][m]`.
    dest: Vec<[usize; N_MOVES]>,
    /// Perceived cost of entering each cell, per follower.
    perceived_costs: Vec<Vec<f64>>,
    rho: Vec<f64>,
    r_max: f64,
}

impl GridworldEnv {
    pub fn new(config: GridworldConfig) -> Result<Self> {
        config.validate()?;
        let (rows, cols, cells) = config.cells()?;
        let n = rows * cols;
        let goal = cells.iter().position(|c| *c == Cell::Goal).expect("validated");
        let dest = (0..n)
            .map(|s| {
                let (r, c) = (s / cols, s % cols);
                [
                    r.saturating_sub(1) * cols + c,
                    (r + 1).min(rows - 1) * cols + c,
                    r * cols + c.saturating_sub(1),
                    r * cols + (c + 1).min(cols - 1),
                ]
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.perturbation_seed);
        let perceived_costs = (0..config.n_followers)
            .map(|_| {
                cells
                    .iter()
                    .map(|&cell| {
                        let keep = rng.random::<f64>() < config.match_prob;
                        let other = Cell::ALL[rng.random_range(0..Cell::ALL.len())];
                        config.cost(if keep { cell } else { other })
                    })
                    .collect()
            })
            .collect();
        let n_start = cells.iter().filter(|c| **c == Cell::Start).count() as f64;
        let rho = cells.iter().map(|c| if *c == Cell::Start { 1.0 / n_start } else { 0.0 }).collect();
        let worst = [config.cost_blank, config.cost_goal, config.cost_hazard].iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let r_max = worst + config.cost_intervention.abs();
        Ok(GridworldEnv { config, rows, cols, cells, goal, dest, perceived_costs, rho, r_max })
    }

    /// Same grid with a fresh perturbation draw.
    pub fn with_perturbation_seed(&self, seed: u64) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.perturbation_seed = seed;
        GridworldEnv::new(cfg)
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn destination(&self, s: usize, m: usize) -> usize {
        self.dest[s][m]
    }

    /// Move actually executed when the principal proposes `a` and the follower plays `x`.
    #[inline]
    pub fn effective_move(a: usize, x: usize) -> usize {
        if x == NOOP {
            a
        } else {
            x - 1
        }
    }

    pub fn true_cost(&self, s: usize) -> f64 {
        self.config.cost(self.cells[s])
    }

    /// Raw grid MDP where the follower never intervenes.
    pub fn raw_tables(&self) -> TabularTables {
        let mut pi2 = vec![0.0; self.n_cells() * N_FOLLOWER_ACTIONS];
        for s in 0..self.n_cells() {
            pi2[s * N_FOLLOWER_ACTIONS + NOOP] = 1.0;
        }
        self.tables_from_response(&pi2)
    }

    /// Induced principal tables for a given follower response `π2`.
    pub fn tables_from_response(&self, pi2: &[f64]) -> TabularTables {
        let n = self.n_cells();
        let mut transition = vec![0.0; n * N_MOVES * n];
        let mut reward = vec![0.0; n * N_MOVES];
        for s in 0..n {
            for a in 0..N_MOVES {
                let base = (s * N_MOVES + a) * n;
                if s == self.goal {
                    transition[base + s] = 1.0;
                    continue;
                }
                let mut r = 0.0;
                for x in 0..N_FOLLOWER_ACTIONS {
                    let w = pi2[s * N_FOLLOWER_ACTIONS + x];
                    let d = self.dest[s][Self::effective_move(a, x)];
                    transition[base + d] += w;
                    let c_int = if x == NOOP { 0.0 } else { self.config.cost_intervention };
                    r += w * (self.true_cost(d) + c_int);
                }
                reward[s * N_MOVES + a] = r;
            }
        }
        TabularTables { n_states: n, n_actions: N_MOVES, transition, reward }
    }

    /// Follower rewards and transitions for action `x` at `s`: `(R_x(s), [(s', p)])`.
    fn follower_step(&self, j: usize, pi1: &StochasticPolicy, s: usize, x: usize, out: &mut Vec<(usize, f64)>) -> f64 {
        out.clear();
        let costs = &self.perceived_costs[j];
        if x == NOOP {
            let mut r = 0.0;
            for a in 0..N_MOVES {
                let p = pi1.pi(s, a);
                let d = self.dest[s][a];
                r += p * costs[d];
                out.push((d, p));
            }
            r
        } else {
            let d = self.dest[s][x - 1];
            out.push((d, 1.0));
            costs[d] + self.config.cost_intervention
        }
    }

    fn solve_follower(&self, j: usize, pi1: &StochasticPolicy) -> Result<FollowerSolution> {
        let n = self.n_cells();
        let nx = N_FOLLOWER_ACTIONS;
        let gamma = self.config.gamma;
        let mut rew = vec![0.0; n * nx];
        let mut trans: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n * nx];
        let mut buf = Vec::new();
        for s in 0..n {
            if s == self.goal {
                continue;
            }
            for x in 0..nx {
                rew[s * nx + x] = self.follower_step(j, pi1, s, x, &mut buf);
                trans[s * nx + x] = buf.clone();
            }
        }
        let q_of = |v: &[f64], s: usize, x: usize| -> f64 {
            rew[s * nx + x] + gamma * trans[s * nx + x].iter().map(|(d, p)| p * v[*d]).sum::<f64>()
        };

        let mut v = vec![0.0; n];
        let mut converged = false;
        for _ in 0..self.config.vi_max_iter {
            let mut delta = 0.0f64;
            let mut next = vec![0.0; n];
            for s in 0..n {
                if s == self.goal {
                    continue;
                }
                let best = (0..nx).map(|x| q_of(&v, s, x)).fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                next[s] = best;
            }
            v = next;
            if delta <= self.config.vi_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(PepgError::NoConvergence(format!(
                "follower value iteration exceeded {} sweeps",
                self.config.vi_max_iter
            )));
        }

        // Exact policy-iteration polish so that Q is the exact fixed point.
        let greedy_of = |v: &[f64], prev: Option<&[usize]>| -> Vec<usize> {
            (0..n)
                .map(|s| {
                    if s == self.goal {
                        return NOOP;
                    }
                    let qs: Vec<f64> = (0..nx).map(|x| q_of(v, s, x)).collect();
                    let mut best = 0;
                    for x in 1..nx {
                        if qs[x] > qs[best] {
                            best = x;
                        }
                    }
                    match prev {
                        Some(p) if qs[p[s]] >= qs[best] - 1e-13 => p[s],
                        _ => best,
                    }
                })
                .collect()
        };
        let mut greedy = greedy_of(&v, None);
        let mut m = DMatrix::<f64>::identity(n, n);
        for _ in 0..100 {
            m = DMatrix::<f64>::identity(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for s in 0..n {
                if s == self.goal {
                    continue;
                }
                let x = greedy[s];
                b[s] = rew[s * nx + x];
                for (d, p) in &trans[s * nx + x] {
                    m[(s, *d)] -= gamma * p;
                }
            }
            let sol = m.clone().lu().solve(&b).ok_or_else(|| PepgError::Singular("follower evaluation".into()))?;
            v = sol.iter().copied().collect();
            let next = greedy_of(&v, Some(&greedy));
            if next == greedy {
                break;
            }
            greedy = next;
        }
        let mut q = vec![0.0; n * nx];
        for s in 0..n {
            if s != self.goal {
                for x in 0..nx {
                    q[s * nx + x] = q_of(&v, s, x);
                }
            }
        }
        let lu_t = m.transpose().lu();
        Ok(FollowerSolution { q, v, greedy, lu_t })
    }

    /// Boltzmann response of the followers to the principal policy `π1`.
    pub fn follower_response(&self, pi1: &StochasticPolicy) -> Result<FollowerResponse> {
        let n = self.n_cells();
        if pi1.n_states != n || pi1.n_actions != N_MOVES {
            return Err(PepgError::Dimension("principal policy shape does not match grid".into()));
        }
        let nx = N_FOLLOWER_ACTIONS;
        let followers =
            (0..self.config.n_followers).map(|j| self.solve_follower(j, pi1)).collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / followers.len() as f64;
        let mut q_bar = vec![0.0; n * nx];
        for f in &followers {
            for (qb, q) in q_bar.iter_mut().zip(&f.q) {
                *qb += inv * q;
            }
        }
        let mut pi2 = vec![0.0; n * nx];
        let mut logits = vec![0.0; nx];
        for s in 0..n {
            for x in 0..nx {
                logits[x] = self.config.beta_b * q_bar[s * nx + x];
            }
            softmax_row(&logits, &mut pi2[s * nx..(s + 1) * nx]);
        }
        Ok(FollowerResponse { q_bar, pi2, followers })
    }

    /// Back-propagates `G(s,x) = ∂F/∂π2(x|s)` to `∂F/∂θ`.
    fn backprop(&self, pi1: &StochasticPolicy, resp: &FollowerResponse, g_pi2: &[f64]) -> Vec<f64> {
        let n = self.n_cells();
        let nx = N_FOLLOWER_ACTIONS;
        let gamma = self.config.gamma;
        let nf = resp.followers.len() as f64;
        // ∂F/∂Q̄ through the Boltzmann softmax.
        let mut lam = vec![0.0; n * nx];
        for s in 0..n {
            if s == self.goal {
                continue;
            }
            let row = &resp.pi2[s * nx..(s + 1) * nx];
            let g = &g_pi2[s * nx..(s + 1) * nx];
            let mean: f64 = row.iter().zip(g).map(|(p, x)| p * x).sum();
            for x in 0..nx {
                lam[s * nx + x] = self.config.beta_b * row[x] * (g[x] - mean) / nf;
            }
        }
        let mut g_pi1 = vec![0.0; n * N_MOVES];
        let mut buf = Vec::new();
        for (j, f) in resp.followers.iter().enumerate() {
            let mut y = DVector::<f64>::zeros(n);
            for s in 0..n {
                if s == self.goal {
                    continue;
                }
                for x in 0..nx {
                    let l = lam[s * nx + x];
                    if l == 0.0 {
                        continue;
                    }
                    self.follower_step(j, pi1, s, x, &mut buf);
                    for (d, p) in &buf {
                        y[*d] += gamma * l * p;
                    }
                }
            }
            let z = f.lu_t.solve(&y).unwrap_or_else(|| DVector::zeros(n));
            let costs = &self.perceived_costs[j];
            for s in 0..n {
                if s == self.goal {
                    continue;
                }
                let coef = lam[s * nx + NOOP] + if f.greedy[s] == NOOP { z[s] } else { 0.0 };
                for a in 0..N_MOVES {
                    let d = self.dest[s][a];
                    g_pi1[s * N_MOVES + a] += coef * (costs[d] + gamma * f.v[d]);
                }
            }
        }
        // Chain through the principal softmax.
        let mut g = vec![0.0; n * N_MOVES];
        for s in 0..n {
            let row = pi1.row(s);
            let gp = &g_pi1[s * N_MOVES..(s + 1) * N_MOVES];
            let mean: f64 = row.iter().zip(gp).map(|(p, x)| p * x).sum();
            for c in 0..N_MOVES {
                g[s * N_MOVES + c] = row[c] * (gp[c] - mean);
            }
        }
        g
    }

    pub fn render(&self) -> String {
        self.cells.chunks(self.cols).map(|r| r.iter().map(|c| c.to_char()).collect::<String>()).collect::<Vec<_>>().join("\n")
    }

    /// Shortest-path (BFS) move toward the goal from every cell; ties broken by move order.
    pub fn shortest_path_moves(&self) -> Vec<usize> {
        let n = self.n_cells();
        let mut dist = vec![usize::MAX; n];
        dist[self.goal] = 0;
        let mut queue = std::collections::VecDeque::from([self.goal]);
        while let Some(u) = queue.pop_front() {
            for s in 0..n {
                if dist[s] == usize::MAX && self.dest[s].contains(&u) {
                    dist[s] = dist[u] + 1;
                    queue.push_back(s);
                }
            }
        }
        (0..n)
            .map(|s| (0..N_MOVES).min_by_key(|&m| (dist[self.dest[s][m]], self.cells[self.dest[s][m]] == Cell::Hazard)).unwrap_or(0))
            .collect()
    }
}

impl PerformativeEnv for GridworldEnv {
    fn n_states(&self) -> usize {
        self.n_cells()
    }
    fn n_actions(&self) -> usize {
        N_MOVES
    }
    fn gamma(&self) -> f64 {
        self.config.gamma
    }
    fn r_max(&self) -> f64 {
        self.r_max
    }
    fn rho(&self) -> &[f64] {
        &self.rho
    }

    fn induce(&self, theta: &PolicyParams) -> Result<TabularTables> {
        let pi1 = softmax(theta)?;
        let resp = self.follower_response(&pi1)?;
        Ok(self.tables_from_response(&resp.pi2))
    }

    fn has_analytic_gradient(&self) -> bool {
        true
    }

    fn analytic_vjp(
        &self,
        theta: &PolicyParams,
        tables: &TabularTables,
        w_logp: &[f64],
        w_r: &[f64],
    ) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        let run = || -> Result<(Vec<f64>, Vec<f64>)> {
            let n = self.n_cells();
            if w_logp.len() != n * N_MOVES * n || w_r.len() != n * N_MOVES {
                return Err(PepgError::Dimension("weight shapes do not match grid".into()));
            }
            let pi1 = softmax(theta)?;
            let resp = self.follower_response(&pi1)?;
            let nx = N_FOLLOWER_ACTIONS;
            let mut g_w = vec![0.0; n * nx];
            let mut g_u = vec![0.0; n * nx];
            for s in 0..n {
                if s == self.goal {
                    continue;
                }
                for a in 0..N_MOVES {
                    let u = w_r[s * N_MOVES + a];
                    for x in 0..nx {
                        let d = self.dest[s][Self::effective_move(a, x)];
                        let p = tables.p(s, a, d);
                        let w = w_logp[(s * N_MOVES + a) * n + d];
                        if w != 0.0 && p > 0.0 {
                            g_w[s * nx + x] += w / p;
                        }
                        let c_int = if x == NOOP { 0.0 } else { self.config.cost_intervention };
                        g_u[s * nx + x] += u * (self.true_cost(d) + c_int);
                    }
                }
            }
            Ok((self.backprop(&pi1, &resp, &g_w), self.backprop(&pi1, &resp, &g_u)))
        };
        Some(run())
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "type": "gridworld", "config": self.config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GridworldConfig {
        GridworldConfig {
            layout: vec!["S.H".into(), "...".into(), "H.G".into()],
            perturbation_seed: 3,
            ..GridworldConfig::default()
        }
    }

    fn random_theta(n: usize, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::new(n, N_MOVES, (0..n * N_MOVES).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layout_parsing() {
        let rows = GridworldConfig::parse_layout("S.\n.G\n").unwrap();
        assert_eq!(rows, vec!["S.", ".G"]);
        assert!(GridworldConfig::parse_layout("S.\nXG").is_err());
        let mut cfg = GridworldConfig::default();
        cfg.layout = vec!["S.".into(), "..".into()];
        assert!(GridworldEnv::new(cfg).is_err());
        let env = GridworldEnv::new(GridworldConfig::default()).unwrap();
        assert_eq!((env.rows, env.cols), (8, 8));
        assert_eq!(env.render(), DEFAULT_LAYOUT);
        assert_eq!(env.rho()[0], 1.0);
    }

    #[test]
    fn walls_clamp_moves() {
        let env = GridworldEnv::new(small_config()).unwrap();
        assert_eq!(env.destination(0, 0), 0);
        assert_eq!(env.destination(0, 2), 0);
        assert_eq!(env.destination(0, 1), 3);
        assert_eq!(env.destination(0, 3), 1);
        assert_eq!(env.destination(8, 1), 8);
    }

    #[test]
    fn zero_temperature_is_uniform() {
        let mut cfg = small_config();
        cfg.beta_b = 0.0;
        let env = GridworldEnv::new(cfg).unwrap();
        let resp = env.follower_response(&StochasticPolicy::uniform(9, 4)).unwrap();
        assert!(resp.pi2.iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn large_temperature_concentrates() {
        let mut cfg = small_config();
        cfg.beta_b = 1e4;
        cfg.match_prob = 1.0;
        let env = GridworldEnv::new(cfg).unwrap();
        let resp = env.follower_response(&StochasticPolicy::uniform(9, 4)).unwrap();
        for s in 0..9 {
            if s == env.goal {
                continue;
            }
            let row = &resp.q_bar[s * 5..s * 5 + 5];
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 1e-3 {
                let best = row.iter().position(|q| *q == sorted[0]).unwrap();
                assert!(resp.pi2[s * 5 + best] >= 0.99);
            }
        }
    }

    #[test]
    fn unperturbed_response_is_repeatable() {
        let mut cfg = GridworldConfig::default();
        cfg.match_prob = 1.0;
        let env = GridworldEnv::new(cfg).unwrap();
        let pi1 = StochasticPolicy::uniform(64, 4);
        let a = env.follower_response(&pi1).unwrap();
        let b = env.follower_response(&pi1).unwrap();
        assert_eq!(a.pi2, b.pi2);
    }

    #[test]
    fn follower_q_satisfies_bellman_optimality() {
        let env = GridworldEnv::new(GridworldConfig::default()).unwrap();
        let pi1 = softmax(&random_theta(64, 1)).unwrap();
        let f = env.solve_follower(0, &pi1).unwrap();
        let mut buf = Vec::new();
        for s in 0..64 {
            if s == env.goal {
                continue;
            }
            let vmax = f.q[s * 5..s * 5 + 5].iter().fold(f64::NEG_INFINITY, |m, q| m.max(*q));
            assert!((vmax - f.v[s]).abs() < 1e-12);
            for x in 0..5 {
                let r = env.follower_step(0, &pi1, s, x, &mut buf);
                let q = r + 0.9 * buf.iter().map(|(d, p)| p * f.v[*d]).sum::<f64>();
                assert!((q - f.q[s * 5 + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noop_follower_recovers_raw_grid() {
        let env = GridworldEnv::new(small_config()).unwrap();
        let t = env.raw_tables();
        t.validate(Some(env.r_max())).unwrap();
        assert_eq!(t.p(0, 1, 3), 1.0);
        assert_eq!(t.r(0, 1), -0.01);
        assert_eq!(t.r(1, 3), -0.5);
        assert_eq!(t.p(8, 0, 8), 1.0);
        assert_eq!(t.r(8, 0), 0.0);
    }

    #[test]
    fn induced_rows_are_distributions() {
        let env = GridworldEnv::new(GridworldConfig::default()).unwrap();
        for seed in 0..3 {
            let t = env.induce(&random_theta(64, seed)).unwrap();
            t.validate(Some(env.r_max() + 1e-12)).unwrap();
        }
    }

    #[test]
    fn hazard_adjacent_reward_enumeration() {
        let env = GridworldEnv::new(small_config()).unwrap();
        let theta = PolicyParams::zeros(9, 4);
        let resp = env.follower_response(&softmax(&theta).unwrap()).unwrap();
        let t = env.induce(&theta).unwrap();
        // Cell 1 (row 0, col 1): right leads to the hazard at cell 2.
        let s = 1;
        for a in 0..4 {
            let mut expected = 0.0;
            for x in 0..5 {
                let m = if x == 0 { a } else { x - 1 };
                let d = match m {
                    0 => 1,
                    1 => 4,
                    2 => 0,
                    _ => 2,
                };
                let cost = if d == 2 { -0.5 } else { -0.01 };
                let c_int = if x == 0 { 0.0 } else { -0.05 };
                expected += resp.pi2[s * 5 + x] * (cost + c_int);
            }
            assert!((t.r(s, a) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn induction_is_deterministic() {
        let env = GridworldEnv::new(GridworldConfig::default()).unwrap();
        let theta = random_theta(64, 4);
        assert_eq!(env.induce(&theta).unwrap(), env.induce(&theta).unwrap());
        let other = env.with_perturbation_seed(1).unwrap();
        assert_eq!(other.induce(&theta).unwrap(), other.induce(&theta).unwrap());
    }

    #[test]
    fn shortest_path_reaches_goal() {
        let env = GridworldEnv::new(GridworldConfig::default()).unwrap();
        let moves = env.shortest_path_moves();
        let mut s = 0;
        for _ in 0..64 {
            if s == env.goal {
                break;
            }
            s = env.destination(s, moves[s]);
        }
        assert_eq!(s, env.goal);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (cfg, n) in [(small_config(), 9usize), (GridworldConfig { beta_b: 20.0, ..GridworldConfig::default() }, 64)] {
            let env = GridworldEnv::new(cfg).unwrap();
            let theta = random_theta(n, 11);
            let t = env.induce(&theta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut w = vec![0.0; n * 4 * n];
            for (i, wi) in w.iter_mut().enumerate() {
                if t.transition[i] > 0.0 {
                    *wi = rng.random_range(-1.0..1.0);
                }
            }
            let u: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (gp, gr) = env.analytic_vjp(&theta, &t, &w, &u).unwrap().unwrap();
            let h = 1e-5;
            let scalar = |tt: &TabularTables| -> (f64, f64) {
                let mut fp = 0.0;
                for (i, wi) in w.iter().enumerate() {
                    if *wi != 0.0 {
                        fp += wi * tt.transition[i].ln();
                    }
                }
                let fr: f64 = u.iter().zip(&tt.reward).map(|(a, b)| a * b).sum();
                (fp, fr)
            };
            let scale_p = gp.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let scale_r = gr.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for k in (0..n * 4).step_by(if n > 9 { 7 } else { 1 }) {
                let mut e = vec![0.0; n * 4];
                e[k] = 1.0;
                let (pp, rp) = scalar(&env.induce(&theta.offset(&e, h)).unwrap());
                let (pm, rm) = scalar(&env.induce(&theta.offset(&e, -h)).unwrap());
                let fdp = (pp - pm) / (2.0 * h);
                let fdr = (rp - rm) / (2.0 * h);
                assert!((fdp - gp[k]).abs() <= 1e-5 * scale_p.max(1e-6), "logp {k}: {fdp} vs {}", gp[k]);
                assert!((fdr - gr[k]).abs() <= 1e-5 * scale_r.max(1e-6), "r {k}: {fdr} vs {}", gr[k]);
            }
        }
    }
}
