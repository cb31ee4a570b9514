//! Ungerboeck factor graph and log-domain belief propagation.
//!
//! Each block yields one variable node per symbol, a unary factor `F_n` and a
//! pairwise factor `I_{n,m}` for every pair with `1 <= n - m <= L`. Messages
//! are flooded in parallel: all variable-to-factor messages first, then all
//! factor-to-variable messages from the fresh ones. A momentum weight `beta`
//! replaces each update by `beta * new + (1 - beta) * old` in the log domain.

use std::ops::AddAssign;

use num_complex::Complex64;

use crate::channel::{matched_stats, ChannelParams, Constellation, MatchedStats};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalize_log, softmax_into};

/// Real-valued operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub add: u64,
    pub mult: u64,
    /// Exponential terms entering a log-sum-exp.
    pub lse: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.add += rhs.add;
        self.mult += rhs.mult;
        self.lse += rhs.lse;
    }
}

/// Per-symbol categorical distributions, row-major `N x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beliefs {
    n: usize,
    m: usize,
    probs: Vec<f64>,
}

/// A factorized posterior approximation `Q(c) = prod_n q_n(c_n)`.
pub type PosteriorApprox = Beliefs;

impl Beliefs {
    pub fn uniform(n: usize, m: usize) -> Self {
        Beliefs { n, m, probs: vec![1.0 / m as f64; n * m] }
    }

    /// Builds beliefs from row-major probabilities, renormalizing each row.
    pub fn from_probs(n: usize, m: usize, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * m || m == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} x {m} probabilities, got {}",
                probs.len()
            )));
        }
        for row in probs.chunks_mut(m) {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidParameter("probabilities must be finite and nonnegative".into()));
            }
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::InvalidParameter("belief row sums to zero".into()));
            }
            for p in row.iter_mut() {
                *p /= s;
            }
        }
        Ok(Beliefs { n, m, probs })
    }

    /// Softmax of each row of row-major log-weights.
    pub fn from_log_weights(n: usize, m: usize, logw: &[f64]) -> Self {
        let mut probs = vec![0.0; n * m];
        for (out, row) in probs.chunks_mut(m).zip(logw.chunks(m)) {
            softmax_into(row, out);
        }
        Beliefs { n, m, probs }
    }

    /// A point mass at each given symbol index.
    pub fn point_mass(indices: &[usize], m: usize) -> Self {
        let mut probs = vec![0.0; indices.len() * m];
        for (n, &i) in indices.iter().enumerate() {
            probs[n * m + i] = 1.0;
        }
        Beliefs { n: indices.len(), m, probs }
    }

    pub fn num_symbols(&self) -> usize {
        self.n
    }

    pub fn alphabet_size(&self) -> usize {
        self.m
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.probs[n * self.m..(n + 1) * self.m]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.m)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Symbol-wise MAP decisions.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// `b'_n(c) = b_n(perm^{-1}(c))`, i.e. `b'_n(perm[i]) = b_n(i)`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut probs = vec![0.0; self.probs.len()];
        for (dst, src) in probs.chunks_mut(self.m).zip(self.rows()) {
            for (i, &p) in src.iter().enumerate() {
                dst[perm[i]] = p;
            }
        }
        Beliefs { n: self.n, m: self.m, probs }
    }

    /// Mean and second moment of each symbol under its belief.
    pub fn symbol_moments(&self, constellation: &Constellation) -> (Vec<Complex64>, Vec<f64>) {
        let mut mean = Vec::with_capacity(self.n);
        let mut energy = Vec::with_capacity(self.n);
        for row in self.rows() {
            let mut mu = Complex64::new(0.0, 0.0);
            let mut e = 0.0;
            for (&p, &c) in row.iter().zip(&constellation.points) {
                mu += c * p;
                e += p * c.norm_sqr();
            }
            mean.push(mu);
            energy.push(e);
        }
        (mean, energy)
    }

    /// Sum of per-row entropies in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// Largest absolute difference of any entry.
    pub fn max_abs_diff(&self, other: &Beliefs) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest per-row total-variation distance.
    pub fn max_total_variation(&self, other: &Beliefs) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Local factors of one block in the log domain.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    n: usize,
    m: usize,
    memory: usize,
    /// `unary[n * M + i] = F_n(c_i)`.
    unary: Vec<f64>,
    /// Per edge an `M x M` table `I_{n,m}(c_n = a, c_m = b)` at `a * M + b`.
    pairwise: Vec<f64>,
    /// `edge_start[n]` indexes the edge `(n, n - 1)`; edge `(n, n - d)` follows at offset `d - 1`.
    edge_start: Vec<usize>,
    build_ops: OpCounts,
}

impl FactorGraph {
    pub fn num_symbols(&self) -> usize {
        self.n
    }

    pub fn alphabet_size(&self) -> usize {
        self.m
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn num_edges(&self) -> usize {
        self.pairwise.len() / (self.m * self.m)
    }

    /// `F_n(c_i)`.
    pub fn unary(&self, n: usize, i: usize) -> f64 {
        self.unary[n * self.m + i]
    }

    /// `I_{n,n-d}(c_a, c_b)`, or `None` outside `1 <= d <= min(L, n)`.
    pub fn pairwise(&self, n: usize, d: usize, a: usize, b: usize) -> Option<f64> {
        if d == 0 || d > self.memory || d > n || n >= self.n {
            return None;
        }
        let e = self.edge(n, d);
        Some(self.pairwise[e * self.m * self.m + a * self.m + b])
    }

    /// Operations spent building the tables.
    pub fn build_ops(&self) -> OpCounts {
        self.build_ops
    }

    /// Sum of all factors for a full symbol-index sequence.
    pub fn log_factor_sum(&self, indices: &[usize]) -> f64 {
        let mut s = 0.0;
        for (n, &a) in indices.iter().enumerate() {
            s += self.unary(n, a);
            for d in 1..=self.memory.min(n) {
                s += self.pairwise(n, d, a, indices[n - d]).unwrap();
            }
        }
        s
    }

    #[inline]
    fn edge(&self, n: usize, d: usize) -> usize {
        self.edge_start[n] + d - 1
    }

    /// Edge where `n` is the lower (earlier) endpoint at distance `d`.
    #[inline]
    fn edge_as_lower(&self, n: usize, d: usize) -> Option<usize> {
        if n + d < self.n && d <= self.memory {
            Some(self.edge(n + d, d))
        } else {
            None
        }
    }
}

/// Builds `F_n(c) = Re{2 x_n conj(c) - G_nn |c|^2} / sigma2` and
/// `I_{n,m}(c_n, c_m) = -2 Re{G_{n,m} c_m conj(c_n)} / sigma2`.
pub fn build_graph(stats: &MatchedStats, sigma2: f64, constellation: &Constellation) -> FactorGraph {
    let n_sym = stats.len();
    let m = constellation.size();
    let memory = stats.memory();
    let pts = &constellation.points;
    let inv = 1.0 / sigma2;
    let mut ops = OpCounts::default();

    let mut unary = Vec::with_capacity(n_sym * m);
    for n in 0..n_sym {
        let x = stats.x[n];
        let gnn = stats.lower(n, 0).re;
        for &c in pts {
            unary.push(inv * (2.0 * (x * c.conj()).re - gnn * c.norm_sqr()));
        }
    }
    // Re{x conj(c)} costs 2 mult + 1 add; the rest 4 mult + 1 add.
    ops.mult += (6 * n_sym * m) as u64;
    ops.add += (2 * n_sym * m) as u64;

    let mut edge_start = Vec::with_capacity(n_sym);
    let mut pairwise = Vec::new();
    for n in 0..n_sym {
        edge_start.push(pairwise.len() / (m * m));
        for d in 1..=memory.min(n) {
            let g = stats.lower(n, d);
            for &a in pts {
                for &b in pts {
                    pairwise.push(-2.0 * inv * (g * b * a.conj()).re);
                }
            }
            // One complex product reduced to its real part: 6 mult + 3 add, plus scaling.
            ops.mult += (7 * m * m) as u64;
            ops.add += (3 * m * m) as u64;
        }
    }
    FactorGraph { n: n_sym, m, memory, unary, pairwise, edge_start, build_ops: ops }
}

/// All variable-to-factor (`mu`) and factor-to-variable (`nu`) messages.
///
/// For every pairwise factor between `n` and `m = n - d` there are four
/// length-`M` log messages; "upper" refers to the endpoint `n`, "lower" to `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    m: usize,
    mu_upper: Vec<f64>,
    mu_lower: Vec<f64>,
    nu_upper: Vec<f64>,
    nu_lower: Vec<f64>,
    iteration: usize,
    ops: OpCounts,
}

/// Uniform messages `-log M` everywhere.
pub fn bp_init(graph: &FactorGraph) -> MessageState {
    let len = graph.num_edges() * graph.m;
    let v = -(graph.m as f64).ln();
    MessageState {
        m: graph.m,
        mu_upper: vec![v; len],
        mu_lower: vec![v; len],
        nu_upper: vec![v; len],
        nu_lower: vec![v; len],
        iteration: 0,
        ops: OpCounts::default(),
    }
}

impl MessageState {
    /// Number of iterations applied so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Operations spent in iterations and belief computations so far.
    pub fn ops(&self) -> OpCounts {
        self.ops
    }

    /// Iterator over every stored message entry.
    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu_upper
            .iter()
            .chain(&self.mu_lower)
            .chain(&self.nu_upper)
            .chain(&self.nu_lower)
            .copied()
    }

    fn check_shape(&self, graph: &FactorGraph) -> Result<()> {
        if self.m != graph.m || self.mu_upper.len() != graph.num_edges() * graph.m {
            return Err(Error::ShapeMismatch("message state does not match factor graph".into()));
        }
        Ok(())
    }

    /// Sum of the unary factor and all incoming factor messages at `n`.
    fn incoming_total(&self, graph: &FactorGraph, n: usize, out: &mut [f64]) {
        let m = self.m;
        out.copy_from_slice(&graph.unary[n * m..(n + 1) * m]);
        for d in 1..=graph.memory.min(n) {
            let e = graph.edge(n, d);
            for (o, v) in out.iter_mut().zip(&self.nu_upper[e * m..(e + 1) * m]) {
                *o += v;
            }
        }
        for d in 1..=graph.memory {
            match graph.edge_as_lower(n, d) {
                Some(e) => {
                    for (o, v) in out.iter_mut().zip(&self.nu_lower[e * m..(e + 1) * m]) {
                        *o += v;
                    }
                }
                None => break,
            }
        }
    }

    /// One flooding iteration in place.
    pub fn step(&mut self, graph: &FactorGraph, beta: f64) -> Result<()> {
        self.check_shape(graph)?;
        if !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("momentum weight must be finite, got {beta}")));
        }
        self.iteration += 1;
        if beta == 0.0 {
            return Ok(());
        }
        let m = self.m;
        let m64 = m as u64;
        let edges = graph.num_edges();
        let mut ops = OpCounts::default();

        // Variable to factor: exclude the factor's own incoming message.
        let mut mu_upper = vec![0.0; edges * m];
        let mut mu_lower = vec![0.0; edges * m];
        let mut total = vec![0.0; m];
        for n in 0..graph.n {
            self.incoming_total(graph, n, &mut total);
            let mut degree = 0u64;
            for d in 1..=graph.memory.min(n) {
                let e = graph.edge(n, d);
                let out = &mut mu_upper[e * m..(e + 1) * m];
                for i in 0..m {
                    out[i] = total[i] - self.nu_upper[e * m + i];
                }
                normalize_log(out);
                degree += 1;
            }
            for d in 1..=graph.memory {
                let Some(e) = graph.edge_as_lower(n, d) else { break };
                let out = &mut mu_lower[e * m..(e + 1) * m];
                for i in 0..m {
                    out[i] = total[i] - self.nu_lower[e * m + i];
                }
                normalize_log(out);
                degree += 1;
            }
            // Total: degree * M adds; each outgoing: M subtractions plus
            // an M-term normalization (M lse terms, M adds).
            ops.add += degree * m64 + degree * 2 * m64;
            ops.lse += degree * m64;
        }
        if beta != 1.0 {
            combine(&mut mu_upper, &self.mu_upper, beta, m, &mut ops);
            combine(&mut mu_lower, &self.mu_lower, beta, m, &mut ops);
        }

        // Factor to variable from the fresh variable-to-factor messages.
        let mut nu_upper = vec![0.0; edges * m];
        let mut nu_lower = vec![0.0; edges * m];
        let mut terms = vec![0.0; m];
        for e in 0..edges {
            let table = &graph.pairwise[e * m * m..(e + 1) * m * m];
            let from_upper = &mu_upper[e * m..(e + 1) * m];
            let from_lower = &mu_lower[e * m..(e + 1) * m];
            for a in 0..m {
                for b in 0..m {
                    terms[b] = table[a * m + b] + from_lower[b];
                }
                nu_upper[e * m + a] = log_sum_exp(&terms);
            }
            for b in 0..m {
                for a in 0..m {
                    terms[a] = table[a * m + b] + from_upper[a];
                }
                nu_lower[e * m + b] = log_sum_exp(&terms);
            }
            normalize_log(&mut nu_upper[e * m..(e + 1) * m]);
            normalize_log(&mut nu_lower[e * m..(e + 1) * m]);
            // Two directions of M outputs with M-term sums, plus normalization.
            ops.add += 2 * m64 * m64 + 2 * 2 * m64;
            ops.lse += 2 * m64 * m64 + 2 * m64;
        }
        if beta != 1.0 {
            combine(&mut nu_upper, &self.nu_upper, beta, m, &mut ops);
            combine(&mut nu_lower, &self.nu_lower, beta, m, &mut ops);
        }

        let finite = mu_upper
            .iter()
            .chain(&mu_lower)
            .chain(&nu_upper)
            .chain(&nu_lower)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NumericalFailure {
                iteration: self.iteration,
                context: "non-finite BP message".into(),
            });
        }
        self.mu_upper = mu_upper;
        self.mu_lower = mu_lower;
        self.nu_upper = nu_upper;
        self.nu_lower = nu_lower;
        self.ops += ops;
        Ok(())
    }

    /// Beliefs `b_n(c) ∝ exp(F_n(c) + sum of incoming factor messages)`.
    pub fn beliefs(&mut self, graph: &FactorGraph) -> Result<Beliefs> {
        self.check_shape(graph)?;
        let b = compute_beliefs(graph, self);
        let m = graph.m as u64;
        let deg_sum = 2 * graph.num_edges() as u64;
        self.ops.add += deg_sum * m + graph.n as u64 * m;
        self.ops.lse += graph.n as u64 * m;
        Ok(b)
    }
}

/// `new <- beta * new + (1 - beta) * old`, renormalized per message.
fn combine(new: &mut [f64], old: &[f64], beta: f64, m: usize, ops: &mut OpCounts) {
    let keep = 1.0 - beta;
    for (n_msg, o_msg) in new.chunks_mut(m).zip(old.chunks(m)) {
        for (n, &o) in n_msg.iter_mut().zip(o_msg) {
            *n = beta * *n + keep * o;
        }
        normalize_log(n_msg);
    }
    let len = new.len() as u64;
    ops.mult += 2 * len;
    ops.add += 2 * len;
    ops.lse += len;
}

/// Functional form of [`MessageState::step`].
pub fn bp_iteration(graph: &FactorGraph, state: &MessageState, beta: f64) -> Result<MessageState> {
    let mut next = state.clone();
    next.step(graph, beta)?;
    Ok(next)
}

/// Beliefs from the current messages; does not touch the operation counters.
pub fn compute_beliefs(graph: &FactorGraph, state: &MessageState) -> Beliefs {
    let m = graph.m;
    let mut logw = vec![0.0; graph.n * m];
    for (n, row) in logw.chunks_mut(m).enumerate() {
        state.incoming_total(graph, n, row);
    }
    Beliefs::from_log_weights(graph.n, m, &logw)
}

/// Coherent BP detection with known parameters: `T` iterations with the
/// given per-iteration momentum weights.
pub fn bp_detect(
    y: &[Complex64],
    params: &ChannelParams,
    constellation: &Constellation,
    beta_schedule: &[f64],
) -> Result<Beliefs> {
    if beta_schedule.is_empty() {
        return Err(Error::InvalidParameter("BP needs at least one iteration".into()));
    }
    let stats = matched_stats(y, &params.h);
    let graph = build_graph(&stats, params.sigma2, constellation);
    let mut state = bp_init(&graph);
    for &beta in beta_schedule {
        state.step(&graph, beta)?;
    }
    Ok(compute_beliefs(&graph, &state))
}

/// Operations of `T` plain BP iterations, each followed by a belief computation.
pub fn op_counters(graph: &FactorGraph, iterations: usize) -> Result<OpCounts> {
    let mut state = bp_init(graph);
    for _ in 0..iterations {
        state.step(graph, 1.0)?;
        state.beliefs(graph)?;
    }
    Ok(state.ops())
}
