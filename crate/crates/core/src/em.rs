//! Closed-form EM parameter updates and the interleaved EM/BP detector.
//!
//! With `theta = (h_0, ..., h_L, sigma2)` the complete-data log-likelihood is
//! `-N log(M pi sigma2) - |y - H c|^2 / sigma2`. Its expectation under the
//! symbol posterior only needs first moments, energies and the lag-`d`
//! cross moments `E[c_{n-d} conj(c_n)]`; each coordinate has a closed-form
//! maximizer given the others.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::baselines::bcjr_map;
use crate::channel::{matched_stats, ChannelParams, Constellation, MatchedStats};
use crate::error::{Error, Result};
use crate::graph::{bp_init, build_graph, Beliefs, FactorGraph, OpCounts, PosteriorApprox};

/// Smallest noise variance an update may return.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Default number of EM/BP iterations: every parameter is revisited three times.
pub fn default_iterations(memory: usize) -> usize {
    3 * (memory + 2)
}

/// Per-iteration momentum weights for the `L + 2` parameters.
///
/// Column `l <= L` belongs to tap `h_l`, column `L + 1` to `sigma2`. A zero
/// weight deselects the parameter: its update is neither computed nor applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EmSchedule {
    num_params: usize,
    weights: Vec<Vec<f64>>,
}

impl EmSchedule {
    /// Rows of `L + 2` weights each.
    pub fn custom(weights: Vec<Vec<f64>>) -> Result<Self> {
        let num_params = weights.first().map(Vec::len).unwrap_or(0);
        if num_params < 2 {
            return Err(Error::InvalidParameter("schedule rows need at least two entries".into()));
        }
        if weights.iter().any(|r| r.len() != num_params) {
            return Err(Error::ShapeMismatch("schedule rows differ in length".into()));
        }
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("schedule weights must be finite".into()));
        }
        Ok(EmSchedule { num_params, weights })
    }

    /// One parameter per iteration, cycling `h_0, ..., h_L, sigma2`.
    pub fn serial(memory: usize, iterations: usize) -> Self {
        let p = memory + 2;
        let weights = (0..iterations)
            .map(|t| {
                let mut row = vec![0.0; p];
                row[t % p] = 1.0;
                row
            })
            .collect();
        EmSchedule { num_params: p, weights }
    }

    /// Every parameter in every iteration.
    pub fn parallel(memory: usize, iterations: usize) -> Self {
        EmSchedule { num_params: memory + 2, weights: vec![vec![1.0; memory + 2]; iterations] }
    }

    /// No parameter updates: plain BP iterations.
    pub fn empty(memory: usize, iterations: usize) -> Self {
        EmSchedule { num_params: memory + 2, weights: vec![vec![0.0; memory + 2]; iterations] }
    }

    pub fn iterations(&self) -> usize {
        self.weights.len()
    }

    pub fn memory(&self) -> usize {
        self.num_params - 2
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.weights[t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Number of nonzero weights over all iterations.
    pub fn active_count(&self) -> usize {
        self.weights.iter().flatten().filter(|&&w| w != 0.0).count()
    }
}

/// Posterior moments the M-step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    memory: usize,
    /// `E[c_n]`.
    pub mean: Vec<Complex64>,
    /// `E[|c_n|^2]`.
    pub energy: Vec<f64>,
    /// `cross[n * L + d - 1] = E[c_{n-d} conj(c_n)]`, zero for `d > n`.
    cross: Vec<Complex64>,
}

impl Moments {
    /// Assembles moments from raw arrays; `cross` is laid out as in [`Moments::cross`].
    pub fn new(memory: usize, mean: Vec<Complex64>, energy: Vec<f64>, cross: Vec<Complex64>) -> Result<Self> {
        let n = mean.len();
        if energy.len() != n || cross.len() != n * memory {
            return Err(Error::ShapeMismatch("moment arrays disagree in length".into()));
        }
        Ok(Moments { memory, mean, energy, cross })
    }

    /// Moments of the factorized distribution `prod_n q_n(c_n)`.
    pub fn from_beliefs(q: &PosteriorApprox, constellation: &Constellation, memory: usize) -> Self {
        let (mean, energy) = q.symbol_moments(constellation);
        let n = mean.len();
        let mut cross = vec![Complex64::new(0.0, 0.0); n * memory];
        for k in 0..n {
            for d in 1..=memory.min(k) {
                cross[k * memory + d - 1] = mean[k - d] * mean[k].conj();
            }
        }
        Moments { memory, mean, energy, cross }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    /// `E[c_{n-d} conj(c_n)]` for `1 <= d <= L`; zero outside the block.
    pub fn cross(&self, n: usize, d: usize) -> Complex64 {
        if d == 0 {
            return Complex64::new(self.energy[n], 0.0);
        }
        if d > n || d > self.memory || n >= self.len() {
            return Complex64::new(0.0, 0.0);
        }
        self.cross[n * self.memory + d - 1]
    }

    /// `E[conj(c_n) c_{n + delta}]` for `|delta| <= L`, zero when out of range.
    fn lagged(&self, n: usize, delta: isize) -> Complex64 {
        let target = n as isize + delta;
        if target < 0 || target as usize >= self.len() {
            return Complex64::new(0.0, 0.0);
        }
        if delta >= 0 {
            self.cross(target as usize, delta as usize).conj()
        } else {
            self.cross(n, (-delta) as usize)
        }
    }
}

/// Terms of the expanded squared residual `|y - H c|^2 = B - C(c) + D(c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcdTerms {
    m: usize,
    memory: usize,
    /// `sum |y_k|^2`.
    pub b: f64,
    /// `c[n * M + i] = 2 Re{x_n conj(c_i)} - G_nn |c_i|^2`.
    c: Vec<f64>,
    /// Per pair `(n, n - d)`, `d` in `1..=min(L, n)`, an `M x M` table of
    /// `2 Re{G[n][n-d] c_b conj(c_a)}` at `a * M + b` (`a` indexes `c_n`).
    d: Vec<f64>,
    n: usize,
}

impl BcdTerms {
    pub fn c(&self, n: usize, i: usize) -> f64 {
        self.c[n * self.m + i]
    }

    /// `D` for the pair `(n, n - d)`.
    pub fn d(&self, n: usize, d: usize, a: usize, b: usize) -> f64 {
        if d == 0 || d > self.memory || d > n {
            return 0.0;
        }
        self.d[self.pair_offset(n, d) + a * self.m + b]
    }

    fn pair_offset(&self, n: usize, d: usize) -> usize {
        // Pairs before row n: sum_{k<n} min(L, k).
        let l = self.memory;
        let before = if n <= l { n * n.saturating_sub(1) / 2 } else { l * (l + 1) / 2 + (n - l - 1) * l };
        (before + d - 1) * self.m * self.m
    }

    /// `B - C(c) + D(c)` for a symbol-index sequence.
    pub fn residual(&self, indices: &[usize]) -> f64 {
        let mut r = self.b;
        for (n, &a) in indices.iter().enumerate() {
            r -= self.c(n, a);
            for d in 1..=self.memory.min(n) {
                r += self.d(n, d, a, indices[n - d]);
            }
        }
        r
    }

    pub fn num_symbols(&self) -> usize {
        self.n
    }
}

/// Expands `|y - H c|^2` for the channel `h`.
pub fn bcd_terms(y: &[Complex64], h: &[Complex64], constellation: &Constellation) -> BcdTerms {
    let stats = matched_stats(y, h);
    let memory = stats.memory();
    let n = stats.len();
    let m = constellation.size();
    let pts = &constellation.points;
    let b = y.iter().map(|v| v.norm_sqr()).sum();
    let mut c = Vec::with_capacity(n * m);
    for k in 0..n {
        let gkk = stats.lower(k, 0).re;
        for &p in pts {
            c.push(2.0 * (stats.x[k] * p.conj()).re - gkk * p.norm_sqr());
        }
    }
    let mut d = Vec::new();
    for k in 0..n {
        for lag in 1..=memory.min(k) {
            let g = stats.lower(k, lag);
            for &a in pts {
                for &bb in pts {
                    d.push(2.0 * (g * bb * a.conj()).re);
                }
            }
        }
    }
    BcdTerms { m, memory, b, c, d, n }
}

/// `sigma2` maximizing the expected log-likelihood under the factorized `q`,
/// written directly in terms of the `B`, `C`, `D` tables.
pub fn update_sigma2(q: &PosteriorApprox, terms: &BcdTerms) -> f64 {
    let m = q.alphabet_size();
    let mut r = terms.b;
    for n in 0..terms.n {
        let qn = q.row(n);
        for a in 0..m {
            let mut inner = terms.c(n, a);
            for d in 1..=terms.memory.min(n) {
                let qm = q.row(n - d);
                for b in 0..m {
                    inner -= qm[b] * terms.d(n, d, a, b);
                }
            }
            r -= qn[a] * inner;
        }
    }
    (r / terms.n as f64).max(SIGMA2_FLOOR)
}

/// `E|y - H c|^2` from posterior moments; `stats` must be built from the same taps.
pub fn expected_residual(y: &[Complex64], stats: &MatchedStats, moments: &Moments) -> f64 {
    let mut r: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    for n in 0..moments.len() {
        r -= 2.0 * (moments.mean[n].conj() * stats.x[n]).re;
        r += stats.lower(n, 0).re * moments.energy[n];
        for d in 1..=stats.memory().min(n) {
            r += 2.0 * (stats.lower(n, d) * moments.cross(n, d)).re;
        }
    }
    r
}

/// Closed-form noise variance update `max(E|y - H c|^2 / N, floor)`.
pub fn sigma2_from_moments(y: &[Complex64], stats: &MatchedStats, moments: &Moments) -> f64 {
    (expected_residual(y, stats, moments) / moments.len() as f64).max(SIGMA2_FLOOR)
}

/// Closed-form update of tap `ell` with all other taps held at `h`.
pub fn update_tap(ell: usize, moments: &Moments, y: &[Complex64], h: &[Complex64]) -> Result<Complex64> {
    let n_sym = moments.len();
    let denom: f64 = moments.energy.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::DegeneratePosterior("symbol energy sums to zero".into()));
    }
    let mut num = Complex64::new(0.0, 0.0);
    for n in 0..n_sym {
        num += moments.mean[n].conj() * y[n + ell];
    }
    for (k, &hk) in h.iter().enumerate() {
        if k == ell {
            continue;
        }
        let delta = ell as isize - k as isize;
        let mut s = Complex64::new(0.0, 0.0);
        for n in 0..n_sym {
            s += moments.lagged(n, delta);
        }
        num -= hk * s;
    }
    Ok(num / denom)
}

/// Expected complete-data log-likelihood `E_q[log p(y, c | theta)]`.
pub fn q_function(params: &ChannelParams, moments: &Moments, y: &[Complex64], constellation: &Constellation) -> f64 {
    let stats = matched_stats(y, &params.h);
    let r = expected_residual(y, &stats, moments);
    let n = moments.len() as f64;
    -n * (constellation.size() as f64 * PI * params.sigma2).ln() - r / params.sigma2
}

/// One M-step: every parameter with a nonzero weight is recomputed from the
/// current estimate and combined as `beta * update + (1 - beta) * current`.
///
/// `stats` must be the matched statistics of `params.h`.
pub fn em_step(
    y: &[Complex64],
    params: &ChannelParams,
    stats: &MatchedStats,
    moments: &Moments,
    beta: &[f64],
) -> Result<(ChannelParams, OpCounts)> {
    let l = params.memory();
    if beta.len() != l + 2 {
        return Err(Error::ShapeMismatch(format!("expected {} weights, got {}", l + 2, beta.len())));
    }
    let n = moments.len() as u64;
    let taps = (l + 1) as u64;
    let mut ops = OpCounts::default();
    let mut next = params.clone();
    for ell in 0..=l {
        let w = beta[ell];
        if w == 0.0 {
            continue;
        }
        let raw = update_tap(ell, moments, y, &params.h)?;
        next.h[ell] = if w == 1.0 { raw } else { raw * w + params.h[ell] * (1.0 - w) };
        // Numerator N complex MACs, L lagged sums of N terms with a complex
        // scaling each, one real division.
        ops.mult += 4 * n + 4 * (taps - 1) + 2;
        ops.add += 4 * n + 2 * n * (taps - 1) + 4 * (taps - 1) + n;
    }
    let w = beta[l + 1];
    if w != 0.0 {
        let raw = sigma2_from_moments(y, stats, moments);
        let blended = if w == 1.0 { raw } else { w * raw + (1.0 - w) * params.sigma2 };
        next.sigma2 = blended.max(SIGMA2_FLOOR);
        ops.mult += 4 * n + 2 * n + 4 * n * (taps - 1) + 2 * (n + taps);
        ops.add += 4 * n + n + 4 * n * (taps - 1) + 2 * (n + taps);
    }
    if next.h.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) || !next.sigma2.is_finite() {
        return Err(Error::NumericalFailure { iteration: 0, context: "non-finite parameter update".into() });
    }
    Ok((next, ops))
}

/// Result of an interleaved EM/BP run.
#[derive(Debug, Clone)]
pub struct EmbpOutput {
    pub params: ChannelParams,
    pub beliefs: Beliefs,
    /// Estimates before the first and after every iteration (`T + 1` entries).
    pub trace: Vec<ChannelParams>,
    pub ops: OpCounts,
}

/// Interleaves one (momentum) BP iteration with one M-step per iteration.
///
/// The messages are initialized once and persist while the factor tables
/// follow the evolving estimate.
pub fn embp_run(
    y: &[Complex64],
    init: &ChannelParams,
    constellation: &Constellation,
    schedule: &EmSchedule,
    beta_bp: &[f64],
) -> Result<EmbpOutput> {
    let iterations = schedule.iterations();
    if iterations == 0 {
        return Err(Error::InvalidParameter("EMBP needs at least one iteration".into()));
    }
    if beta_bp.len() != iterations {
        return Err(Error::ShapeMismatch(format!(
            "{} BP weights for {iterations} iterations",
            beta_bp.len()
        )));
    }
    if schedule.memory() != init.memory() {
        return Err(Error::ShapeMismatch("schedule and channel memory differ".into()));
    }
    if y.len() < init.h.len() {
        return Err(Error::ShapeMismatch("observation shorter than the channel".into()));
    }
    let memory = init.memory();
    let mut params = init.clone();
    let mut stats = matched_stats(y, &params.h);
    let mut graph = build_graph(&stats, params.sigma2, constellation);
    let mut ops = graph.build_ops();
    let mut state = bp_init(&graph);
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(params.clone());
    let mut beliefs = Beliefs::uniform(stats.len(), constellation.size());
    let mut built_for = params.clone();

    for t in 0..iterations {
        if built_for != params {
            stats = matched_stats(y, &params.h);
            graph = rebuild(&stats, &params, constellation, &mut ops);
            built_for = params.clone();
        }
        state.step(&graph, beta_bp[t]).map_err(|e| with_iteration(e, t + 1))?;
        beliefs = state.beliefs(&graph)?;
        let row = schedule.row(t);
        if row.iter().any(|&w| w != 0.0) {
            let moments = Moments::from_beliefs(&beliefs, constellation, memory);
            let (next, step_ops) =
                em_step(y, &params, &stats, &moments, row).map_err(|e| with_iteration(e, t + 1))?;
            ops += step_ops;
            params = next;
        }
        trace.push(params.clone());
    }
    ops += state.ops();
    Ok(EmbpOutput { params, beliefs, trace, ops })
}

fn rebuild(stats: &MatchedStats, params: &ChannelParams, constellation: &Constellation, ops: &mut OpCounts) -> FactorGraph {
    let n = stats.len() as u64;
    let taps = params.h.len() as u64;
    // Matched filter and autocorrelation.
    ops.mult += 4 * n * taps + 4 * taps * taps;
    ops.add += 4 * n * taps + 4 * taps * taps;
    let g = build_graph(stats, params.sigma2, constellation);
    *ops += g.build_ops();
    g
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NumericalFailure { context, .. } => Error::NumericalFailure { iteration, context },
        other => other,
    }
}

/// Runs EM with the exact (BCJR) E-step and serial single-parameter M-steps,
/// returning `log p(y | theta_t)` for `t = 0..=T`.
pub fn em_monotonicity_probe(
    y: &[Complex64],
    init: &ChannelParams,
    constellation: &Constellation,
    iterations: usize,
) -> Result<Vec<f64>> {
    let schedule = EmSchedule::serial(init.memory(), iterations);
    let mut params = init.clone();
    let first = bcjr_map(y, &params, constellation)?;
    let mut lls = vec![first.log_evidence];
    let mut posterior = first;
    for t in 0..iterations {
        let stats = matched_stats(y, &params.h);
        let (next, _) = em_step(y, &params, &stats, &posterior.moments, schedule.row(t))?;
        params = next;
        posterior = bcjr_map(y, &params, constellation)?;
        lls.push(posterior.log_evidence);
    }
    Ok(lls)
}
