//! Reference detectors and estimators: BCJR MAP detection, exhaustive
//! enumeration, pilot least squares and decision-directed refinement.
//!
//! Likelihoods follow `p(y | c, theta) = (pi sigma2)^{-N} exp(-|y - H c|^2 / sigma2)`
//! with uniform i.i.d. symbols, the same convention the EM updates maximize.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::channel::{convolve, ChannelParams, Constellation};
use crate::em::Moments;
use crate::error::{Error, Result};
use crate::graph::Beliefs;
use crate::math::{log_add, log_sum_exp};

/// Largest trellis (`M^L` states) BCJR accepts.
pub const MAX_TRELLIS_STATES: u64 = 1 << 16;
/// Largest number of sequences exhaustive enumeration accepts.
pub const MAX_ENUMERATED_SEQUENCES: u64 = 1 << 20;

/// Exact symbol posteriors of one block.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub beliefs: Beliefs,
    /// `log p(y | theta)`.
    pub log_evidence: f64,
    /// Exact first, second and lagged cross moments.
    pub moments: Moments,
}

fn checked_power(m: usize, e: usize, limit: u64) -> Result<usize> {
    let mut states: u64 = 1;
    for _ in 0..e {
        states = states.saturating_mul(m as u64);
        if states > limit {
            return Err(Error::StateSpaceTooLarge { states, limit });
        }
    }
    Ok(states as usize)
}

/// Forward-backward MAP detection over the `M^L`-state trellis.
///
/// The state after symbol `n` stores `c_n, ..., c_{n-L+1}` as base-`M`
/// digits (digit `i` is `c_{n-i}`). The `L` tail observations are attached
/// to the last transition.
pub fn bcjr_map(y: &[Complex64], params: &ChannelParams, constellation: &Constellation) -> Result<ExactPosterior> {
    let h = &params.h;
    let l = params.memory();
    let m = constellation.size();
    let states = checked_power(m, l, MAX_TRELLIS_STATES)?;
    if y.len() < l + 1 {
        return Err(Error::ShapeMismatch("observation shorter than the channel".into()));
    }
    let n_sym = y.len() - l;
    let pts = &constellation.points;
    let inv = 1.0 / params.sigma2;
    let log_prior = -(m as f64).ln();
    let zero = Complex64::new(0.0, 0.0);

    let digit = |s: usize, i: usize| (s / m.pow(i as u32)) % m;
    // Branch metric of entering symbol j from state s_prev at step n.
    let gamma = |n: usize, s_prev: usize, j: usize| -> f64 {
        let mut conv = h[0] * pts[j];
        for ell in 1..=l.min(n) {
            conv += h[ell] * pts[digit(s_prev, ell - 1)];
        }
        let mut g = log_prior - (y[n] - conv).norm_sqr() * inv;
        if n + 1 == n_sym {
            let s_new = (j + m * s_prev) % states.max(1);
            for k in n_sym..n_sym + l {
                let mut tail = zero;
                for ell in (k - n_sym + 1)..=l {
                    if k >= ell {
                        tail += h[ell] * pts[digit(s_new, ell - (k - n_sym + 1))];
                    }
                }
                g -= (y[k] - tail).norm_sqr() * inv;
            }
        }
        g
    };
    let next = |s_prev: usize, j: usize| if states == 1 { 0 } else { (j + m * s_prev) % states };

    // Branch metrics, n-major then (s_prev, j).
    let mut branch = vec![f64::NEG_INFINITY; n_sym * states * m];
    let mut alpha = vec![f64::NEG_INFINITY; (n_sym + 1) * states];
    alpha[0] = 0.0;
    for n in 0..n_sym {
        for s in 0..states {
            let a = alpha[n * states + s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..m {
                let g = gamma(n, s, j);
                branch[(n * states + s) * m + j] = g;
                let dst = (n + 1) * states + next(s, j);
                alpha[dst] = log_add(alpha[dst], a + g);
            }
        }
    }
    let log_z = log_sum_exp(&alpha[n_sym * states..]);
    if !log_z.is_finite() {
        return Err(Error::NumericalFailure { iteration: 0, context: "BCJR evidence not finite".into() });
    }
    let mut beta = vec![f64::NEG_INFINITY; (n_sym + 1) * states];
    for v in &mut beta[n_sym * states..] {
        *v = 0.0;
    }
    for n in (0..n_sym).rev() {
        for s in 0..states {
            if alpha[n * states + s] == f64::NEG_INFINITY {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            for j in 0..m {
                acc = log_add(acc, branch[(n * states + s) * m + j] + beta[(n + 1) * states + next(s, j)]);
            }
            beta[n * states + s] = acc;
        }
    }

    let mut probs = vec![0.0; n_sym * m];
    let mut cross = vec![zero; n_sym * l];
    for n in 0..n_sym {
        for s in 0..states {
            let a = alpha[n * states + s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..m {
                let w = (a + branch[(n * states + s) * m + j] + beta[(n + 1) * states + next(s, j)] - log_z).exp();
                probs[n * m + j] += w;
                for d in 1..=l.min(n) {
                    cross[n * l + d - 1] += pts[digit(s, d - 1)] * pts[j].conj() * w;
                }
            }
        }
    }
    let beliefs = Beliefs::from_probs(n_sym, m, probs)?;
    let (mean, energy) = beliefs.symbol_moments(constellation);
    let moments = Moments::new(l, mean, energy, cross)?;
    let log_evidence = log_z - n_sym as f64 * (PI * params.sigma2).ln();
    Ok(ExactPosterior { beliefs, log_evidence, moments })
}

/// Exact posteriors by enumerating all `M^N` sequences; a test oracle.
pub fn brute_posterior(y: &[Complex64], params: &ChannelParams, constellation: &Constellation) -> Result<ExactPosterior> {
    let l = params.memory();
    if y.len() < l + 1 {
        return Err(Error::ShapeMismatch("observation shorter than the channel".into()));
    }
    let n_sym = y.len() - l;
    let m = constellation.size();
    let total = checked_power(m, n_sym, MAX_ENUMERATED_SEQUENCES)?;
    let mut logw = Vec::with_capacity(total);
    let mut idx = vec![0usize; n_sym];
    let mut c = vec![Complex64::new(0.0, 0.0); n_sym];
    for k in 0..total {
        let mut r = k;
        for (slot, sym) in idx.iter_mut().zip(c.iter_mut()) {
            *slot = r % m;
            *sym = constellation.points[*slot];
            r /= m;
        }
        let res: f64 = convolve(&c, &params.h).iter().zip(y).map(|(a, b)| (a - b).norm_sqr()).sum();
        logw.push(-res / params.sigma2);
    }
    let log_z = log_sum_exp(&logw);
    let mut probs = vec![0.0; n_sym * m];
    let mut cross = vec![Complex64::new(0.0, 0.0); n_sym * l];
    for (k, lw) in logw.iter().enumerate() {
        let w = (lw - log_z).exp();
        let mut r = k;
        for slot in idx.iter_mut() {
            *slot = r % m;
            r /= m;
        }
        for n in 0..n_sym {
            probs[n * m + idx[n]] += w;
            for d in 1..=l.min(n) {
                cross[n * l + d - 1] += constellation.points[idx[n - d]] * constellation.points[idx[n]].conj() * w;
            }
        }
    }
    let beliefs = Beliefs::from_probs(n_sym, m, probs)?;
    let (mean, energy) = beliefs.symbol_moments(constellation);
    let moments = Moments::new(l, mean, energy, cross)?;
    let log_evidence = log_z - (m as f64).ln() * n_sym as f64 - n_sym as f64 * (PI * params.sigma2).ln();
    Ok(ExactPosterior { beliefs, log_evidence, moments })
}

/// Known symbols inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    /// Distinct 0-based positions.
    pub positions: Vec<usize>,
    /// Constellation indices at those positions.
    pub values: Vec<usize>,
}

impl PilotConfig {
    pub fn new(positions: Vec<usize>, values: Vec<usize>) -> Result<Self> {
        if positions.len() != values.len() {
            return Err(Error::ShapeMismatch("pilot positions and values differ in length".into()));
        }
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate pilot position".into()));
        }
        Ok(PilotConfig { positions, values })
    }

    /// Pilots on the first `count` positions with uniformly random values.
    pub fn contiguous_prefix<R: Rng + ?Sized>(count: usize, constellation: &Constellation, rng: &mut R) -> Self {
        PilotConfig {
            positions: (0..count).collect(),
            values: (0..count).map(|_| rng.random_range(0..constellation.size())).collect(),
        }
    }

    /// `round(fraction * n)` prefix pilots.
    pub fn fraction<R: Rng + ?Sized>(fraction: f64, n: usize, constellation: &Constellation, rng: &mut R) -> Self {
        let count = ((fraction * n as f64).round() as usize).min(n);
        Self::contiguous_prefix(count, constellation, rng)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Per-position known symbol, `None` where unknown.
    pub fn known(&self, n: usize, constellation: &Constellation) -> Result<Vec<Option<Complex64>>> {
        let mut known = vec![None; n];
        for (&p, &v) in self.positions.iter().zip(&self.values) {
            if p >= n || v >= constellation.size() {
                return Err(Error::InvalidParameter(format!("pilot ({p}, {v}) outside block or alphabet")));
            }
            known[p] = Some(constellation.points[v]);
        }
        Ok(known)
    }
}

/// Least-squares taps from every observation row whose contributing symbols
/// are all known (symbols outside the block count as known zeros).
pub fn least_squares_taps(y: &[Complex64], known: &[Option<Complex64>], memory: usize) -> Result<Vec<Complex64>> {
    let n_sym = known.len();
    if y.len() != n_sym + memory {
        return Err(Error::ShapeMismatch(format!("expected {} observations, got {}", n_sym + memory, y.len())));
    }
    let taps = memory + 1;
    let mut rows: Vec<(Vec<Complex64>, Complex64)> = Vec::new();
    'rows: for (k, &yk) in y.iter().enumerate() {
        let mut row = vec![Complex64::new(0.0, 0.0); taps];
        for (ell, slot) in row.iter_mut().enumerate() {
            if k < ell || k - ell >= n_sym {
                continue;
            }
            match known[k - ell] {
                Some(c) => *slot = c,
                None => continue 'rows,
            }
        }
        rows.push((row, yk));
    }
    if rows.len() < taps {
        return Err(Error::Identifiability(format!("{} fully known rows for {taps} taps", rows.len())));
    }
    let a = DMatrix::from_fn(rows.len(), taps, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let gram = a.adjoint() * &a;
    let rhs = a.adjoint() * b;
    let max_diag = (0..taps).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Identifiability("pilot Gram matrix is singular".into()))?;
    let min_pivot = (0..taps).map(|i| chol.l_dirty()[(i, i)].re).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-10 * max_diag) {
        return Err(Error::Identifiability("pilot Gram matrix is rank deficient".into()));
    }
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Maximum-likelihood taps from pilots alone.
pub fn ml_pilot_estimate(
    y: &[Complex64],
    pilots: &PilotConfig,
    memory: usize,
    constellation: &Constellation,
) -> Result<Vec<Complex64>> {
    if pilots.is_empty() {
        return Err(Error::Identifiability("no pilots".into()));
    }
    let n = y.len().checked_sub(memory).ok_or_else(|| Error::ShapeMismatch("observation too short".into()))?;
    let known = pilots.known(n, constellation)?;
    least_squares_taps(y, &known, memory)
}

/// Decision-directed refinement output.
#[derive(Debug, Clone)]
pub struct DdMapOutput {
    pub h: Vec<Complex64>,
    pub beliefs: Beliefs,
}

/// Pilot estimate, MAP detection, hard decisions, full-block least squares
/// and a second MAP detection with the refined taps.
pub fn dd_map_estimate(
    y: &[Complex64],
    pilots: &PilotConfig,
    memory: usize,
    sigma2: f64,
    constellation: &Constellation,
) -> Result<DdMapOutput> {
    let h_pilot = ml_pilot_estimate(y, pilots, memory, constellation)?;
    let first = bcjr_map(y, &ChannelParams::new(h_pilot, sigma2)?, constellation)?;
    let n = first.beliefs.num_symbols();
    let mut known: Vec<Option<Complex64>> =
        first.beliefs.argmax().into_iter().map(|i| Some(constellation.points[i])).collect();
    for (p, c) in pilots.known(n, constellation)?.into_iter().enumerate() {
        if c.is_some() {
            known[p] = c;
        }
    }
    let h = least_squares_taps(y, &known, memory)?;
    let second = bcjr_map(y, &ChannelParams::new(h.clone(), sigma2)?, constellation)?;
    Ok(DdMapOutput { h, beliefs: second.beliefs })
}
