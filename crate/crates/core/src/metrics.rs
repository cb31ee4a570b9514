//! Evaluation metrics: squared error, bit-metric LLRs, BER, BMI and
//! ELBO/KL diagnostics.

use std::f64::consts::LN_2;

use num_complex::Complex64;

use crate::baselines::bcjr_map;
use crate::channel::{ChannelParams, Constellation};
use crate::error::{Error, Result};
use crate::graph::{Beliefs, PosteriorApprox};
use crate::math::{log_sum_exp, softplus};
use crate::vae_init::vae_elbo;

/// Magnitude bound applied to every LLR.
pub const LLR_CLAMP: f64 = 50.0;

/// `sum_l |est_l - truth_l|^2`.
pub fn squared_error(est: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} estimated taps vs {} true taps", est.len(), truth.len())));
    }
    Ok(est.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum())
}

/// Bit LLRs `log P(b = 0) - log P(b = 1)`, row-major `N x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Llrs {
    pub bits_per_symbol: usize,
    pub values: Vec<f64>,
}

impl Llrs {
    /// Hard decisions: bit 0 where the LLR is nonnegative.
    pub fn hard_bits(&self) -> Vec<u8> {
        self.values.iter().map(|&l| u8::from(l < 0.0)).collect()
    }
}

/// Bit-metric demapping of symbol beliefs.
pub fn bmd_llrs(beliefs: &Beliefs, constellation: &Constellation) -> Llrs {
    let bits = constellation.bits_per_symbol();
    let mut values = Vec::with_capacity(beliefs.num_symbols() * bits);
    let mut zero = Vec::with_capacity(constellation.size());
    let mut one = Vec::with_capacity(constellation.size());
    for row in beliefs.rows() {
        for k in 0..bits {
            zero.clear();
            one.clear();
            for (p, label) in row.iter().zip(&constellation.bit_labels) {
                let lp = p.ln();
                if label[k] == 0 {
                    zero.push(lp);
                } else {
                    one.push(lp);
                }
            }
            let l = log_sum_exp(&zero) - log_sum_exp(&one);
            // inf - inf cannot happen for normalized rows; +-inf clamp to the bound.
            values.push(if l.is_nan() { 0.0 } else { l.clamp(-LLR_CLAMP, LLR_CLAMP) });
        }
    }
    Llrs { bits_per_symbol: bits, values }
}

/// Fraction of differing bits.
pub fn ber(decided: &[u8], truth: &[u8]) -> Result<f64> {
    if decided.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} decisions vs {} bits", decided.len(), truth.len())));
    }
    Ok(bit_errors(decided, truth) as f64 / truth.len() as f64)
}

/// Number of differing bits.
pub fn bit_errors(decided: &[u8], truth: &[u8]) -> usize {
    decided.iter().zip(truth).filter(|(a, b)| a != b).count()
}

/// Running BMI estimate `log2 M - mean log2(1 + exp(-(-1)^b L))` per symbol.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BmiAccumulator {
    penalty_nats: f64,
    bits: usize,
    bits_per_symbol: usize,
}

impl BmiAccumulator {
    pub fn new(bits_per_symbol: usize) -> Self {
        BmiAccumulator { penalty_nats: 0.0, bits: 0, bits_per_symbol }
    }

    pub fn add(&mut self, llrs: &Llrs, truth: &[u8]) -> Result<()> {
        if llrs.values.len() != truth.len() {
            return Err(Error::ShapeMismatch("LLRs and bits differ in length".into()));
        }
        self.penalty_nats += bit_penalty_nats(llrs, truth);
        self.bits += truth.len();
        Ok(())
    }

    /// Merges another accumulator (sums are associative).
    pub fn merge(&mut self, other: &BmiAccumulator) {
        self.penalty_nats += other.penalty_nats;
        self.bits += other.bits;
    }

    /// Bits per channel use; zero when nothing was added.
    pub fn value(&self) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        let m = self.bits_per_symbol as f64;
        m - m * self.penalty_nats / (self.bits as f64 * LN_2)
    }
}

/// `sum softplus(-(-1)^b L)` in nats.
pub fn bit_penalty_nats(llrs: &Llrs, truth: &[u8]) -> f64 {
    llrs.values
        .iter()
        .zip(truth)
        .map(|(&l, &b)| softplus(if b == 0 { -l } else { l }))
        .sum()
}

/// Sample-mean BMI over several blocks.
pub fn bmi_estimate(llrs: &[Llrs], truth: &[Vec<u8>]) -> Result<f64> {
    if llrs.len() != truth.len() || llrs.is_empty() {
        return Err(Error::ShapeMismatch("need one bit vector per LLR block".into()));
    }
    let mut acc = BmiAccumulator::new(llrs[0].bits_per_symbol);
    for (l, b) in llrs.iter().zip(truth) {
        acc.add(l, b)?;
    }
    Ok(acc.value())
}

/// ELBO, evidence and their gap `KL(q || p(c | y))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDiagnostic {
    pub elbo: f64,
    pub log_evidence: f64,
    pub kl: f64,
}

/// Compares a factorized `q` with the exact posterior of a small block.
pub fn kl_qp_diagnostic(
    q: &PosteriorApprox,
    params: &ChannelParams,
    y: &[Complex64],
    constellation: &Constellation,
) -> Result<KlDiagnostic> {
    let log_evidence = bcjr_map(y, params, constellation)?.log_evidence;
    let elbo = vae_elbo(q, params, y, constellation);
    Ok(KlDiagnostic { elbo, log_evidence, kl: log_evidence - elbo })
}

/// Mean and quartiles of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Order statistics with linear interpolation between closest ranks.
pub fn order_stats(values: &[f64]) -> Option<OrderStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Some(OrderStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: q(0.5),
        p25: q(0.25),
        p75: q(0.75),
    })
}

/// Resolves the rotation ambiguity of a blind estimate using the true channel.
///
/// Blind estimation identifies `h` only up to a constellation symmetry `u`
/// (`h u` with symbols `c / u` explains `y` equally well). Picks the `u`
/// minimizing `|h_est / u - h|^2` and returns the de-rotated taps together
/// with beliefs relabelled accordingly.
pub fn align_to_truth(
    h_est: &[Complex64],
    beliefs: &Beliefs,
    truth: &[Complex64],
    constellation: &Constellation,
) -> (Vec<Complex64>, Beliefs) {
    let mut best_u = Complex64::new(1.0, 0.0);
    let mut best = f64::INFINITY;
    for u in constellation.symmetries() {
        let err: f64 = h_est.iter().zip(truth).map(|(a, b)| (a * u.conj() - b).norm_sqr()).sum();
        if err < best {
            best = err;
            best_u = u;
        }
    }
    let aligned: Vec<Complex64> = h_est.iter().map(|a| a * best_u.conj()).collect();
    if best_u == Complex64::new(1.0, 0.0) {
        return (aligned, beliefs.clone());
    }
    // Under h_est = u h the beliefs concentrate on c' = conj(u) c; move mass from c' to u c'.
    let perm = constellation.rotation_permutation(best_u);
    (aligned, beliefs.permuted(&perm))
}
