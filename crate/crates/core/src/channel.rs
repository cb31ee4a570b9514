//! Constellations, block-fading ISI channels and matched-filter statistics.
//!
//! A block of `N` symbols `c` passes through the channel `h = (h_0, ..., h_L)`
//! and the receiver observes `y = H c + w` with `N + L` samples, where `H` is
//! the full (non-truncated) convolution matrix and `w_n ~ CN(0, sigma2)`.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported constellations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qpsk,
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Modulation::Bpsk),
            "qpsk" => Ok(Modulation::Qpsk),
            other => Err(Error::InvalidParameter(format!("unknown constellation {other:?}"))),
        }
    }
}

/// Symbol alphabet with a bit label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub name: Modulation,
    pub points: Vec<Complex64>,
    /// `bit_labels[i][k]` is bit `k` of point `i`.
    pub bit_labels: Vec<Vec<u8>>,
}

impl Constellation {
    pub fn new(name: Modulation) -> Self {
        match name {
            Modulation::Bpsk => Self::bpsk(),
            Modulation::Qpsk => Self::qpsk(),
        }
    }

    /// `{+1, -1}` labelled `0`, `1`.
    pub fn bpsk() -> Self {
        Constellation {
            name: Modulation::Bpsk,
            points: vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            bit_labels: vec![vec![0], vec![1]],
        }
    }

    /// Unit-energy Gray-labelled QPSK: bit 0 selects the sign of the real
    /// part, bit 1 the sign of the imaginary part.
    pub fn qpsk() -> Self {
        let mut points = Vec::with_capacity(4);
        let mut bit_labels = Vec::with_capacity(4);
        for b0 in 0..2u8 {
            for b1 in 0..2u8 {
                let re = if b0 == 0 { 1.0 } else { -1.0 };
                let im = if b1 == 0 { 1.0 } else { -1.0 };
                points.push(Complex64::new(re, im) * FRAC_1_SQRT_2);
                bit_labels.push(vec![b0, b1]);
            }
        }
        Constellation { name: Modulation::Qpsk, points, bit_labels }
    }

    /// Number of points `M`.
    pub fn size(&self) -> usize {
        self.points.len()
    }

    /// Bits per symbol `m = log2(M)`.
    pub fn bits_per_symbol(&self) -> usize {
        self.size().trailing_zeros() as usize
    }

    /// `sum |c|^2 / M`.
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.size() as f64
    }

    /// Unit-modulus rotations `u` with `u * M = M`, identity first.
    ///
    /// Blind estimation can only recover the channel up to one of these.
    pub fn symmetries(&self) -> Vec<Complex64> {
        let c0 = self.points[0];
        let mut out = vec![Complex64::new(1.0, 0.0)];
        for &c in &self.points[1..] {
            let u = c / c0;
            if (u.norm() - 1.0).abs() > 1e-12 {
                continue;
            }
            let closed = self
                .points
                .iter()
                .all(|&p| self.points.iter().any(|&q| (u * p - q).norm() < 1e-9));
            if closed && !out.iter().any(|&v| (v - u).norm() < 1e-9) {
                out.push(u);
            }
        }
        out
    }

    /// Index of the point closest to `z`.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Permutation `perm[i] = index of u * points[i]`, for a symmetry `u`.
    pub fn rotation_permutation(&self, u: Complex64) -> Vec<usize> {
        self.points.iter().map(|&p| self.nearest(u * p)).collect()
    }

    /// Concatenated bit labels of a symbol-index sequence.
    pub fn bits_of(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().flat_map(|&i| self.bit_labels[i].iter().copied()).collect()
    }
}

/// Power delay profile of the random channel taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pdp {
    /// Every tap `CN(0, 1)` before normalization.
    Uniform,
    /// Tap `l` has variance `exp(-l)` before normalization.
    Exponential,
}

impl std::str::FromStr for Pdp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Pdp::Uniform),
            "exponential" | "exp" => Ok(Pdp::Exponential),
            other => Err(Error::InvalidParameter(format!("unknown pdp {other:?}"))),
        }
    }
}

/// Channel taps plus noise variance, the parameter vector `(h_0, ..., h_L, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub h: Vec<Complex64>,
    pub sigma2: f64,
}

impl ChannelParams {
    pub fn new(h: Vec<Complex64>, sigma2: f64) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::InvalidParameter("channel needs at least one tap".into()));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(ChannelParams { h, sigma2 })
    }

    /// Channel memory `L`.
    pub fn memory(&self) -> usize {
        self.h.len() - 1
    }

    /// Number of scalar parameters `L + 2`; index `L + 1` is `sigma2`.
    pub fn num_params(&self) -> usize {
        self.h.len() + 1
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// One simulated block.
#[derive(Debug, Clone)]
pub struct TransmissionBlock {
    pub symbol_indices: Vec<usize>,
    pub symbols: Vec<Complex64>,
    pub bits: Vec<u8>,
    pub y: Vec<Complex64>,
    pub truth: ChannelParams,
}

/// Matched-filter statistics `x = H^H y` and the band of `G = H^H H`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedStats {
    pub x: Vec<Complex64>,
    /// `band[n * (L + 1) + d] = G[n][n - d]` for `0 <= d <= L`, zero when `n < d`.
    band: Vec<Complex64>,
    memory: usize,
}

impl MatchedStats {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    /// `G[n][m]`, Hermitian-extended and zero outside the band.
    pub fn g(&self, n: usize, m: usize) -> Complex64 {
        if n >= m {
            let d = n - m;
            if d > self.memory {
                Complex64::new(0.0, 0.0)
            } else {
                self.band[n * (self.memory + 1) + d]
            }
        } else {
            self.g(m, n).conj()
        }
    }

    /// `G[n][n - d]` for `d <= min(L, n)`.
    #[inline]
    pub fn lower(&self, n: usize, d: usize) -> Complex64 {
        self.band[n * (self.memory + 1) + d]
    }
}

/// Draws unit-norm channel taps with `L + 1` entries.
pub fn sample_channel<R: Rng + ?Sized>(memory: usize, pdp: Pdp, rng: &mut R) -> Vec<Complex64> {
    let mut h: Vec<Complex64> = (0..=memory)
        .map(|l| {
            let var = match pdp {
                Pdp::Uniform => 1.0,
                Pdp::Exponential => (-(l as f64)).exp(),
            };
            complex_normal(rng, var)
        })
        .collect();
    let norm = h.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt();
    for t in &mut h {
        *t /= norm;
    }
    h
}

/// One `CN(0, var)` sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Receiver SNR in dB, `10 log10(sum |c|^2 / (M sigma2))`.
pub fn snr_db(constellation: &Constellation, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(10.0 * (constellation.mean_energy() / sigma2).log10())
}

/// Noise variance that yields the requested SNR.
pub fn sigma2_for_snr(constellation: &Constellation, snr_db: f64) -> f64 {
    constellation.mean_energy() / 10f64.powf(snr_db / 10.0)
}

/// Uniformly random symbol indices.
pub fn random_symbols<R: Rng + ?Sized>(constellation: &Constellation, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..constellation.size())).collect()
}

/// Noiseless channel output `H c` of length `N + L`.
pub fn convolve(c: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    if c.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); c.len() + h.len() - 1];
    for (n, &cn) in c.iter().enumerate() {
        for (l, &hl) in h.iter().enumerate() {
            out[n + l] += hl * cn;
        }
    }
    out
}

/// `y = H c + w` with `w_n ~ CN(0, sigma2)`.
pub fn transmit<R: Rng + ?Sized>(c: &[Complex64], params: &ChannelParams, rng: &mut R) -> Vec<Complex64> {
    let mut y = convolve(c, &params.h);
    for v in &mut y {
        *v += complex_normal(rng, params.sigma2);
    }
    y
}

/// Draws symbols and noise for one block over a given channel.
pub fn generate_block<R: Rng + ?Sized>(
    constellation: &Constellation,
    params: &ChannelParams,
    n: usize,
    symbol_rng: &mut R,
    noise_rng: &mut R,
) -> TransmissionBlock {
    let symbol_indices = random_symbols(constellation, n, symbol_rng);
    let symbols: Vec<Complex64> = symbol_indices.iter().map(|&i| constellation.points[i]).collect();
    let bits = constellation.bits_of(&symbol_indices);
    let y = transmit(&symbols, params, noise_rng);
    TransmissionBlock { symbol_indices, symbols, bits, y, truth: params.clone() }
}

/// Matched filter `x = H^H y` and channel autocorrelation `G = H^H H`.
///
/// `y` must hold `N + L` samples where `L + 1 = h.len()`.
pub fn matched_stats(y: &[Complex64], h: &[Complex64]) -> MatchedStats {
    let memory = h.len() - 1;
    let n_sym = y.len().saturating_sub(memory);
    let x: Vec<Complex64> = (0..n_sym)
        .map(|n| h.iter().enumerate().map(|(l, hl)| hl.conj() * y[n + l]).sum())
        .collect();
    // Every column of H holds all L + 1 taps, so G is Toeplitz:
    // G[n][n - d] = sum_j conj(h_j) h_{j + d}.
    let autocorr: Vec<Complex64> = (0..=memory)
        .map(|d| (0..=memory - d).map(|j| h[j].conj() * h[j + d]).sum())
        .collect();
    let mut band = vec![Complex64::new(0.0, 0.0); n_sym * (memory + 1)];
    for n in 0..n_sym {
        for d in 0..=memory.min(n) {
            band[n * (memory + 1) + d] = autocorr[d];
        }
    }
    MatchedStats { x, band, memory }
}
