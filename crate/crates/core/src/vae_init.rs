//! Variational linear-equalizer (VAE-LE) initializer.
//!
//! The posterior family is restricted to a Gaussian soft demapper applied to
//! the output of an FIR equalizer `phi`:
//! `q_n(c) ∝ exp(-|c_hat_n - c|^2 / s)` with `c_hat_n = sum_j phi_j y_{n + p + D - j}`,
//! where `D = L_LE / 2` centres the equalizer and `p = ceil(L / 2)` is the
//! delay of the impulse the channel estimate starts from. The ELBO
//!
//! `-N log(M pi sigma2) - E|y - H c|^2 / sigma2 + sum_n H(q_n)`
//!
//! is ascended jointly over `phi`, `h`, `log sigma2` and `log s` with Adam,
//! using analytic (Wirtinger) gradients.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::{convolve, ChannelParams, Constellation};
use crate::em::SIGMA2_FLOOR;
use crate::error::{Error, Result};
use crate::graph::{Beliefs, PosteriorApprox};
use crate::math::log_sum_exp;
use crate::optim::Adam;

/// Demapper temperature the optimization starts from.
pub const SIGMA2_VAE_INIT: f64 = 1.0;

/// Equalizer, channel estimate and demapper temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeState {
    pub phi: Vec<Complex64>,
    pub theta_hat: ChannelParams,
    pub sigma2_vae: f64,
}

/// Adam settings for [`vae_le_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Learning rate per ascent step; its length is the step count.
    pub lr_schedule: Vec<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { lr_schedule: vec![0.1; 10] }
    }
}

impl VaeConfig {
    /// Three steps with growing rates, converging faster than a constant rate.
    pub fn tuned() -> Self {
        VaeConfig { lr_schedule: vec![0.1, 0.16, 0.3] }
    }
}

/// Outcome of a VAE-LE run.
#[derive(Debug, Clone)]
pub struct VaeOutput {
    pub state: VaeState,
    /// ELBO before the first and after every ascent step.
    pub elbo_trace: Vec<f64>,
}

/// Tap index of the impulse the channel estimate starts from.
pub fn impulse_delay(memory: usize) -> usize {
    memory.div_ceil(2)
}

/// Equalizer length minus one used for channel memory `L`.
pub fn equalizer_order(memory: usize) -> usize {
    2 * memory
}

/// Equalized symbol estimates `c_hat` (length `N`).
fn equalize(phi: &[Complex64], y: &[Complex64], n_sym: usize, offset: usize) -> Vec<Complex64> {
    (0..n_sym)
        .map(|n| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &f) in phi.iter().enumerate() {
                if let Some(k) = (n + offset).checked_sub(j) {
                    if k < y.len() {
                        acc += f * y[k];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Log-probabilities of the Gaussian soft demapper, row-major `N x M`.
fn demapper_log_probs(c_hat: &[Complex64], sigma2_vae: f64, constellation: &Constellation) -> Vec<f64> {
    let m = constellation.size();
    let mut out = Vec::with_capacity(c_hat.len() * m);
    let mut z = vec![0.0; m];
    for &ch in c_hat {
        for (zi, &c) in z.iter_mut().zip(&constellation.points) {
            *zi = -(ch - c).norm_sqr() / sigma2_vae;
        }
        let lse = log_sum_exp(&z);
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

/// Demapper output for the equalizer `phi` on `y` (channel memory `L`).
pub fn vae_q(
    phi: &[Complex64],
    sigma2_vae: f64,
    y: &[Complex64],
    memory: usize,
    constellation: &Constellation,
) -> Result<PosteriorApprox> {
    if !(sigma2_vae > 0.0) {
        return Err(Error::InvalidParameter(format!("demapper variance must be positive, got {sigma2_vae}")));
    }
    let n_sym = y
        .len()
        .checked_sub(memory)
        .ok_or_else(|| Error::ShapeMismatch("observation shorter than the channel memory".into()))?;
    let offset = impulse_delay(memory) + phi.len().saturating_sub(1) / 2;
    let c_hat = equalize(phi, y, n_sym, offset);
    let logp = demapper_log_probs(&c_hat, sigma2_vae, constellation);
    Ok(Beliefs::from_log_weights(n_sym, constellation.size(), &logp))
}

/// Expected squared residual `E|y - H c|^2` under a factorized `q` with
/// means `mean` and variances `var`.
fn factorized_residual(y: &[Complex64], h: &[Complex64], mean: &[Complex64], var_sum: f64) -> (f64, Vec<Complex64>) {
    let hm = convolve(mean, h);
    let r: Vec<Complex64> = y.iter().zip(&hm).map(|(a, b)| a - b).collect();
    let h2: f64 = h.iter().map(|t| t.norm_sqr()).sum();
    (r.iter().map(|v| v.norm_sqr()).sum::<f64>() + h2 * var_sum, r)
}

/// ELBO of a factorized `q` for parameters `theta`.
pub fn vae_elbo(q: &PosteriorApprox, theta: &ChannelParams, y: &[Complex64], constellation: &Constellation) -> f64 {
    let (mean, energy) = q.symbol_moments(constellation);
    let var_sum: f64 = mean.iter().zip(&energy).map(|(m, e)| e - m.norm_sqr()).sum();
    let (r, _) = factorized_residual(y, &theta.h, &mean, var_sum);
    let n = q.num_symbols() as f64;
    -n * (constellation.size() as f64 * PI * theta.sigma2).ln() - r / theta.sigma2 + q.entropy()
}

/// The ELBO as a function of the flat real parameter vector
/// `[Re phi, Im phi, Re h, Im h, log sigma2, log s]`.
#[derive(Debug, Clone)]
pub struct VaeObjective<'a> {
    y: &'a [Complex64],
    constellation: &'a Constellation,
    memory: usize,
    taps_le: usize,
    n_sym: usize,
    offset: usize,
}

impl<'a> VaeObjective<'a> {
    pub fn new(y: &'a [Complex64], memory: usize, constellation: &'a Constellation) -> Result<Self> {
        let n_sym = y
            .len()
            .checked_sub(memory)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::ShapeMismatch("observation shorter than the channel memory".into()))?;
        let taps_le = equalizer_order(memory) + 1;
        let offset = impulse_delay(memory) + equalizer_order(memory) / 2;
        Ok(VaeObjective { y, constellation, memory, taps_le, n_sym, offset })
    }

    pub fn dim(&self) -> usize {
        2 * self.taps_le + 2 * (self.memory + 1) + 2
    }

    /// Impulse equalizer, unit demapper temperature, the given taps and the
    /// noise variance that maximizes the ELBO for them.
    pub fn initial_params(&self, h_init: &[Complex64]) -> Result<Vec<f64>> {
        if h_init.len() != self.memory + 1 {
            return Err(Error::ShapeMismatch("initial taps do not match the channel memory".into()));
        }
        let mut phi = vec![Complex64::new(0.0, 0.0); self.taps_le];
        phi[equalizer_order(self.memory) / 2] = Complex64::new(1.0, 0.0);
        let mut v = self.pack(&phi, h_init, 1.0, SIGMA2_VAE_INIT);
        let (q_mean, var_sum, _) = self.posterior(&v);
        let (r, _) = factorized_residual(self.y, h_init, &q_mean, var_sum);
        let k = 2 * self.taps_le + 2 * (self.memory + 1);
        v[k] = (r / self.n_sym as f64).max(SIGMA2_FLOOR).ln();
        Ok(v)
    }

    fn pack(&self, phi: &[Complex64], h: &[Complex64], sigma2: f64, sigma2_vae: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(phi.iter().map(|c| c.re));
        v.extend(phi.iter().map(|c| c.im));
        v.extend(h.iter().map(|c| c.re));
        v.extend(h.iter().map(|c| c.im));
        v.push(sigma2.ln());
        v.push(sigma2_vae.ln());
        v
    }

    /// Splits the flat vector into its parts.
    pub fn unpack(&self, v: &[f64]) -> VaeState {
        let k = self.taps_le;
        let t = self.memory + 1;
        let phi = (0..k).map(|j| Complex64::new(v[j], v[k + j])).collect();
        let h = (0..t).map(|j| Complex64::new(v[2 * k + j], v[2 * k + t + j])).collect();
        VaeState {
            phi,
            theta_hat: ChannelParams { h, sigma2: v[2 * k + 2 * t].exp() },
            sigma2_vae: v[2 * k + 2 * t + 1].exp(),
        }
    }

    fn posterior(&self, v: &[f64]) -> (Vec<Complex64>, f64, Vec<f64>) {
        let s = self.unpack(v);
        let c_hat = equalize(&s.phi, self.y, self.n_sym, self.offset);
        let logp = demapper_log_probs(&c_hat, s.sigma2_vae, self.constellation);
        let m = self.constellation.size();
        let mut mean = Vec::with_capacity(self.n_sym);
        let mut var_sum = 0.0;
        for row in logp.chunks(m) {
            let mut mu = Complex64::new(0.0, 0.0);
            let mut e = 0.0;
            for (&lp, &c) in row.iter().zip(&self.constellation.points) {
                let p = lp.exp();
                mu += c * p;
                e += p * c.norm_sqr();
            }
            var_sum += e - mu.norm_sqr();
            mean.push(mu);
        }
        (mean, var_sum, logp)
    }

    /// ELBO at `v`.
    pub fn value(&self, v: &[f64]) -> f64 {
        self.value_and_gradient(v).0
    }

    /// ELBO and its gradient with respect to every entry of `v`.
    pub fn value_and_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let st = self.unpack(v);
        let m = self.constellation.size();
        let pts = &self.constellation.points;
        let h = &st.theta_hat.h;
        let sigma2 = st.theta_hat.sigma2;
        let s = st.sigma2_vae;
        let n = self.n_sym;
        let l = self.memory;

        let c_hat = equalize(&st.phi, self.y, n, self.offset);
        let logp = demapper_log_probs(&c_hat, s, self.constellation);
        let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let mut mean = vec![Complex64::new(0.0, 0.0); n];
        let mut var_sum = 0.0;
        let mut entropy = 0.0;
        for k in 0..n {
            let mut e = 0.0;
            for i in 0..m {
                let p = probs[k * m + i];
                mean[k] += pts[i] * p;
                e += p * pts[i].norm_sqr();
                entropy -= p * logp[k * m + i];
            }
            var_sum += e - mean[k].norm_sqr();
        }
        let (r, resid) = factorized_residual(self.y, h, &mean, var_sum);
        let h2: f64 = h.iter().map(|t| t.norm_sqr()).sum();
        let elbo = -(n as f64) * (m as f64 * PI * sigma2).ln() - r / sigma2 + entropy;

        let mut grad = vec![0.0; v.len()];
        let kle = self.taps_le;
        let t = l + 1;

        // Channel taps: dR/dconj(h_l) = -sum_n conj(m_n) r_{n+l} + h_l V.
        for ell in 0..t {
            let mut g = h[ell] * var_sum;
            for k in 0..n {
                g -= mean[k].conj() * resid[k + ell];
            }
            grad[2 * kle + ell] = -2.0 * g.re / sigma2;
            grad[2 * kle + t + ell] = -2.0 * g.im / sigma2;
        }
        grad[2 * kle + 2 * t] = -(n as f64) + r / sigma2;

        // Demapper probabilities, then back through the softmax.
        let mut d_chat = vec![Complex64::new(0.0, 0.0); n];
        let mut d_log_s = 0.0;
        let mut dq = vec![0.0; m];
        for k in 0..n {
            // dR/dconj(m_n) = -(H^H r)_n - |h|^2 m_n.
            let mut a = -mean[k] * h2;
            for ell in 0..t {
                a -= h[ell].conj() * resid[k + ell];
            }
            let row_p = &probs[k * m..(k + 1) * m];
            let row_lp = &logp[k * m..(k + 1) * m];
            let mut avg = 0.0;
            for i in 0..m {
                dq[i] = -(2.0 * (a * pts[i].conj()).re + h2 * pts[i].norm_sqr()) / sigma2 - row_lp[i];
                avg += row_p[i] * dq[i];
            }
            for i in 0..m {
                let dz = row_p[i] * (dq[i] - avg);
                let diff = c_hat[k] - pts[i];
                d_chat[k] -= diff * (dz / s);
                d_log_s += dz * diff.norm_sqr() / s;
            }
        }
        grad[2 * kle + 2 * t + 1] = d_log_s;
        for j in 0..kle {
            let mut g = Complex64::new(0.0, 0.0);
            for (k, &dc) in d_chat.iter().enumerate() {
                if let Some(idx) = (k + self.offset).checked_sub(j) {
                    if idx < self.y.len() {
                        g += dc * self.y[idx].conj();
                    }
                }
            }
            grad[j] = 2.0 * g.re;
            grad[kle + j] = 2.0 * g.im;
        }
        (elbo, grad)
    }

    /// Demapper output at `v`.
    pub fn q(&self, v: &[f64]) -> PosteriorApprox {
        let (_, _, logp) = self.posterior(v);
        Beliefs::from_log_weights(self.n_sym, self.constellation.size(), &logp)
    }
}

/// Runs VAE-LE from the impulse channel estimate `e_{ceil(L/2)}`.
/// The impulse estimate VAE-LE starts from, with its closed-form noise
/// variance. Used directly as the blind EMBP initialization.
pub fn impulse_start(y: &[Complex64], memory: usize, constellation: &Constellation) -> Result<ChannelParams> {
    let obj = VaeObjective::new(y, memory, constellation)?;
    let mut h = vec![Complex64::new(0.0, 0.0); memory + 1];
    h[impulse_delay(memory)] = Complex64::new(1.0, 0.0);
    let mut theta = obj.unpack(&obj.initial_params(&h)?).theta_hat;
    theta.sigma2 = theta.sigma2.max(SIGMA2_FLOOR);
    Ok(theta)
}

pub fn vae_le_run(y: &[Complex64], memory: usize, constellation: &Constellation, config: &VaeConfig) -> Result<VaeOutput> {
    let mut h = vec![Complex64::new(0.0, 0.0); memory + 1];
    h[impulse_delay(memory)] = Complex64::new(1.0, 0.0);
    vae_le_run_from(y, &h, constellation, config)
}

/// Runs VAE-LE from a given channel estimate.
pub fn vae_le_run_from(
    y: &[Complex64],
    h_init: &[Complex64],
    constellation: &Constellation,
    config: &VaeConfig,
) -> Result<VaeOutput> {
    if config.lr_schedule.is_empty() {
        return Err(Error::InvalidParameter("VAE-LE needs at least one step".into()));
    }
    let memory = h_init
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidParameter("empty channel estimate".into()))?;
    let obj = VaeObjective::new(y, memory, constellation)?;
    let mut v = obj.initial_params(h_init)?;
    let mut adam = Adam::new(v.len());
    let mut trace = Vec::with_capacity(config.lr_schedule.len() + 1);
    for (step, &lr) in config.lr_schedule.iter().enumerate() {
        let (elbo, grad) = obj.value_and_gradient(&v);
        if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure { iteration: step, context: "VAE-LE ELBO not finite".into() });
        }
        trace.push(elbo);
        adam.step(&mut v, &grad, lr, true);
    }
    let last = obj.value(&v);
    if !last.is_finite() {
        return Err(Error::NumericalFailure {
            iteration: config.lr_schedule.len(),
            context: "VAE-LE ELBO not finite".into(),
        });
    }
    trace.push(last);
    let mut state = obj.unpack(&v);
    state.theta_hat.sigma2 = state.theta_hat.sigma2.max(SIGMA2_FLOOR);
    Ok(VaeOutput { state, elbo_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::bcjr_map;
    use crate::channel::{random_symbols, sample_channel, transmit, Pdp};
    use crate::em::{q_function, Moments};
    use crate::rng::derive_rng;

    fn block(seed: u64, n: usize, l: usize, con: &Constellation, sigma2: f64) -> (Vec<Complex64>, Vec<usize>, ChannelParams) {
        let mut rng = derive_rng(seed, &[]);
        let h = sample_channel(l, Pdp::Uniform, &mut rng);
        let p = ChannelParams::new(h, sigma2).unwrap();
        let idx = random_symbols(con, n, &mut rng);
        let c: Vec<Complex64> = idx.iter().map(|&i| con.points[i]).collect();
        (transmit(&c, &p, &mut rng), idx, p)
    }

    #[test]
    fn demapper_limits() {
        let con = Constellation::qpsk();
        let (y, _, _) = block(1, 12, 2, &con, 0.1);
        let phi = vec![Complex64::new(0.3, -0.2); 5];
        let q = vae_q(&phi, 1e12, &y, 2, &con).unwrap();
        assert!(q.as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-9));
        let q = vae_q(&phi, 0.7, &y, 2, &con).unwrap();
        for row in q.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(vae_q(&phi, 0.0, &y, 2, &con).is_err());
    }

    #[test]
    fn identity_channel_impulse_equalizer_is_exact() {
        let con = Constellation::qpsk();
        let idx: Vec<usize> = (0..10).map(|k| (3 * k + 1) % 4).collect();
        let y: Vec<Complex64> = idx.iter().map(|&i| con.points[i]).collect();
        let q = vae_q(&[Complex64::new(1.0, 0.0)], 1e-3, &y, 0, &con).unwrap();
        assert_eq!(q.argmax(), idx);
        assert!(q.as_slice().iter().all(|&p| p < 1e-100 || p > 1.0 - 1e-12));
    }

    #[test]
    fn impulse_initialization_aligns_with_delayed_channel() {
        // With h = e_p the initial equalizer output is exactly c.
        let con = Constellation::bpsk();
        for l in 0..5 {
            let p = impulse_delay(l);
            let mut h = vec![Complex64::new(0.0, 0.0); l + 1];
            h[p] = Complex64::new(1.0, 0.0);
            let idx: Vec<usize> = (0..9).map(|k| (k * k) % 2).collect();
            let c: Vec<Complex64> = idx.iter().map(|&i| con.points[i]).collect();
            let y = convolve(&c, &h);
            let obj = VaeObjective::new(&y, l, &con).unwrap();
            let mut v = obj.initial_params(&h).unwrap();
            let last = v.len() - 1;
            v[last] = (1e-3f64).ln();
            assert_eq!(obj.q(&v).argmax(), idx, "L = {l}");
        }
    }

    #[test]
    fn elbo_routes_agree() {
        let con = Constellation::qpsk();
        let (y, _, p) = block(2, 9, 2, &con, 0.3);
        let obj = VaeObjective::new(&y, 2, &con).unwrap();
        let mut v = obj.initial_params(&p.h).unwrap();
        let mut rng = derive_rng(20, &[]);
        for x in v.iter_mut() {
            *x += 0.1 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
        }
        let st = obj.unpack(&v);
        let q = obj.q(&v);
        let a = obj.value(&v);
        let b = vae_elbo(&q, &st.theta_hat, &y, &con);
        let c = q_function(&st.theta_hat, &Moments::from_beliefs(&q, &con, 2), &y, &con) + q.entropy();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        assert!((a - c).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn point_mass_noiseless_elbo() {
        let con = Constellation::qpsk();
        let mut rng = derive_rng(3, &[]);
        let h = sample_channel(2, Pdp::Uniform, &mut rng);
        let idx = random_symbols(&con, 7, &mut rng);
        let c: Vec<Complex64> = idx.iter().map(|&i| con.points[i]).collect();
        let y = convolve(&c, &h);
        let theta = ChannelParams::new(h, 0.2).unwrap();
        let q = Beliefs::point_mass(&idx, 4);
        let expect = -7.0 * (4.0 * PI * 0.2f64).ln();
        assert!((vae_elbo(&q, &theta, &y, &con) - expect).abs() < 1e-10);
    }

    #[test]
    fn elbo_bounded_by_evidence_and_tight_for_exact_memoryless() {
        let con = Constellation::bpsk();
        let (y, _, p) = block(4, 8, 2, &con, 0.5);
        let ev = bcjr_map(&y, &p, &con).unwrap().log_evidence;
        let q = vae_q(&[Complex64::new(0.9, 0.1)], 0.8, &y, 2, &con).unwrap();
        assert!(vae_elbo(&q, &p, &y, &con) <= ev + 1e-9);
        let (y0, _, p0) = block(5, 8, 0, &con, 0.5);
        let exact = bcjr_map(&y0, &p0, &con).unwrap();
        assert!((vae_elbo(&exact.beliefs, &p0, &y0, &con) - exact.log_evidence).abs() < 1e-8);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        for (seed, con, l) in [(6, Constellation::bpsk(), 1), (7, Constellation::qpsk(), 2), (8, Constellation::qpsk(), 0)] {
            let (y, _, p) = block(seed, 10, l, &con, 0.2);
            let obj = VaeObjective::new(&y, l, &con).unwrap();
            let mut v = obj.initial_params(&p.h).unwrap();
            let mut rng = derive_rng(seed + 100, &[]);
            for x in v.iter_mut() {
                *x += 0.2 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
            let (_, g) = obj.value_and_gradient(&v);
            for i in 0..v.len() {
                let eps = 1e-5;
                let mut a = v.clone();
                a[i] += eps;
                let mut b = v.clone();
                b[i] -= eps;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * eps);
                let scale = fd.abs().max(g[i].abs()).max(1.0);
                assert!((fd - g[i]).abs() / scale < 1e-5, "param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn ascent_increases_elbo() {
        let con = Constellation::bpsk();
        let mut improved = 0;
        for seed in 0..20 {
            let (y, _, _) = block(200 + seed, 100, 5, &con, 0.1);
            let out = vae_le_run(&y, 5, &con, &VaeConfig::default()).unwrap();
            assert_eq!(out.elbo_trace.len(), 11);
            if out.elbo_trace.last() > out.elbo_trace.first() {
                improved += 1;
            }
        }
        assert!(improved >= 19);
    }
}
