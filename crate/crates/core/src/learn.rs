//! Offline tuning of BP momentum weights and EM update schedules.
//!
//! The unrolled detector has one BP momentum weight per iteration and one EM
//! weight per parameter and iteration. They are tuned on random blocks with
//! simultaneous-perturbation stochastic approximation (SPSA): two loss
//! evaluations per step on a shared batch, Rademacher perturbations, and
//! Adam moment updates. An L1 penalty on the `K'` smallest EM weights drives
//! them toward zero; after training those entries are masked so their updates
//! are never computed.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_block, sample_channel, sigma2_for_snr, ChannelParams, Constellation, Modulation, Pdp, TransmissionBlock};
use crate::em::{default_iterations, embp_run, EmSchedule, EmbpOutput};
use crate::error::{Error, Result};
use crate::metrics::{align_to_truth, bit_penalty_nats, bmd_llrs, squared_error};
use crate::optim::Adam;
use crate::rng::{derive_rng, tag, SimRng};
use crate::vae_init::{vae_le_run, VaeConfig};

/// Current version of the weights file format.
pub const WEIGHTS_VERSION: u32 = 1;

/// Squared error charged to a block whose run failed numerically.
pub const FAILED_BLOCK_SE: f64 = 4.0;

/// Consecutive bad steps that trigger the divergence guard.
const DIVERGENCE_PATIENCE: usize = 50;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean squared channel estimation error.
    Mse,
    /// Negative bit-metric mutual information of the final beliefs.
    NegBmi,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "neg-bmi" | "bmi" => Ok(LossKind::NegBmi),
            other => Err(Error::InvalidParameter(format!("unknown loss {other:?}"))),
        }
    }
}

/// Settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batches: usize,
    pub batch_size: usize,
    pub snr_range_db: [f64; 2],
    pub memory: usize,
    pub iterations: usize,
    /// Number of EM weights left active after pruning.
    pub k_em_target: usize,
    pub step_size: f64,
    pub l1_weight: f64,
    pub perturbation: f64,
    pub seed: u64,
    pub block_len: usize,
    pub modulation: Modulation,
    pub pdp: Pdp,
    pub train_beta_bp: bool,
    pub train_beta_em: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for channel memory `L`, training everything.
    pub fn new(memory: usize) -> Self {
        let iterations = default_iterations(memory);
        TrainConfig {
            loss: LossKind::Mse,
            batches: 200,
            batch_size: 100,
            snr_range_db: [0.0, 12.0],
            memory,
            iterations,
            k_em_target: iterations * (memory + 2),
            step_size: 0.01,
            l1_weight: 0.1,
            perturbation: 0.05,
            seed: 0,
            block_len: 100,
            modulation: Modulation::Bpsk,
            pdp: Pdp::Uniform,
            train_beta_bp: true,
            train_beta_em: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.iterations * (self.memory + 2);
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.block_len == 0 {
            return bad("block_len must be at least 1");
        }
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("snr range must satisfy lo <= hi");
        }
        if self.k_em_target > total {
            return bad("k_em_target exceeds the number of EM weights");
        }
        if !(self.step_size > 0.0 && self.perturbation > 0.0 && self.l1_weight >= 0.0) {
            return bad("step size and perturbation must be positive, l1 weight nonnegative");
        }
        Ok(())
    }

    /// Number of EM weights pruned at the end of training.
    pub fn pruned_count(&self) -> usize {
        self.iterations * (self.memory + 2) - self.k_em_target
    }
}

/// Momentum weights of the unrolled detector plus the pruning mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedWeights {
    pub beta_bp: Vec<f64>,
    /// `T` rows of `L + 2` weights (taps first, noise variance last).
    pub beta_em: Vec<Vec<f64>>,
    /// `true` marks a pruned entry; its weight is zero.
    pub mask: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    version: u32,
    #[serde(rename = "T")]
    iterations: usize,
    #[serde(rename = "L")]
    memory: usize,
    beta_bp: Vec<f64>,
    beta_em: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
}

impl TrainedWeights {
    /// Plain BP updates and the serial schedule: reproduces untrained EMBP.
    pub fn identity(memory: usize, iterations: usize) -> Self {
        let schedule = EmSchedule::serial(memory, iterations);
        TrainedWeights {
            beta_bp: vec![1.0; iterations],
            beta_em: schedule.rows().to_vec(),
            mask: vec![vec![false; memory + 2]; iterations],
        }
    }

    pub fn iterations(&self) -> usize {
        self.beta_bp.len()
    }

    pub fn memory(&self) -> usize {
        self.beta_em.first().map_or(0, |r| r.len().saturating_sub(2))
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.beta_bp.len();
        if t == 0 {
            return Err(Error::ShapeMismatch("weights need at least one iteration".into()));
        }
        if self.beta_em.len() != t || self.mask.len() != t {
            return Err(Error::ShapeMismatch("beta_bp, beta_em and mask differ in length".into()));
        }
        let p = self.beta_em[0].len();
        if p < 2 || self.beta_em.iter().any(|r| r.len() != p) || self.mask.iter().any(|r| r.len() != p) {
            return Err(Error::ShapeMismatch("beta_em/mask rows must all have L + 2 entries".into()));
        }
        let finite = self.beta_bp.iter().chain(self.beta_em.iter().flatten()).all(|w| w.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("weights must be finite".into()));
        }
        let masked_nonzero = self.beta_em.iter().flatten().zip(self.mask.iter().flatten()).any(|(&w, &m)| m && w != 0.0);
        if masked_nonzero {
            return Err(Error::InvalidParameter("masked EM weights must be zero".into()));
        }
        Ok(())
    }

    /// EM schedule with masked entries set to zero.
    pub fn schedule(&self) -> Result<EmSchedule> {
        let rows = self
            .beta_em
            .iter()
            .zip(&self.mask)
            .map(|(r, m)| r.iter().zip(m).map(|(&w, &masked)| if masked { 0.0 } else { w }).collect())
            .collect();
        EmSchedule::custom(rows)
    }

    /// Number of unmasked EM weights.
    pub fn active_em(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| !m).count()
    }

    pub fn to_toml(&self) -> Result<String> {
        self.validate()?;
        let file = WeightsFile {
            version: WEIGHTS_VERSION,
            iterations: self.iterations(),
            memory: self.memory(),
            beta_bp: self.beta_bp.clone(),
            beta_em: self.beta_em.clone(),
            mask: self.mask.iter().map(|r| r.iter().map(|&m| m as u8).collect()).collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: WeightsFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.version != WEIGHTS_VERSION {
            return Err(Error::Parse(format!("unsupported weights version {}", file.version)));
        }
        let mask = file
            .mask
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&m| match m {
                        0 => Ok(false),
                        1 => Ok(true),
                        v => Err(Error::Parse(format!("mask entries must be 0 or 1, got {v}"))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let w = TrainedWeights { beta_bp: file.beta_bp, beta_em: file.beta_em, mask };
        w.validate()?;
        if w.iterations() != file.iterations || w.memory() != file.memory {
            return Err(Error::Parse("T or L does not match the weight arrays".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// EMBP bound to a fixed set of weights.
#[derive(Debug, Clone)]
pub struct WeightedEmbp {
    pub schedule: EmSchedule,
    pub beta_bp: Vec<f64>,
}

impl WeightedEmbp {
    pub fn run(&self, y: &[Complex64], init: &ChannelParams, constellation: &Constellation) -> Result<EmbpOutput> {
        embp_run(y, init, constellation, &self.schedule, &self.beta_bp)
    }
}

/// Binds trained weights into an EMBP runner; masked updates are skipped.
pub fn apply_weights(weights: &TrainedWeights) -> Result<WeightedEmbp> {
    weights.validate()?;
    Ok(WeightedEmbp { schedule: weights.schedule()?, beta_bp: weights.beta_bp.clone() })
}

/// One training block with its (weight-independent) initial estimate.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub snr_db: f64,
    pub block: TransmissionBlock,
    /// VAE-LE estimate EMBP starts from; `None` if the initializer failed.
    pub init: Option<ChannelParams>,
}

/// Draws `count` independent blocks: a fresh channel, SNR uniform over the
/// configured range, random symbols and noise, plus the VAE-LE initial
/// estimate. Per-block streams come from `rng`, so the result is a pure
/// function of its state.
pub fn sample_dataset<R: Rng + ?Sized>(config: &TrainConfig, count: usize, rng: &mut R) -> Vec<TrainingSample> {
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let constellation = Constellation::new(config.modulation);
    seeds
        .par_iter()
        .map(|&seed| draw_sample(config, &constellation, seed))
        .collect()
}

fn draw_sample(config: &TrainConfig, constellation: &Constellation, seed: u64) -> TrainingSample {
    let [lo, hi] = config.snr_range_db;
    let snr_db = if hi > lo { derive_rng(seed, &[tag::SNR]).random_range(lo..hi) } else { lo };
    let h = sample_channel(config.memory, config.pdp, &mut derive_rng(seed, &[tag::CHANNEL]));
    let params = ChannelParams { h, sigma2: sigma2_for_snr(constellation, snr_db) };
    let block = generate_block(
        constellation,
        &params,
        config.block_len,
        &mut derive_rng(seed, &[tag::SYMBOLS]),
        &mut derive_rng(seed, &[tag::NOISE]),
    );
    let init = vae_le_run(&block.y, config.memory, constellation, &VaeConfig::default())
        .ok()
        .map(|o| o.state.theta_hat);
    TrainingSample { snr_db, block, init }
}

/// Per-block loss contribution: squared error, or BMI penalty (nats, bits).
fn block_loss(runner: &WeightedEmbp, sample: &TrainingSample, loss: LossKind, constellation: &Constellation) -> (f64, usize) {
    let truth = &sample.block.truth;
    let bits = sample.block.bits.len();
    let failed = match loss {
        LossKind::Mse => (FAILED_BLOCK_SE, 0),
        LossKind::NegBmi => (bits as f64 * std::f64::consts::LN_2, bits),
    };
    let Some(init) = &sample.init else { return failed };
    let Ok(out) = runner.run(&sample.block.y, init, constellation) else { return failed };
    let (h, beliefs) = align_to_truth(&out.params.h, &out.beliefs, &truth.h, constellation);
    match loss {
        LossKind::Mse => (squared_error(&h, &truth.h).unwrap_or(FAILED_BLOCK_SE), 0),
        LossKind::NegBmi => (bit_penalty_nats(&bmd_llrs(&beliefs, constellation), &sample.block.bits), bits),
    }
}

/// Mean squared error of the estimates, or the negative BMI of the final
/// beliefs, over a batch. Blocks whose run fails score the worst value
/// (squared error [`FAILED_BLOCK_SE`], or zero BMI).
pub fn batch_loss(weights: &TrainedWeights, batch: &[TrainingSample], loss: LossKind, constellation: &Constellation) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let runner = apply_weights(weights)?;
    let parts: Vec<(f64, usize)> = batch.par_iter().map(|s| block_loss(&runner, s, loss, constellation)).collect();
    let total: f64 = parts.iter().map(|p| p.0).sum();
    Ok(match loss {
        LossKind::Mse => total / batch.len() as f64,
        LossKind::NegBmi => {
            let bits: usize = parts.iter().map(|p| p.1).sum();
            let m = constellation.bits_per_symbol() as f64;
            -(m - m * total / (bits as f64 * std::f64::consts::LN_2))
        }
    })
}

/// Sum of the `k` smallest `|beta_em|` entries.
pub fn l1_smallest(beta_em: &[Vec<f64>], k: usize) -> f64 {
    let mut mags: Vec<f64> = beta_em.iter().flatten().map(|w| w.abs()).collect();
    mags.sort_by(f64::total_cmp);
    mags.iter().take(k).sum()
}

/// Flat indices (row-major) of the `k` smallest `|beta_em|` entries; ties
/// resolve to the earlier index.
fn smallest_indices(beta_em: &[Vec<f64>], k: usize) -> Vec<usize> {
    let flat: Vec<f64> = beta_em.iter().flatten().map(|w| w.abs()).collect();
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Outcome of [`train_weights`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: TrainedWeights,
    /// Mean of the two perturbed objective values per step.
    pub loss_trace: Vec<f64>,
}

/// Layout of the trainable vector: optional BP weights, then optional EM weights.
struct Layout {
    iterations: usize,
    params: usize,
    bp: bool,
    em: bool,
}

impl Layout {
    fn dim(&self) -> usize {
        (if self.bp { self.iterations } else { 0 }) + if self.em { self.iterations * self.params } else { 0 }
    }

    fn pack(&self, w: &TrainedWeights) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        if self.bp {
            v.extend(&w.beta_bp);
        }
        if self.em {
            v.extend(w.beta_em.iter().flatten());
        }
        v
    }

    fn unpack(&self, v: &[f64], base: &TrainedWeights) -> TrainedWeights {
        let mut w = base.clone();
        let mut k = 0;
        if self.bp {
            w.beta_bp.copy_from_slice(&v[..self.iterations]);
            k = self.iterations;
        }
        if self.em {
            for row in &mut w.beta_em {
                row.copy_from_slice(&v[k..k + self.params]);
                k += self.params;
            }
        }
        w
    }
}

/// Tunes the weights with SPSA + Adam, starting from plain BP updates and
/// the serial schedule. `K'` grows linearly to [`TrainConfig::pruned_count`]
/// over the run; the final `K'` smallest EM weights are then zeroed and masked.
pub fn train_weights(config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let constellation = Constellation::new(config.modulation);
    let layout = Layout {
        iterations: config.iterations,
        params: config.memory + 2,
        bp: config.train_beta_bp,
        em: config.train_beta_em,
    };
    let pruned = config.pruned_count();
    let mut weights = TrainedWeights::identity(config.memory, config.iterations);
    let mut v = layout.pack(&weights);
    let mut adam = Adam::new(v.len());
    let mut trace = Vec::with_capacity(config.batches);
    let mut reference: Option<f64> = None;
    let mut bad_steps = 0;

    let objective = |w: &TrainedWeights, batch: &[TrainingSample], k: usize| -> Result<f64> {
        Ok(batch_loss(w, batch, config.loss, &constellation)? + config.l1_weight * l1_smallest(&w.beta_em, k))
    };

    for step in 0..config.batches {
        let k_prime = if config.batches == 0 { 0 } else { pruned * (step + 1) / config.batches };
        let mut rng: SimRng = derive_rng(config.seed, &[tag::TRAIN, step as u64]);
        let batch = sample_dataset(config, config.batch_size, &mut rng);
        if v.is_empty() {
            trace.push(objective(&weights, &batch, k_prime)?);
            continue;
        }
        let delta: Vec<f64> = (0..v.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let shifted = |sign: f64| -> Vec<f64> {
            v.iter().zip(&delta).map(|(x, d)| x + sign * config.perturbation * d).collect()
        };
        let plus = objective(&layout.unpack(&shifted(1.0), &weights), &batch, k_prime)?;
        let minus = objective(&layout.unpack(&shifted(-1.0), &weights), &batch, k_prime)?;
        let grad: Vec<f64> = delta.iter().map(|d| (plus - minus) / (2.0 * config.perturbation * d)).collect();
        adam.step(&mut v, &grad, config.step_size, false);

        let value = 0.5 * (plus + minus);
        trace.push(value);
        let f0 = *reference.get_or_insert(value);
        if value > f0 + 9.0 * f0.abs() {
            bad_steps += 1;
            if bad_steps >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence(format!(
                    "objective {value:.4e} above 10x its initial value {f0:.4e} for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            bad_steps = 0;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite weights at step {step}")));
        }
    }

    weights = layout.unpack(&v, &weights);
    let p = config.memory + 2;
    for i in smallest_indices(&weights.beta_em, pruned) {
        weights.beta_em[i / p][i % p] = 0.0;
        weights.mask[i / p][i % p] = true;
    }
    Ok(TrainOutput { weights, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::new(1);
        c.batches = 3;
        c.batch_size = 4;
        c.block_len = 20;
        c.seed = 11;
        c
    }

    #[test]
    fn identity_weights_shape() {
        let w = TrainedWeights::identity(2, 8);
        assert_eq!(w.iterations(), 8);
        assert_eq!(w.memory(), 2);
        assert_eq!(w.schedule().unwrap(), EmSchedule::serial(2, 8));
        assert_eq!(w.active_em(), 32);
    }

    #[test]
    fn weights_round_trip_exactly() {
        let mut w = TrainedWeights::identity(1, 3);
        w.beta_bp = vec![0.1 + 0.2, std::f64::consts::PI, -1.0 / 3.0];
        w.beta_em[1] = vec![1.0e-300, 0.0, 2.0f64.sqrt()];
        w.beta_em[2][0] = 0.0;
        w.mask[2][0] = true;
        let text = w.to_toml().unwrap();
        assert!(text.contains("version = 1"));
        let back = TrainedWeights::from_toml(&text).unwrap();
        assert_eq!(back, w);
        for (a, b) in back.beta_bp.iter().zip(&w.beta_bp) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_weights_are_rejected() {
        let w = TrainedWeights::identity(1, 2);
        let text = w.to_toml().unwrap();
        assert!(TrainedWeights::from_toml(&text.replace("version = 1", "version = 9")).is_err());
        assert!(TrainedWeights::from_toml(&text.replace("T = 2", "T = 3")).is_err());
        let mut bad = w.clone();
        bad.mask[0][0] = true;
        assert!(bad.to_toml().is_err());
    }

    #[test]
    fn smallest_selection() {
        let b = vec![vec![0.5, -0.1, 2.0], vec![0.0, -3.0, 0.1]];
        assert_eq!(smallest_indices(&b, 3), vec![3, 1, 5]);
        assert!((l1_smallest(&b, 3) - 0.2).abs() < 1e-15);
        assert_eq!(l1_smallest(&b, 0), 0.0);
    }

    #[test]
    fn dataset_is_reproducible() {
        let c = small_config();
        let a = sample_dataset(&c, 5, &mut derive_rng(1, &[]));
        let b = sample_dataset(&c, 5, &mut derive_rng(1, &[]));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.block.y, y.block.y);
            assert_eq!(x.snr_db, y.snr_db);
            assert_eq!(x.init, y.init);
            assert_eq!(x.block.y.len(), c.block_len + c.memory);
            assert_eq!(x.block.symbols.len(), c.block_len);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.snr_range_db = [5.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.k_em_target += 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_masks_smallest() {
        let mut c = small_config();
        c.k_em_target = c.iterations * 3 - 4;
        let a = train_weights(&c).unwrap();
        let b = train_weights(&c).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.loss_trace.len(), 3);
        let w = &a.weights;
        assert_eq!(w.active_em(), c.k_em_target);
        let masked_max = w.beta_em.iter().flatten().zip(w.mask.iter().flatten()).filter(|(_, &m)| m).count();
        assert_eq!(masked_max, 4);
        assert!(w.beta_em.iter().flatten().zip(w.mask.iter().flatten()).all(|(&x, &m)| !m || x == 0.0));
    }
}
