//! Monte-Carlo drivers that produce CSV tables.
//!
//! Every driver walks an SNR grid and simulates `blocks` independent blocks
//! per grid point. Block `b` uses the same channel and symbols at every SNR
//! (common random numbers); only the noise stream depends on the grid point.
//! Blocks run in parallel and are reduced in index order, so a table is a
//! pure function of the configuration.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bcjr_map, dd_map_estimate, ml_pilot_estimate, PilotConfig};
use crate::channel::{
    complex_normal, generate_block, sample_channel, sigma2_for_snr, ChannelParams, Constellation, Modulation, Pdp,
    TransmissionBlock,
};
use crate::em::{default_iterations, embp_run, EmSchedule, EmbpOutput};
use crate::error::{Error, Result};
use crate::graph::{bp_detect, Beliefs};
use crate::learn::{apply_weights, TrainedWeights};
use crate::metrics::{align_to_truth, bit_errors, bmd_llrs, order_stats, squared_error};
use crate::rng::{derive_rng, tag};
use crate::vae_init::{impulse_start, vae_elbo, vae_le_run, vae_le_run_from, vae_q, VaeConfig, VaeOutput};

/// The three-tap channel used for the amplitude scan.
pub fn surrogate_channel() -> Vec<Complex64> {
    vec![Complex64::new(0.3, -0.3), Complex64::new(0.6, -0.1), Complex64::new(0.6, -0.3)]
}

/// Settings shared by all drivers. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Symbols per block.
    pub block_len: usize,
    /// Channel memory `L`, ignored when `channel` is given.
    pub memory: usize,
    pub modulation: Modulation,
    pub pdp: Pdp,
    /// Fixed channel taps as `[re, im]` pairs instead of random channels.
    pub channel: Option<Vec<[f64; 2]>>,
    pub snr_db: Vec<f64>,
    /// Blocks per grid point.
    pub blocks: usize,
    pub seed: u64,
    /// EM/BP iterations; `3 (L + 2)` when absent.
    pub iterations: Option<usize>,
    pub vae_steps: usize,
    pub vae_lr: f64,
    /// Pilot fractions of the pilot-based baselines.
    pub pilot_fractions: Vec<f64>,
    /// Per-tap variances of the genie initialization noise.
    pub gammas: Vec<f64>,
    /// Channel scale factors of the amplitude scan.
    pub alphas: Vec<f64>,
    /// Trained weights for the learned detector.
    pub weights: Option<PathBuf>,
    /// Algorithms to run; empty runs every algorithm of the experiment.
    pub algorithms: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            block_len: 100,
            memory: 5,
            modulation: Modulation::Bpsk,
            pdp: Pdp::Uniform,
            channel: None,
            snr_db: (0..=6).map(|k| 2.0 * k as f64).collect(),
            blocks: 1000,
            seed: 0,
            iterations: None,
            vae_steps: 10,
            vae_lr: 0.1,
            pilot_fractions: vec![0.1, 0.2],
            gammas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            alphas: (0..=20).map(|k| (30 + 5 * k) as f64 / 100.0).collect(),
            weights: None,
            algorithms: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr grid is empty".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr grid must be finite".into());
        }
        if self.block_len == 0 {
            return bad("block_len must be at least 1".into());
        }
        if let Some(taps) = &self.channel {
            if taps.is_empty() || taps.iter().flatten().any(|v| !v.is_finite()) {
                return bad("channel needs at least one finite tap".into());
            }
        }
        if self.iterations == Some(0) {
            return bad("iterations must be at least 1".into());
        }
        if self.vae_steps == 0 || !(self.vae_lr > 0.0) || !self.vae_lr.is_finite() {
            return bad("VAE-LE needs at least one step and a positive learning rate".into());
        }
        if self.pilot_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("pilot fractions must lie in (0, 1]".into());
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return bad("gammas must be finite and nonnegative".into());
        }
        if self.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return bad("alphas must be finite and positive".into());
        }
        Ok(())
    }

    /// Effective channel memory.
    pub fn channel_memory(&self) -> usize {
        self.channel.as_ref().map_or(self.memory, |t| t.len() - 1)
    }

    pub fn em_iterations(&self) -> usize {
        self.iterations.unwrap_or_else(|| default_iterations(self.channel_memory()))
    }

    pub fn constellation(&self) -> Constellation {
        Constellation::new(self.modulation)
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig { lr_schedule: vec![self.vae_lr; self.vae_steps] }
    }

    /// Loads `weights` if set.
    pub fn load_weights(&self) -> Result<Option<TrainedWeights>> {
        self.weights.as_deref().map(TrainedWeights::load).transpose()
    }

    fn fixed_taps(&self) -> Option<Vec<Complex64>> {
        self.channel.as_ref().map(|t| t.iter().map(|&[re, im]| Complex64::new(re, im)).collect())
    }

    fn runs(&self, name: &str) -> bool {
        self.algorithms.is_empty() || self.algorithms.iter().any(|a| a == name)
    }

    fn check_algorithms(&self, known: &[&str]) -> Result<()> {
        match self.algorithms.iter().find(|a| !known.contains(&a.as_str())) {
            Some(a) => Err(Error::InvalidParameter(format!("unknown algorithm {a:?}, expected one of {known:?}"))),
            None => Ok(()),
        }
    }

    fn pilot_count(&self, fraction: f64) -> usize {
        ((fraction * self.block_len as f64).round() as usize).clamp(1, self.block_len)
    }

    /// Block `b` at grid point `snr_idx`.
    fn block(&self, constellation: &Constellation, snr_idx: usize, b: usize) -> TransmissionBlock {
        let h = self
            .fixed_taps()
            .unwrap_or_else(|| sample_channel(self.memory, self.pdp, &mut derive_rng(self.seed, &[tag::CHANNEL, b as u64])));
        let params = ChannelParams { h, sigma2: sigma2_for_snr(constellation, self.snr_db[snr_idx]) };
        generate_block(
            constellation,
            &params,
            self.block_len,
            &mut derive_rng(self.seed, &[tag::SYMBOLS, b as u64]),
            &mut derive_rng(self.seed, &[tag::NOISE, snr_idx as u64, b as u64]),
        )
    }

    /// Runs `f` on every block of grid point `snr_idx`, in parallel, keeping block order.
    fn map_blocks<T: Send>(
        &self,
        snr_idx: usize,
        f: impl Fn(usize, &TransmissionBlock) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        let constellation = self.constellation();
        (0..self.blocks)
            .into_par_iter()
            .map(|b| f(b, &self.block(&constellation, snr_idx, b)))
            .collect()
    }
}

/// A CSV table with one header row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: Vec<String>) -> Self {
        CsvTable { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of a column; empty cells read as NaN.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }

    pub fn write<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv write failed: {e}"));
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(format!("csv write failed: {e}")))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot create {}: {e}", path.display())))?;
        self.write(std::io::BufWriter::new(file))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn pct(fraction: f64) -> String {
    format!("{}", (fraction * 100.0).round() as i64)
}

fn stats_header(name: &str) -> [String; 4] {
    ["mean", "median", "p25", "p75"].map(|s| format!("{name}_{s}"))
}

fn stats_cells(values: &[f64]) -> [String; 4] {
    match order_stats(values) {
        Some(o) => [o.mean, o.median, o.p25, o.p75].map(num),
        None => Default::default(),
    }
}

/// Phase-aligned squared error of a blind estimate.
fn aligned_se(h: &[Complex64], truth: &[Complex64], constellation: &Constellation) -> Result<f64> {
    let (aligned, _) = align_to_truth(h, &Beliefs::uniform(0, constellation.size()), truth, constellation);
    squared_error(&aligned, truth)
}

/// Bit errors of phase-aligned beliefs, counted from symbol `skip` on.
fn aligned_bit_errors(
    h: &[Complex64],
    beliefs: &Beliefs,
    block: &TransmissionBlock,
    constellation: &Constellation,
    skip: usize,
) -> usize {
    let (_, aligned) = align_to_truth(h, beliefs, &block.truth.h, constellation);
    let k = constellation.bits_per_symbol() * skip;
    bit_errors(&bmd_llrs(&aligned, constellation).hard_bits()[k..], &block.bits[k..])
}

/// Prefix pilots carrying the transmitted symbols.
fn true_pilots(block: &TransmissionBlock, count: usize) -> Result<PilotConfig> {
    PilotConfig::new((0..count).collect(), block.symbol_indices[..count].to_vec())
}

fn serial_embp(y: &[Complex64], init: &ChannelParams, constellation: &Constellation, iterations: usize) -> Result<EmbpOutput> {
    let memory = init.memory();
    embp_run(y, init, constellation, &EmSchedule::serial(memory, iterations), &vec![1.0; iterations])
}

fn vae_run(cfg: &ExperimentConfig, y: &[Complex64], constellation: &Constellation) -> Result<VaeOutput> {
    vae_le_run(y, cfg.channel_memory(), constellation, &cfg.vae_config())
}

/// Squared estimation error versus SNR of the blind estimators and the
/// pilot-based baselines. Pilot methods use the transmitted prefix symbols
/// and the true noise variance. Blind errors are phase aligned.
///
/// Algorithms: `vae_le`, `embp_impulse` (EMBP from the impulse start),
/// `embp_vae` (EMBP from the VAE-LE estimate), `pilot_ml`, `dd_map`.
pub fn run_mse_vs_snr(cfg: &ExperimentConfig) -> Result<CsvTable> {
    cfg.validate()?;
    cfg.check_algorithms(&["vae_le", "embp_impulse", "embp_vae", "pilot_ml", "dd_map"])?;
    let con = cfg.constellation();
    let memory = cfg.channel_memory();
    let t = cfg.em_iterations();
    let mut names: Vec<String> = ["vae_le", "embp_impulse", "embp_vae"]
        .into_iter()
        .filter(|n| cfg.runs(n))
        .map(String::from)
        .collect();
    for kind in ["pilot_ml", "dd_map"] {
        if cfg.runs(kind) {
            names.extend(cfg.pilot_fractions.iter().map(|&f| format!("{kind}_{}", pct(f))));
        }
    }
    let mut header = vec!["snr_db".to_string()];
    header.extend(names.iter().flat_map(|n| stats_header(n)));
    let mut table = CsvTable::new(header);

    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        let per_block = cfg.map_blocks(si, |_, block| {
            let truth = &block.truth.h;
            let mut se = Vec::with_capacity(names.len());
            let need_vae = cfg.runs("vae_le") || cfg.runs("embp_vae");
            let vae = if need_vae { Some(vae_run(cfg, &block.y, &con)?) } else { None };
            if cfg.runs("vae_le") {
                se.push(aligned_se(&vae.as_ref().unwrap().state.theta_hat.h, truth, &con)?);
            }
            if cfg.runs("embp_impulse") {
                let out = serial_embp(&block.y, &impulse_start(&block.y, memory, &con)?, &con, t)?;
                se.push(aligned_se(&out.params.h, truth, &con)?);
            }
            if let (true, Some(v)) = (cfg.runs("embp_vae"), &vae) {
                let out = serial_embp(&block.y, &v.state.theta_hat, &con, t)?;
                se.push(aligned_se(&out.params.h, truth, &con)?);
            }
            if cfg.runs("pilot_ml") {
                for &f in &cfg.pilot_fractions {
                    let h = ml_pilot_estimate(&block.y, &true_pilots(block, cfg.pilot_count(f))?, memory, &con)?;
                    se.push(squared_error(&h, truth)?);
                }
            }
            if cfg.runs("dd_map") {
                for &f in &cfg.pilot_fractions {
                    let pilots = true_pilots(block, cfg.pilot_count(f))?;
                    let out = dd_map_estimate(&block.y, &pilots, memory, block.truth.sigma2, &con)?;
                    se.push(squared_error(&out.h, truth)?);
                }
            }
            Ok(se)
        })?;
        let mut row = vec![num(snr)];
        for k in 0..names.len() {
            let column: Vec<f64> = per_block.iter().map(|s| s[k]).collect();
            row.extend(stats_cells(&column));
        }
        table.push(row);
    }
    Ok(table)
}

/// Bit error rate versus SNR.
///
/// Algorithms: `map` and `bp` (coherent, true parameters), `vae` (VAE-LE
/// demapper output), `embp` (serial schedule from the VAE-LE estimate),
/// `embp_star` (trained weights from the VAE-LE estimate, needs `weights`),
/// `dd_map` (per pilot fraction, data symbols only). Blind outputs are phase
/// aligned before counting errors.
pub fn run_ber_vs_snr(cfg: &ExperimentConfig, weights: Option<&TrainedWeights>) -> Result<CsvTable> {
    cfg.validate()?;
    cfg.check_algorithms(&["map", "bp", "vae", "embp", "embp_star", "dd_map"])?;
    let con = cfg.constellation();
    let memory = cfg.channel_memory();
    let t = cfg.em_iterations();
    let learned = match weights {
        Some(w) if cfg.runs("embp_star") => {
            if w.memory() != memory {
                return Err(Error::ShapeMismatch(format!("weights are for memory {}, channel has {memory}", w.memory())));
            }
            Some(apply_weights(w)?)
        }
        _ => None,
    };
    if learned.is_none() && cfg.algorithms.iter().any(|a| a == "embp_star") {
        return Err(Error::InvalidParameter("embp_star needs trained weights".into()));
    }
    let mut names: Vec<String> = ["map", "bp", "vae", "embp"]
        .into_iter()
        .filter(|n| cfg.runs(n))
        .map(String::from)
        .collect();
    if learned.is_some() {
        names.push("embp_star".into());
    }
    if cfg.runs("dd_map") {
        names.extend(cfg.pilot_fractions.iter().map(|&f| format!("dd_map_{}", pct(f))));
    }
    let mut header = vec!["snr_db".to_string()];
    header.extend(names.iter().cloned());
    let mut table = CsvTable::new(header);
    let bits_per_block = cfg.block_len * con.bits_per_symbol();

    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        let per_block = cfg.map_blocks(si, |_, block| {
            let mut errors = Vec::with_capacity(names.len());
            if cfg.runs("map") {
                let post = bcjr_map(&block.y, &block.truth, &con)?;
                errors.push(aligned_bit_errors(&block.truth.h, &post.beliefs, block, &con, 0));
            }
            if cfg.runs("bp") {
                let beliefs = bp_detect(&block.y, &block.truth, &con, &vec![1.0; t])?;
                errors.push(aligned_bit_errors(&block.truth.h, &beliefs, block, &con, 0));
            }
            let blind = cfg.runs("vae") || cfg.runs("embp") || learned.is_some();
            if blind {
                let vae = vae_run(cfg, &block.y, &con)?;
                let init = &vae.state.theta_hat;
                if cfg.runs("vae") {
                    let q = vae_q(&vae.state.phi, vae.state.sigma2_vae, &block.y, memory, &con)?;
                    errors.push(aligned_bit_errors(&init.h, &q, block, &con, 0));
                }
                if cfg.runs("embp") {
                    let out = serial_embp(&block.y, init, &con, t)?;
                    errors.push(aligned_bit_errors(&out.params.h, &out.beliefs, block, &con, 0));
                }
                if let Some(runner) = &learned {
                    let out = runner.run(&block.y, init, &con)?;
                    errors.push(aligned_bit_errors(&out.params.h, &out.beliefs, block, &con, 0));
                }
            }
            if cfg.runs("dd_map") {
                for &f in &cfg.pilot_fractions {
                    let count = cfg.pilot_count(f);
                    let out = dd_map_estimate(&block.y, &true_pilots(block, count)?, memory, block.truth.sigma2, &con)?;
                    errors.push(aligned_bit_errors(&block.truth.h, &out.beliefs, block, &con, count));
                }
            }
            Ok(errors)
        })?;
        let mut row = vec![num(snr)];
        let mut k = 0;
        for name in &names {
            let total: usize = per_block.iter().map(|e| e[k]).sum();
            let bits = if let Some(f) = name.strip_prefix("dd_map_") {
                let f: f64 = f.parse::<f64>().unwrap_or(0.0) / 100.0;
                (cfg.block_len - cfg.pilot_count(f)) * con.bits_per_symbol()
            } else {
                bits_per_block
            };
            row.push(if bits == 0 { String::new() } else { num(total as f64 / (bits * cfg.blocks) as f64) });
            k += 1;
        }
        table.push(row);
    }
    Ok(table)
}

/// Estimation error of VAE-LE and EMBP from different initial estimates.
///
/// For every `gamma` the genie-aided start is `h + sqrt(gamma) h_w` with
/// `h_w ~ CN(0, I)` and the true noise variance (rows labelled `genie`).
/// Rows labelled `impulse` start both algorithms blindly from the impulse;
/// the `vae` row runs EMBP from the blind VAE-LE estimate.
pub fn run_init_sensitivity(cfg: &ExperimentConfig) -> Result<CsvTable> {
    cfg.validate()?;
    cfg.check_algorithms(&[])?;
    let con = cfg.constellation();
    let memory = cfg.channel_memory();
    let t = cfg.em_iterations();
    let vae_cfg = cfg.vae_config();
    let mut header: Vec<String> = ["snr_db", "init", "gamma", "gamma_total"].map(String::from).to_vec();
    header.extend(stats_header("vae_le"));
    header.extend(stats_header("embp"));
    let mut table = CsvTable::new(header);

    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        for (gi, &gamma) in cfg.gammas.iter().enumerate() {
            let per_block = cfg.map_blocks(si, |b, block| {
                let truth = &block.truth;
                let mut rng = derive_rng(cfg.seed, &[tag::INIT, si as u64, gi as u64, b as u64]);
                let h_init: Vec<Complex64> = truth.h.iter().map(|h| h + complex_normal(&mut rng, gamma)).collect();
                let vae = vae_le_run_from(&block.y, &h_init, &con, &vae_cfg)?;
                let init = ChannelParams::new(h_init, truth.sigma2)?;
                let out = serial_embp(&block.y, &init, &con, t)?;
                Ok([aligned_se(&vae.state.theta_hat.h, &truth.h, &con)?, aligned_se(&out.params.h, &truth.h, &con)?])
            })?;
            let mut row = vec![num(snr), "genie".into(), num(gamma), num(gamma * (memory + 1) as f64)];
            for k in 0..2 {
                row.extend(stats_cells(&per_block.iter().map(|v| v[k]).collect::<Vec<_>>()));
            }
            table.push(row);
        }
        let per_block = cfg.map_blocks(si, |_, block| {
            let truth = &block.truth.h;
            let vae = vae_le_run(&block.y, memory, &con, &vae_cfg)?;
            let from_impulse = serial_embp(&block.y, &impulse_start(&block.y, memory, &con)?, &con, t)?;
            let from_vae = serial_embp(&block.y, &vae.state.theta_hat, &con, t)?;
            Ok([
                aligned_se(&vae.state.theta_hat.h, truth, &con)?,
                aligned_se(&from_impulse.params.h, truth, &con)?,
                aligned_se(&from_vae.params.h, truth, &con)?,
            ])
        })?;
        let col = |k: usize| per_block.iter().map(|v| v[k]).collect::<Vec<_>>();
        let mut row = vec![num(snr), "impulse".into(), String::new(), String::new()];
        row.extend(stats_cells(&col(0)));
        row.extend(stats_cells(&col(1)));
        table.push(row);
        let mut row = vec![num(snr), "vae".into(), String::new(), String::new()];
        row.extend(<[String; 4]>::default());
        row.extend(stats_cells(&col(2)));
        table.push(row);
    }
    Ok(table)
}

/// BER and ELBO of detectors run with the scaled channel `alpha h` and the
/// true noise variance, on blocks generated with `h`.
///
/// Uses the configured fixed channel, or [`surrogate_channel`] if none is set.
/// `elbo_bp` is the factorized ELBO of the BP beliefs, `elbo_app` the exact
/// log-evidence `log p(y | alpha h)`. Both are block averages.
pub fn run_alpha_scan(cfg: &ExperimentConfig) -> Result<CsvTable> {
    let mut cfg = cfg.clone();
    if cfg.channel.is_none() {
        cfg.channel = Some(surrogate_channel().iter().map(|c| [c.re, c.im]).collect());
    }
    cfg.validate()?;
    cfg.check_algorithms(&[])?;
    if cfg.alphas.is_empty() {
        return Err(Error::InvalidParameter("alpha grid is empty".into()));
    }
    let con = cfg.constellation();
    let t = cfg.em_iterations();
    let header = ["snr_db", "alpha", "ber_bp", "ber_map", "elbo_bp", "elbo_app"].map(String::from).to_vec();
    let mut table = CsvTable::new(header);
    let bits = (cfg.block_len * con.bits_per_symbol() * cfg.blocks) as f64;

    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        let per_block = cfg.map_blocks(si, |_, block| {
            cfg.alphas
                .iter()
                .map(|&alpha| {
                    let h: Vec<Complex64> = block.truth.h.iter().map(|c| c * alpha).collect();
                    let params = ChannelParams::new(h, block.truth.sigma2)?;
                    let bp = bp_detect(&block.y, &params, &con, &vec![1.0; t])?;
                    let map = bcjr_map(&block.y, &params, &con)?;
                    Ok((
                        aligned_bit_errors(&block.truth.h, &bp, block, &con, 0),
                        aligned_bit_errors(&block.truth.h, &map.beliefs, block, &con, 0),
                        vae_elbo(&bp, &params, &block.y, &con),
                        map.log_evidence,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let blocks = cfg.blocks as f64;
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            let (mut e_bp, mut e_map, mut elbo, mut evidence) = (0usize, 0usize, 0.0, 0.0);
            for r in &per_block {
                e_bp += r[ai].0;
                e_map += r[ai].1;
                elbo += r[ai].2;
                evidence += r[ai].3;
            }
            table.push(vec![
                num(snr),
                num(alpha),
                num(e_bp as f64 / bits),
                num(e_map as f64 / bits),
                num(elbo / blocks),
                num(evidence / blocks),
            ]);
        }
    }
    Ok(table)
}

/// Mean phase-aligned squared error after every EMBP iteration, all runs
/// starting from the VAE-LE estimate. Row `t = 0` is the initial estimate.
///
/// Algorithms: `serial`, `parallel`, `learned` (needs `weights`; its
/// iteration count comes from the weights, shorter traces leave empty cells).
pub fn run_iteration_trace(cfg: &ExperimentConfig, weights: Option<&TrainedWeights>) -> Result<CsvTable> {
    cfg.validate()?;
    cfg.check_algorithms(&["serial", "parallel", "learned"])?;
    let con = cfg.constellation();
    let memory = cfg.channel_memory();
    let t = cfg.em_iterations();
    let mut runs: Vec<(String, EmSchedule, Vec<f64>)> = Vec::new();
    if cfg.runs("serial") {
        runs.push(("serial".into(), EmSchedule::serial(memory, t), vec![1.0; t]));
    }
    if cfg.runs("parallel") {
        runs.push(("parallel".into(), EmSchedule::parallel(memory, t), vec![1.0; t]));
    }
    match weights {
        Some(w) if cfg.runs("learned") => {
            if w.memory() != memory {
                return Err(Error::ShapeMismatch(format!("weights are for memory {}, channel has {memory}", w.memory())));
            }
            runs.push(("learned".into(), w.schedule()?, w.beta_bp.clone()));
        }
        None if cfg.algorithms.iter().any(|a| a == "learned") => {
            return Err(Error::InvalidParameter("learned schedule needs trained weights".into()));
        }
        _ => {}
    }
    let mut header = vec!["snr_db".to_string(), "t".to_string()];
    header.extend(runs.iter().map(|r| r.0.clone()));
    let mut table = CsvTable::new(header);
    let longest = runs.iter().map(|r| r.1.iterations()).max().unwrap_or(0);

    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        let per_block = cfg.map_blocks(si, |_, block| {
            let init = vae_run(cfg, &block.y, &con)?.state.theta_hat;
            runs.iter()
                .map(|(_, schedule, beta)| {
                    let out = embp_run(&block.y, &init, &con, schedule, beta)?;
                    out.trace.iter().map(|p| aligned_se(&p.h, &block.truth.h, &con)).collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for step in 0..=longest {
            let mut row = vec![num(snr), step.to_string()];
            for k in 0..runs.len() {
                if step < per_block[0][k].len() {
                    let mean = per_block.iter().map(|r| r[k][step]).sum::<f64>() / cfg.blocks as f64;
                    row.push(num(mean));
                } else {
                    row.push(String::new());
                }
            }
            table.push(row);
        }
    }
    Ok(table)
}

/// The EM and BP weights of a trained schedule, one row per iteration.
/// Masked entries are shown as `0.0`.
pub fn schedule_report(weights: &TrainedWeights) -> Result<CsvTable> {
    weights.validate()?;
    let memory = weights.memory();
    let mut header = vec!["t".to_string()];
    header.extend((0..=memory).map(|l| format!("h{l}")));
    header.push("sigma2".into());
    header.push("beta_bp".into());
    let mut table = CsvTable::new(header);
    for (t, (row, mask)) in weights.beta_em.iter().zip(&weights.mask).enumerate() {
        let mut cells = vec![(t + 1).to_string()];
        cells.extend(row.iter().zip(mask).map(|(&w, &m)| if m { "0.0".to_string() } else { format!("{w:?}") }));
        cells.push(format!("{:?}", weights.beta_bp[t]));
        table.push(cells);
    }
    Ok(table)
}
