//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use embp::channel::{generate_block, sample_channel, sigma2_for_snr, ChannelParams, Constellation, Pdp, TransmissionBlock};
use embp::rng::{derive_rng, tag};
use embp::Complex64;

/// Random block with a uniform-PDP channel at the given SNR.
pub fn instance(seed: u64, n: usize, memory: usize, con: &Constellation, snr_db: f64) -> TransmissionBlock {
    let h = sample_channel(memory, Pdp::Uniform, &mut derive_rng(seed, &[tag::CHANNEL]));
    let params = ChannelParams::new(h, sigma2_for_snr(con, snr_db)).unwrap();
    generate_block(con, &params, n, &mut derive_rng(seed, &[tag::SYMBOLS]), &mut derive_rng(seed, &[tag::NOISE]))
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact posterior by enumerating all `M^N` sequences: symbol marginals
/// (row-major `N x M`) and `log p(y | theta)` with a uniform symbol prior.
pub fn brute(y: &[Complex64], p: &ChannelParams, con: &Constellation) -> (Vec<f64>, f64) {
    let l = p.h.len() - 1;
    let n = y.len() - l;
    let m = con.size();
    let total = m.pow(n as u32);
    let mut logw = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for s in 0..total {
        let mut r = s;
        for slot in idx.iter_mut() {
            *slot = r % m;
            r /= m;
        }
        let mut dist = 0.0;
        for (k, yk) in y.iter().enumerate() {
            let mut z = Complex64::new(0.0, 0.0);
            for (j, hj) in p.h.iter().enumerate() {
                if k >= j && k - j < n {
                    z += hj * con.points[idx[k - j]];
                }
            }
            dist += (yk - z).norm_sqr();
        }
        logw.push(-dist / p.sigma2);
    }
    let z = lse(&logw);
    let mut marg = vec![0.0; n * m];
    for (s, w) in logw.iter().enumerate() {
        let pr = (w - z).exp();
        let mut r = s;
        for k in 0..n {
            marg[k * m + r % m] += pr;
            r /= m;
        }
    }
    let log_evidence = z - n as f64 * (m as f64).ln() - n as f64 * (PI * p.sigma2).ln();
    (marg, log_evidence)
}

/// Plain flooding sum-product on the Ungerboeck graph, written from the
/// likelihood expansion `|y - Hc|^2 = |y|^2 - 2 Re(c^H x) + c^H G c`.
pub fn reference_bp(y: &[Complex64], p: &ChannelParams, con: &Constellation, iterations: usize) -> Vec<f64> {
    let l = p.h.len() - 1;
    let n = y.len() - l;
    let m = con.size();
    let x: Vec<Complex64> = (0..n).map(|k| (0..=l).map(|j| p.h[j].conj() * y[k + j]).sum()).collect();
    let g: Vec<Complex64> = (0..=l).map(|d| (0..=l - d).map(|j| p.h[j].conj() * p.h[j + d]).sum()).collect();
    let unary = |k: usize, a: usize| {
        let c = con.points[a];
        (2.0 * (c.conj() * x[k]).re - g[0].re * c.norm_sqr()) / p.sigma2
    };
    // Pair (k, k - d): -2 Re(conj(c_k) G_d c_{k-d}) / sigma2.
    let pair = |d: usize, a: usize, b: usize| -2.0 * (con.points[a].conj() * g[d] * con.points[b]).re / p.sigma2;
    let edges: Vec<(usize, usize)> = (1..n).flat_map(|k| (1..=l.min(k)).map(move |d| (k, d))).collect();
    // to_hi[e][a]: message into variable k, to_lo[e][b]: into k - d.
    let mut to_hi = vec![vec![0.0; m]; edges.len()];
    let mut to_lo = vec![vec![0.0; m]; edges.len()];
    let incoming = |to_hi: &Vec<Vec<f64>>, to_lo: &Vec<Vec<f64>>, v: usize, a: usize| {
        let mut s = unary(v, a);
        for (e, &(k, d)) in edges.iter().enumerate() {
            if k == v {
                s += to_hi[e][a];
            }
            if k - d == v {
                s += to_lo[e][a];
            }
        }
        s
    };
    for _ in 0..iterations {
        let mut new_hi = to_hi.clone();
        let mut new_lo = to_lo.clone();
        for (e, &(k, d)) in edges.iter().enumerate() {
            let from_lo: Vec<f64> = (0..m).map(|b| incoming(&to_hi, &to_lo, k - d, b) - to_lo[e][b]).collect();
            let from_hi: Vec<f64> = (0..m).map(|a| incoming(&to_hi, &to_lo, k, a) - to_hi[e][a]).collect();
            for a in 0..m {
                let terms: Vec<f64> = (0..m).map(|b| pair(d, a, b) + from_lo[b]).collect();
                new_hi[e][a] = lse(&terms);
            }
            for b in 0..m {
                let terms: Vec<f64> = (0..m).map(|a| pair(d, a, b) + from_hi[a]).collect();
                new_lo[e][b] = lse(&terms);
            }
            let zh = lse(&new_hi[e]);
            new_hi[e].iter_mut().for_each(|v| *v -= zh);
            let zl = lse(&new_lo[e]);
            new_lo[e].iter_mut().for_each(|v| *v -= zl);
        }
        to_hi = new_hi;
        to_lo = new_lo;
    }
    let mut out = Vec::with_capacity(n * m);
    for v in 0..n {
        let w: Vec<f64> = (0..m).map(|a| incoming(&to_hi, &to_lo, v, a)).collect();
        let z = lse(&w);
        out.extend(w.iter().map(|t| (t - z).exp()));
    }
    out
}

/// Maximizer of a smooth concave 1-D function by Newton steps on central
/// finite differences, started at `x0`.
pub fn argmax_1d(f: impl Fn(f64) -> f64, x0: f64) -> f64 {
    let h = 1e-4;
    let mut x = x0;
    for _ in 0..200 {
        let (fp, f0, fm) = (f(x + h), f(x), f(x - h));
        let d1 = (fp - fm) / (2.0 * h);
        let d2 = (fp - 2.0 * f0 + fm) / (h * h);
        if !(d2 < 0.0) {
            // Outside the concave region: climb with a bounded step.
            x += d1.signum() * 0.1;
            continue;
        }
        let step = (-d1 / d2).clamp(-1.0, 1.0);
        x += step;
        if step.abs() < 1e-13 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Central finite-difference derivative.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Total variation distance between two row-major marginal tables.
pub fn max_tv(a: &[f64], b: &[f64], m: usize) -> f64 {
    a.chunks(m)
        .zip(b.chunks(m))
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
