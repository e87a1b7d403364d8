//! Brute-force ground truth over the full sequence space.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::model::DiscreteFlowModel;

/// Largest sequence space that will be enumerated.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;
pub const MASS_TOL: f64 = 1e-6;
pub const KL_ZERO_TOL: f64 = 1e-9;
const CHUNK: usize = 4096;

/// `K^D`, or [`FlowError::TooLarge`] beyond [`ENUMERATION_LIMIT`].
pub fn enumeration_size(d: usize, k: usize) -> Result<usize> {
    let mut size: u128 = 1;
    for _ in 0..d {
        size = size.saturating_mul(k as u128);
        if size > ENUMERATION_LIMIT {
            break;
        }
    }
    if size > ENUMERATION_LIMIT {
        // report the true size when it fits, otherwise a saturated value
        let exact = (k as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
        return Err(FlowError::TooLarge {
            size: exact,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(size as usize)
}

/// Writes the `idx`-th sequence in lexicographic order (position 0 most significant).
pub fn decode_index(mut idx: usize, k: usize, out: &mut [usize]) {
    for s in out.iter_mut().rev() {
        *s = idx % k;
        idx /= k;
    }
}

pub fn encode_index(seq: &[usize], k: usize) -> usize {
    seq.iter().fold(0, |acc, &s| acc * k + s)
}

/// Sequences `start..end` in lexicographic order, flattened.
pub fn sequence_block(start: usize, end: usize, d: usize, k: usize) -> Vec<usize> {
    let mut out = vec![0; (end - start) * d];
    for (i, seq) in out.chunks_mut(d).enumerate() {
        decode_index(start + i, k, seq);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub d: usize,
    pub k: usize,
    pub sequences: usize,
    pub total_mass: f64,
    pub max_log_prob: f64,
    pub min_log_prob: f64,
    pub kl: Option<f64>,
    pub bijective: bool,
    pub mass_tol: f64,
    pub passed: bool,
}

/// Log-probabilities of every sequence, lexicographic order.
///
/// Chunks are evaluated in parallel and concatenated in order.
pub fn enumerate_log_probs(model: &DiscreteFlowModel) -> Result<Vec<f64>> {
    let (d, k) = (model.d(), model.k());
    if model.config().context.is_some() {
        return Err(FlowError::InvalidConfig(
            "enumeration needs an unconditional model".into(),
        ));
    }
    let size = enumeration_size(d, k)?;
    let blocks: Vec<(usize, usize)> = (0..size).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(size))).collect();
    let parts = blocks
        .par_iter()
        .map(|&(s, e)| {
            let y = sequence_block(s, e, d, k);
            Ok(model.nll(&y, None)?.into_iter().map(|v| -v).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Whether the forward map permutes the sequence space.
pub fn is_bijective(model: &DiscreteFlowModel) -> Result<bool> {
    let (d, k) = (model.d(), model.k());
    let size = enumeration_size(d, k)?;
    let blocks: Vec<(usize, usize)> = (0..size).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(size))).collect();
    let images = blocks
        .par_iter()
        .map(|&(s, e)| {
            let x = sequence_block(s, e, d, k);
            let y = model.forward(&x, None)?;
            Ok(y.chunks(d).map(|c| encode_index(c, k)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let set: HashSet<usize> = images.into_iter().flatten().collect();
    Ok(set.len() == size)
}

/// Enumerates the model: total mass, log-prob range, bijectivity and,
/// given a true table, `KL(true ‖ model)`.
pub fn enumerate_model(model: &DiscreteFlowModel, true_table: Option<&[f64]>) -> Result<EnumerationReport> {
    let lp = enumerate_log_probs(model)?;
    let total_mass: f64 = lp.iter().map(|l| l.exp()).sum();
    let max_log_prob = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_log_prob = lp.iter().copied().fold(f64::INFINITY, f64::min);
    let bijective = is_bijective(model)?;
    let kl = match true_table {
        Some(t) => Some(kl_from_log_probs(t, &lp)?),
        None => None,
    };
    let passed = bijective && (total_mass - 1.0).abs() <= MASS_TOL && kl.is_none_or(|v| v >= -KL_ZERO_TOL);
    Ok(EnumerationReport {
        d: model.d(),
        k: model.k(),
        sequences: lp.len(),
        total_mass,
        max_log_prob,
        min_log_prob,
        kl,
        bijective,
        mass_tol: MASS_TOL,
        passed,
    })
}

/// `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn exact_entropy(table: &[f64]) -> Result<f64> {
    let total: f64 = table.iter().sum();
    if (total - 1.0).abs() > 1e-9 || table.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(FlowError::NotNormalized(total));
    }
    Ok(-table.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

fn check_table(table: &[f64], n: usize) -> Result<()> {
    if table.len() != n {
        return Err(FlowError::LengthMismatch {
            expected: n,
            got: table.len(),
        });
    }
    exact_entropy(table).map(|_| ())
}

fn kl_from_log_probs(table: &[f64], lp: &[f64]) -> Result<f64> {
    check_table(table, lp.len())?;
    Ok(table
        .iter()
        .zip(lp)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &l)| p * (p.ln() - l))
        .sum())
}

/// `Σ_y p*(y) (ln p*(y) − ln p_model(y))`.
pub fn kl_gap(model: &DiscreteFlowModel, table: &[f64]) -> Result<f64> {
    kl_from_log_probs(table, &enumerate_log_probs(model)?)
}

/// Expected NLL of the model under the true table, `−Σ_y p*(y) ln p_model(y)`.
pub fn cross_entropy(model: &DiscreteFlowModel, table: &[f64]) -> Result<f64> {
    let lp = enumerate_log_probs(model)?;
    check_table(table, lp.len())?;
    Ok(-table
        .iter()
        .zip(&lp)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &l)| p * l)
        .sum::<f64>())
}
