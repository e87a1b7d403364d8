//! Synthetic data generators with exact ground truth, a character-corpus
//! loader, and the plain-text dataset format.
//!
//! Dataset files start with a header line `D K N task` followed by `N` lines
//! of `D` space-separated symbols. Conditional datasets append ` | ` and the
//! context symbols to each line; context symbols share the alphabet size `K`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::model::{ContextBatch, ContextSpec};
use crate::oracle::{decode_index, enumeration_size, exact_entropy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub spec: ContextSpec,
    pub symbols: Vec<usize>,
}

/// `N` sequences of `D` symbols in `[0, K)`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub d: usize,
    pub k: usize,
    pub task: String,
    pub sequences: Vec<usize>,
    pub context: Option<Context>,
}

impl Dataset {
    pub fn new(d: usize, k: usize, task: impl Into<String>, sequences: Vec<usize>) -> Result<Self> {
        if d == 0 || sequences.len() % d != 0 {
            return Err(FlowError::MalformedDataset(format!(
                "{} symbols do not form rows of length {d}",
                sequences.len()
            )));
        }
        if let Some(&s) = sequences.iter().find(|&&s| s >= k) {
            return Err(FlowError::SymbolOutOfRange { symbol: s, k });
        }
        Ok(Self {
            d,
            k,
            task: task.into(),
            sequences,
            context: None,
        })
    }

    pub fn with_context(mut self, spec: ContextSpec, symbols: Vec<usize>) -> Result<Self> {
        if symbols.len() != self.len() * spec.len {
            return Err(FlowError::MalformedDataset(format!(
                "{} context symbols for {} rows of length {}",
                symbols.len(),
                self.len(),
                spec.len
            )));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= spec.k) {
            return Err(FlowError::SymbolOutOfRange { symbol: s, k: spec.k });
        }
        self.context = Some(Context { spec, symbols });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.sequences.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.sequences[i * self.d..(i + 1) * self.d]
    }

    /// Rows `start..end`, flattened.
    pub fn rows(&self, start: usize, end: usize) -> &[usize] {
        &self.sequences[start * self.d..end * self.d]
    }

    pub fn context_spec(&self) -> Option<ContextSpec> {
        self.context.as_ref().map(|c| c.spec)
    }

    pub fn context_batch(&self, start: usize, end: usize) -> Option<ContextBatch<'_>> {
        self.context.as_ref().map(|c| ContextBatch {
            symbols: &c.symbols[start * c.spec.len..end * c.spec.len],
            spec: c.spec,
        })
    }

    /// New dataset holding the given rows in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let sequences = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let context = self.context.as_ref().map(|c| Context {
            spec: c.spec,
            symbols: idx
                .iter()
                .flat_map(|&i| c.symbols[i * c.spec.len..(i + 1) * c.spec.len].iter().copied())
                .collect(),
        });
        Self {
            d: self.d,
            k: self.k,
            task: self.task.clone(),
            sequences,
            context,
        }
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.d, self.k, self.len(), self.task);
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(usize::to_string).collect();
            out.push_str(&row.join(" "));
            if let Some(c) = &self.context {
                out.push_str(" |");
                for s in &c.symbols[i * c.spec.len..(i + 1) * c.spec.len] {
                    let _ = write!(out, " {s}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| FlowError::MalformedDataset(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("header `{header}` is not `D K N task`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("header field `{s}`: {e}")));
        let (d, k, n) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
        let mut sequences = Vec::with_capacity(n * d);
        let mut ctx: Option<(usize, Vec<usize>)> = None;
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let (main, rest) = match line.split_once('|') {
                Some((a, b)) => (a, Some(b)),
                None => (line, None),
            };
            let parse = |s: &str| -> Result<Vec<usize>> {
                s.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|e| bad(format!("line {}: `{t}`: {e}", i + 2))))
                    .collect()
            };
            let row = parse(main)?;
            if row.len() != d {
                return Err(bad(format!("line {} has {} symbols, expected {d}", i + 2, row.len())));
            }
            sequences.extend(row);
            match (rest, &mut ctx, i) {
                (Some(r), None, 0) => {
                    let c = parse(r)?;
                    ctx = Some((c.len(), c));
                }
                (Some(r), Some((len, syms)), _) => {
                    let c = parse(r)?;
                    if c.len() != *len {
                        return Err(bad(format!("line {} has {} context symbols, expected {len}", i + 2, c.len())));
                    }
                    syms.extend(c);
                }
                (None, None, _) => {}
                _ => return Err(bad(format!("line {}: inconsistent context columns", i + 2))),
            }
        }
        if sequences.len() != n * d {
            return Err(bad(format!("header promises {n} rows, found {}", sequences.len() / d.max(1))));
        }
        let ds = Self::new(d, k, fields[3], sequences)?;
        match ctx {
            Some((len, syms)) => ds.with_context(ContextSpec { len, k }, syms),
            None => Ok(ds),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Empirical distribution over the `K^D` sequences (lexicographic order).
    pub fn histogram(&self) -> Result<Vec<f64>> {
        let size = enumeration_size(self.d, self.k)?;
        let mut h = vec![0.0; size];
        for i in 0..self.len() {
            let idx = self.row(i).iter().fold(0, |acc, &s| acc * self.k + s);
            h[idx] += 1.0;
        }
        let n = self.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        Ok(h)
    }
}

fn sample_table(table: &[f64], d: usize, k: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(table)
        .map_err(|e| FlowError::InvalidConfig(format!("probability table: {e}")))?;
    let mut out = vec![0; n * d];
    for seq in out.chunks_mut(d) {
        decode_index(dist.sample(rng), k, seq);
    }
    Ok(out)
}

/// A probability table over all `K^D` sequences drawn from a symmetric
/// Dirichlet with `α = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRankSpec {
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    pub probabilities: Vec<f64>,
}

impl FullRankSpec {
    pub fn new(d: usize, k: usize, seed: u64) -> Result<Self> {
        let size = enumeration_size(d, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // normalized unit exponentials are Dirichlet(1, …, 1)
        let mut p: Vec<f64> = (0..size).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            d,
            k,
            seed,
            probabilities: p,
        })
    }

    pub fn from_table(d: usize, k: usize, probabilities: Vec<f64>) -> Result<Self> {
        let size = enumeration_size(d, k)?;
        if probabilities.len() != size {
            return Err(FlowError::LengthMismatch {
                expected: size,
                got: probabilities.len(),
            });
        }
        exact_entropy(&probabilities)?;
        Ok(Self {
            d,
            k,
            seed: 0,
            probabilities,
        })
    }

    pub fn entropy(&self) -> f64 {
        exact_entropy(&self.probabilities).expect("normalized by construction")
    }
}

/// `n` i.i.d. draws from the table plus its exact entropy in nats.
pub fn gen_full_rank(spec: &FullRankSpec, n: usize, seed: u64) -> Result<(Dataset, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = sample_table(&spec.probabilities, spec.d, spec.k, n, &mut rng)?;
    Ok((Dataset::new(spec.d, spec.k, "full_rank", seqs)?, spec.entropy()))
}

pub const MOG_BINS: usize = 90;
pub const MOG_COMPONENTS: usize = 8;
const MOG_RADIUS: f64 = 2.0;
const MOG_STD: f64 = 0.1;
const MOG_LIMIT: f64 = 2.25;
const MOG_WIDTH: f64 = 0.05;

pub fn mog_means() -> Vec<(f64, f64)> {
    (0..MOG_COMPONENTS)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / MOG_COMPONENTS as f64;
            (MOG_RADIUS * a.cos(), MOG_RADIUS * a.sin())
        })
        .collect()
}

/// Bin of a coordinate after clamping to `[−2.25, 2.25]`.
pub fn mog_bin(v: f64) -> usize {
    let v = v.clamp(-MOG_LIMIT, MOG_LIMIT);
    (((v + MOG_LIMIT) / MOG_WIDTH).floor() as usize).min(MOG_BINS - 1)
}

/// Samples from an 8-component Gaussian mixture on a circle, discretized to 90 × 90 bins.
pub fn gen_discretized_mog(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, MOG_STD).expect("valid std");
    let means = mog_means();
    let mut seqs = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (mx, my) = means[rng.random_range(0..MOG_COMPONENTS)];
        seqs.push(mog_bin(mx + normal.sample(&mut rng)));
        seqs.push(mog_bin(my + normal.sample(&mut rng)));
    }
    Dataset::new(2, MOG_BINS, "mog", seqs)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact probabilities of the 90 × 90 discretized mixture (row = first coordinate).
pub fn mog_table() -> Vec<f64> {
    let marginal = |m: f64| -> Vec<f64> {
        (0..MOG_BINS)
            .map(|i| {
                let lo = if i == 0 { f64::NEG_INFINITY } else { -MOG_LIMIT + i as f64 * MOG_WIDTH };
                let hi = if i + 1 == MOG_BINS {
                    f64::INFINITY
                } else {
                    -MOG_LIMIT + (i + 1) as f64 * MOG_WIDTH
                };
                normal_cdf((hi - m) / MOG_STD) - normal_cdf((lo - m) / MOG_STD)
            })
            .collect()
    };
    let mut table = vec![0.0; MOG_BINS * MOG_BINS];
    for (mx, my) in mog_means() {
        let (px, py) = (marginal(mx), marginal(my));
        for i in 0..MOG_BINS {
            for j in 0..MOG_BINS {
                table[i * MOG_BINS + j] += px[i] * py[j] / MOG_COMPONENTS as f64;
            }
        }
    }
    table
}

/// Counts modes of a 2-D histogram: local maxima of a 5 × 5 box-smoothed
/// histogram that dominate their 9 × 9 neighbourhood and reach at least half
/// of the global smoothed maximum.
pub fn count_modes(hist: &[f64], rows: usize, cols: usize) -> usize {
    let smooth = box_smooth(hist, rows, cols, 2);
    let max = smooth.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    let r = 4isize;
    let mut count = 0;
    for i in 0..rows {
        for j in 0..cols {
            let v = smooth[i * cols + j];
            if v < 0.5 * max {
                continue;
            }
            let mut is_peak = true;
            'scan: for di in -r..=r {
                for dj in -r..=r {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize {
                        continue;
                    }
                    let w = smooth[ni as usize * cols + nj as usize];
                    // plateaus count once, at their first cell in row-major order
                    let earlier = (ni, nj) < (i as isize, j as isize);
                    if w > v || (w == v && earlier) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                count += 1;
            }
        }
    }
    count
}

fn box_smooth(hist: &[f64], rows: usize, cols: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(rows - 1));
            let (j0, j1) = (j.saturating_sub(r), (j + r).min(cols - 1));
            let mut s = 0.0;
            for a in i0..=i1 {
                for b in j0..=j1 {
                    s += hist[a * cols + b];
                }
            }
            out[i * cols + j] = s / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
        }
    }
    out
}

/// Two-dimensional histogram of a 2-position dataset (row = position 0).
pub fn grid_histogram(data: &Dataset) -> Vec<f64> {
    let mut h = vec![0.0; data.k * data.k];
    for i in 0..data.len() {
        let r = data.row(i);
        h[r[0] * data.k + r[1]] += 1.0;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdditionSpec {
    pub d: usize,
    pub seed: u64,
}

pub fn digits(mut v: u128, d: usize) -> Vec<usize> {
    let mut out = vec![0; d];
    for p in (0..d).rev() {
        out[p] = (v % 10) as usize;
        v /= 10;
    }
    out
}

/// Targets `(a + b) mod 10^D`, most significant digit first; the context is
/// the digits of `a` followed by the digits of `b`.
pub fn gen_addition(spec: &AdditionSpec, n: usize) -> Result<Dataset> {
    if spec.d == 0 || spec.d > 30 {
        return Err(FlowError::InvalidConfig(format!(
            "addition needs 1 ≤ D ≤ 30 digits, got {}",
            spec.d
        )));
    }
    let modulus = 10u128.pow(spec.d as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut targets = Vec::with_capacity(n * spec.d);
    let mut ctx = Vec::with_capacity(2 * n * spec.d);
    for _ in 0..n {
        let a = rng.random_range(0..modulus);
        let b = rng.random_range(0..modulus);
        targets.extend(digits((a + b) % modulus, spec.d));
        ctx.extend(digits(a, spec.d));
        ctx.extend(digits(b, spec.d));
    }
    Dataset::new(spec.d, 10, "addition", targets)?.with_context(
        ContextSpec {
            len: 2 * spec.d,
            k: 10,
        },
        ctx,
    )
}

/// Potts model on a non-periodic 4-neighbour lattice with
/// `log p̃(s) = J · #{adjacent pairs with equal states}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PottsSpec {
    pub rows: usize,
    pub cols: usize,
    pub states: usize,
    pub j: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl PottsSpec {
    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                if c + 1 < self.cols {
                    e.push((i, i + 1));
                }
                if r + 1 < self.rows {
                    e.push((i, i + self.cols));
                }
            }
        }
        e
    }

    fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (i / self.cols, i % self.cols);
        [
            (r > 0).then(|| i - self.cols),
            (r + 1 < self.rows).then(|| i + self.cols),
            (c > 0).then(|| i - 1),
            (c + 1 < self.cols).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    }

    pub fn agreements(&self, s: &[usize]) -> usize {
        self.edges().iter().filter(|&&(a, b)| s[a] == s[b]).count()
    }

    pub fn log_mass(&self, s: &[usize]) -> f64 {
        self.j * self.agreements(s) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.states < 2 || self.rows == 0 || self.cols == 0 || !(self.j >= 0.0) || !self.j.is_finite() {
            return Err(FlowError::InvalidConfig(format!(
                "Potts model needs states ≥ 2, a nonempty lattice and finite J ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Metropolis-Hastings samples: each chain starts uniform and runs `sweeps`
/// row-major sweeps of single-site uniform proposals. Chain `i` uses stream
/// `i` of the seeded generator.
pub fn gen_potts(spec: &PottsSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let sites = spec.sites();
    let chains: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            potts_chain(spec, &mut rng)
        })
        .collect();
    let mut seqs = Vec::with_capacity(n * sites);
    chains.into_iter().for_each(|c| seqs.extend(c));
    Dataset::new(sites, spec.states, "potts", seqs)
}

fn potts_chain(spec: &PottsSpec, rng: &mut impl Rng) -> Vec<usize> {
    let mut s: Vec<usize> = (0..spec.sites()).map(|_| rng.random_range(0..spec.states)).collect();
    for _ in 0..spec.sweeps {
        for i in 0..s.len() {
            let proposal = rng.random_range(0..spec.states);
            let (mut old, mut new) = (0i64, 0i64);
            for nb in spec.neighbours(i) {
                old += i64::from(s[nb] == s[i]);
                new += i64::from(s[nb] == proposal);
            }
            let delta = spec.j * (new - old) as f64;
            if delta >= 0.0 || rng.random::<f64>() < delta.exp() {
                s[i] = proposal;
            }
        }
    }
    s
}

/// Exact quantities of a Potts distribution obtained by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct PottsExact {
    pub log_z: f64,
    pub entropy: f64,
    /// Probabilities of all `states^sites` configurations, lexicographic.
    pub probabilities: Vec<f64>,
}

pub fn potts_exact(spec: &PottsSpec) -> Result<PottsExact> {
    spec.validate()?;
    let (d, k) = (spec.sites(), spec.states);
    let size = enumeration_size(d, k)?;
    let log_mass: Vec<f64> = (0..size)
        .into_par_iter()
        .map(|idx| {
            let mut s = vec![0; d];
            decode_index(idx, k, &mut s);
            spec.log_mass(&s)
        })
        .collect();
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z_scaled: f64 = log_mass.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + z_scaled.ln();
    let probabilities: Vec<f64> = log_mass.iter().map(|l| (l - log_z).exp()).collect();
    let mean_log_mass: f64 = probabilities.iter().zip(&log_mass).map(|(p, l)| p * l).sum();
    Ok(PottsExact {
        log_z,
        entropy: log_z - mean_log_mass,
        probabilities,
    })
}

/// Mean exact NLL of `data` under the Potts distribution, and its entropy.
pub fn potts_exact_nll(data: &Dataset, spec: &PottsSpec) -> Result<(f64, f64)> {
    if data.d != spec.sites() || data.k != spec.states {
        return Err(FlowError::ManifestMismatch(format!(
            "dataset D={}, K={} vs lattice {}×{} with {} states",
            data.d, data.k, spec.rows, spec.cols, spec.states
        )));
    }
    let exact = potts_exact(spec)?;
    let total: f64 = (0..data.len()).map(|i| exact.log_z - spec.log_mass(data.row(i))).sum();
    Ok((total / data.len().max(1) as f64, exact.entropy))
}

/// Mean fraction of agreeing neighbour pairs in a lattice dataset.
pub fn neighbour_agreement(data: &Dataset, spec: &PottsSpec) -> f64 {
    let edges = spec.edges().len().max(1) as f64;
    let total: f64 = (0..data.len())
        .map(|i| spec.agreements(data.row(i)) as f64 / edges)
        .sum();
    total / data.len().max(1) as f64
}

/// Character vocabulary; `unk` and `pad` follow the characters in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub chars: Vec<char>,
    pub unk: bool,
    pub pad: bool,
}

impl Vocab {
    /// Sorted distinct characters of `text`.
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            chars: set.into_iter().collect(),
            unk: false,
            pad: false,
        }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + usize::from(self.unk) + usize::from(self.pad)
    }

    pub fn unk_symbol(&self) -> Option<usize> {
        self.unk.then_some(self.chars.len())
    }

    pub fn pad_symbol(&self) -> Option<usize> {
        self.pad.then(|| self.chars.len() + usize::from(self.unk))
    }

    pub fn encode(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok().or(self.unk_symbol())
    }

    pub fn decode(&self, s: usize) -> char {
        match self.chars.get(s) {
            Some(&c) => c,
            None if Some(s) == self.unk_symbol() => '?',
            None => '_',
        }
    }
}

/// Lowercases and maps every character outside `a-z` to a space, collapsing runs.
pub fn normalize_text8(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_lowercase() {
            out.push(c);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Splits `text` into non-overlapping windows of `seq_len` symbols.
///
/// With no vocabulary supplied, one is built from the text. An unknown symbol
/// is added only when a supplied vocabulary misses characters of the text; a
/// pad symbol is added only when the final window is partial.
pub fn encode_corpus(text: &str, seq_len: usize, vocab: Option<Vocab>) -> Result<(Dataset, Vocab)> {
    if text.is_empty() {
        return Err(FlowError::EmptyCorpus);
    }
    if seq_len == 0 {
        return Err(FlowError::InvalidConfig("seq_len must be positive".into()));
    }
    let mut vocab = vocab.unwrap_or_else(|| Vocab::from_text(text));
    vocab.chars.sort_unstable();
    vocab.chars.dedup();
    if text.chars().any(|c| vocab.chars.binary_search(&c).is_err()) {
        vocab.unk = true;
    }
    let n_chars = text.chars().count();
    if n_chars % seq_len != 0 {
        vocab.pad = true;
    }
    let mut seqs: Vec<usize> = text
        .chars()
        .map(|c| vocab.encode(c).expect("unknown symbol present"))
        .collect();
    if let Some(pad) = vocab.pad_symbol() {
        while seqs.len() % seq_len != 0 {
            seqs.push(pad);
        }
    }
    Ok((Dataset::new(seq_len, vocab.size(), "char_lm", seqs)?, vocab))
}

pub fn load_char_corpus(
    path: impl AsRef<Path>,
    seq_len: usize,
    vocab: Option<Vocab>,
) -> Result<(Dataset, Vocab)> {
    let text = fs::read_to_string(path)?;
    encode_corpus(&text, seq_len, vocab)
}
