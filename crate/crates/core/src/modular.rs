//! Modular integer arithmetic and its bilinear realization on one-hot vectors.
//!
//! A symbol `v` in `0..K` is represented as the basis vector `e_v`. Each modular
//! operation is extended bilinearly to arbitrary (relaxed) probability vectors,
//! so that `op(e_i, e_j) = e_{i ∘ j}` and gradients can flow through both operands.
//!
//! The slice kernels at the bottom of this module are shared with the tape in
//! [`crate::autodiff`]; each forward kernel has its two adjoints next to it.

use crate::error::{FlowError, Result};

/// Largest supported number of classes.
pub const MAX_MODULUS: usize = 4096;

/// Mass tolerated on non-invertible scale values before a relaxed scale is rejected.
pub const SCALE_MASS_TOL: f64 = 1e-9;

/// Number of classes `K` of a categorical variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Modulus(usize);

impl Modulus {
    pub fn new(k: usize) -> Result<Self> {
        if !(2..=MAX_MODULUS).contains(&k) {
            return Err(FlowError::InvalidConfig(format!(
                "modulus must lie in [2, {MAX_MODULUS}], got {k}"
            )));
        }
        Ok(Self(k))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Multiplicative inverse of `s` modulo `K` via the extended Euclidean algorithm.
pub fn mod_inverse(s: usize, k: Modulus) -> Result<usize> {
    let m = k.get() as i64;
    let non_invertible = FlowError::NonInvertibleScale {
        scale: s,
        modulus: k.get(),
    };
    if s == 0 || s >= k.get() {
        return Err(non_invertible);
    }
    let (mut old_r, mut r) = (s as i64, m);
    let (mut old_t, mut t) = (1i64, 0i64);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_t, t) = (t, old_t - q * t);
    }
    if old_r != 1 {
        return Err(non_invertible);
    }
    Ok(old_t.rem_euclid(m) as usize)
}

/// Which scale values are invertible modulo `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigmaMask {
    allowed: Vec<bool>,
}

impl SigmaMask {
    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, s: usize) -> bool {
        self.allowed.get(s).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    /// Allowed indices in increasing order.
    pub fn allowed_values(&self) -> Vec<usize> {
        (0..self.allowed.len()).filter(|&s| self.allowed[s]).collect()
    }
}

pub fn coprime_mask(k: Modulus) -> SigmaMask {
    let allowed = (0..k.get()).map(|s| s != 0 && gcd(s, k.get()) == 1).collect();
    SigmaMask { allowed }
}

/// A (possibly relaxed) one-hot vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotVec {
    probs: Vec<f64>,
}

impl OneHotVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(FlowError::NotNormalized(f64::NAN));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FlowError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    pub fn hard(index: usize, k: Modulus) -> Self {
        let mut probs = vec![0.0; k.get()];
        probs[index % k.get()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The index of the single unit entry, if this vector is hard.
    pub fn hard_index(&self) -> Option<usize> {
        let mut found = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 1.0 && found.is_none() {
                found = Some(i);
            } else if p != 0.0 {
                return None;
            }
        }
        found
    }
}

fn check_len(v: &OneHotVec, k: Modulus) -> Result<()> {
    if v.len() != k.get() {
        return Err(FlowError::LengthMismatch {
            expected: k.get(),
            got: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn masked_mass(s: &[f64], k: usize) -> f64 {
    s.iter()
        .enumerate()
        .filter(|&(j, _)| j == 0 || gcd(j, k) != 1)
        .map(|(_, &p)| p.abs())
        .sum()
}

fn check_scale(s: &OneHotVec, k: Modulus) -> Result<()> {
    let mass = masked_mass(s.probs(), k.get());
    if mass > SCALE_MASS_TOL {
        return Err(FlowError::NonInvertibleMass {
            mass,
            modulus: k.get(),
        });
    }
    Ok(())
}

/// `c[k] = Σ_i a[i]·b[(k − i) mod K]`.
pub fn one_hot_add(a: &OneHotVec, b: &OneHotVec, k: Modulus) -> Result<OneHotVec> {
    check_len(a, k)?;
    check_len(b, k)?;
    let mut out = vec![0.0; k.get()];
    add_fwd(a.probs(), b.probs(), &mut out);
    Ok(OneHotVec { probs: out })
}

/// `c[k] = Σ_j b[j]·a[(k + j) mod K]`.
pub fn one_hot_sub(a: &OneHotVec, b: &OneHotVec, k: Modulus) -> Result<OneHotVec> {
    check_len(a, k)?;
    check_len(b, k)?;
    let mut out = vec![0.0; k.get()];
    sub_fwd(a.probs(), b.probs(), &mut out);
    Ok(OneHotVec { probs: out })
}

/// `c[k] = Σ_{(j·i) mod K = k} s[j]·a[i]`.
pub fn one_hot_mul(s: &OneHotVec, a: &OneHotVec, k: Modulus) -> Result<OneHotVec> {
    check_len(s, k)?;
    check_len(a, k)?;
    check_scale(s, k)?;
    let mut out = vec![0.0; k.get()];
    mul_fwd(s.probs(), a.probs(), &mut out);
    Ok(OneHotVec { probs: out })
}

/// `c[k] = Σ_j s[j]·a[(j·k) mod K]`, the inverse of [`one_hot_mul`] in its second operand.
pub fn one_hot_div(s: &OneHotVec, a: &OneHotVec, k: Modulus) -> Result<OneHotVec> {
    check_len(s, k)?;
    check_len(a, k)?;
    check_scale(s, k)?;
    let mut out = vec![0.0; k.get()];
    div_fwd(s.probs(), a.probs(), &mut out);
    Ok(OneHotVec { probs: out })
}

// ---------------------------------------------------------------------------
// Slice kernels. All loops skip zero entries of the operand that is most likely
// hard, which makes hard-operand calls O(K) instead of O(K²).
// Kernels accumulate into `out`; callers pass zeroed buffers for forward use.

#[inline]
fn wrap(i: usize, k: usize) -> usize {
    if i >= k {
        i - k
    } else {
        i
    }
}

pub(crate) fn add_fwd(a: &[f64], b: &[f64], out: &mut [f64]) {
    let k = a.len();
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        for (i, &ai) in a.iter().enumerate() {
            out[wrap(i + j, k)] += ai * bj;
        }
    }
}

/// Adjoint of `add_fwd` with respect to `a`, given `b` and upstream `g`.
pub(crate) fn add_grad_a(b: &[f64], g: &[f64], ga: &mut [f64]) {
    let k = b.len();
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        for (i, gai) in ga.iter_mut().enumerate() {
            *gai += bj * g[wrap(i + j, k)];
        }
    }
}

pub(crate) fn sub_fwd(a: &[f64], b: &[f64], out: &mut [f64]) {
    let k = a.len();
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        for (i, &ai) in a.iter().enumerate() {
            out[wrap(i + k - j, k)] += ai * bj;
        }
    }
}

pub(crate) fn sub_grad_a(b: &[f64], g: &[f64], ga: &mut [f64]) {
    let k = b.len();
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0.0 {
            continue;
        }
        for (i, gai) in ga.iter_mut().enumerate() {
            *gai += bj * g[wrap(i + k - j, k)];
        }
    }
}

pub(crate) fn sub_grad_b(a: &[f64], g: &[f64], gb: &mut [f64]) {
    let k = a.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, gbj) in gb.iter_mut().enumerate() {
            *gbj += ai * g[wrap(i + k - j, k)];
        }
    }
}

pub(crate) fn mul_fwd(s: &[f64], a: &[f64], out: &mut [f64]) {
    let k = a.len();
    for (j, &sj) in s.iter().enumerate() {
        if sj == 0.0 {
            continue;
        }
        let mut idx = 0;
        for &ai in a.iter() {
            out[idx] += sj * ai;
            idx = wrap(idx + j, k);
        }
    }
}

pub(crate) fn mul_grad_s(a: &[f64], g: &[f64], gs: &mut [f64]) {
    let k = a.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let mut idx = 0;
        for gsj in gs.iter_mut() {
            *gsj += ai * g[idx];
            idx = wrap(idx + i, k);
        }
    }
}

pub(crate) fn mul_grad_a(s: &[f64], g: &[f64], ga: &mut [f64]) {
    let k = s.len();
    for (j, &sj) in s.iter().enumerate() {
        if sj == 0.0 {
            continue;
        }
        let mut idx = 0;
        for gai in ga.iter_mut() {
            *gai += sj * g[idx];
            idx = wrap(idx + j, k);
        }
    }
}

pub(crate) fn div_fwd(s: &[f64], a: &[f64], out: &mut [f64]) {
    let k = a.len();
    for (j, &sj) in s.iter().enumerate() {
        if sj == 0.0 {
            continue;
        }
        let mut idx = 0;
        for o in out.iter_mut() {
            *o += sj * a[idx];
            idx = wrap(idx + j, k);
        }
    }
}

pub(crate) fn div_grad_s(a: &[f64], g: &[f64], gs: &mut [f64]) {
    let k = a.len();
    for (j, gsj) in gs.iter_mut().enumerate() {
        let mut idx = 0;
        let mut acc = 0.0;
        for &gk in g.iter() {
            acc += gk * a[idx];
            idx = wrap(idx + j, k);
        }
        *gsj += acc;
    }
}

pub(crate) fn div_grad_a(s: &[f64], g: &[f64], ga: &mut [f64]) {
    let k = s.len();
    for (j, &sj) in s.iter().enumerate() {
        if sj == 0.0 {
            continue;
        }
        let mut idx = 0;
        for &gk in g.iter() {
            ga[idx] += sj * gk;
            idx = wrap(idx + j, k);
        }
    }
}
