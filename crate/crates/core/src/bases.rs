//! Base distributions over the latent sequence space.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::conditioner::{MadeConditioner, MaskedConditionerConfig, Ordering, PassCounter};
use crate::error::{shape_err, Result};

/// Independent categorical per position with its own `[D, K]` logits.
#[derive(Debug, Clone)]
pub struct FactorizedBase {
    d: usize,
    k: usize,
    logits: ParamId,
}

impl FactorizedBase {
    pub fn new(d: usize, k: usize, store: &mut ParamStore, name: &str) -> Self {
        let logits = store.add(format!("{name}.logits"), Tensor::zeros(vec![d, k]));
        Self { d, k, logits }
    }

    pub fn logits_id(&self) -> ParamId {
        self.logits
    }
}

/// Autoregressive categorical parameterized by a masked conditioner.
#[derive(Debug, Clone)]
pub struct ArBase {
    d: usize,
    k: usize,
    net: MadeConditioner,
}

impl ArBase {
    pub fn new(
        d: usize,
        k: usize,
        hidden: Vec<usize>,
        ordering: Ordering,
        context_dim: usize,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = MaskedConditionerConfig {
            d,
            k,
            hidden,
            ordering,
            emit_scale: false,
            context_dim,
        };
        Ok(Self {
            d,
            k,
            net: MadeConditioner::new(cfg, store, name, rng)?,
        })
    }

    pub fn ordering(&self) -> &Ordering {
        &self.net.config().ordering
    }
}

#[derive(Debug, Clone)]
pub enum Base {
    Factorized(FactorizedBase),
    Autoregressive(ArBase),
}

impl Base {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Factorized(b) => (b.d, b.k),
            Self::Autoregressive(b) => (b.d, b.k),
        }
    }

    /// Per-position logits `[B, D, K]` for the sequences in `x`.
    fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        match self {
            Self::Factorized(f) => {
                let l = tape.param(store, f.logits);
                Ok(tape.broadcast_batch(l, b))
            }
            Self::Autoregressive(a) => Ok(a.net.forward(tape, store, x, context)?.0),
        }
    }

    /// Per-example `log p(x) = Σ_d ⟨x_d, log_softmax(logits_d)⟩`, shape `[B]`.
    pub fn log_prob(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let (d, k) = self.dims();
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != d || s[2] != k {
            return Err(shape_err("base_log_prob", format!("{s:?}, want [B, {d}, {k}]")));
        }
        let logits = self.logits(tape, store, x, context)?;
        let ls = tape.log_softmax(logits);
        let terms = tape.mul(x, ls)?;
        let per_pos = tape.sum_last(terms);
        Ok(tape.sum_last(per_pos))
    }

    /// Draws `n` sequences; an autoregressive base uses one pass per position.
    pub fn sample(
        &self,
        store: &ParamStore,
        n: usize,
        rng: &mut impl Rng,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        let (d, k) = self.dims();
        let mut x = vec![0usize; n * d];
        match self {
            Self::Factorized(f) => {
                let logits = store.value(f.logits).data();
                let dists = (0..d)
                    .map(|p| categorical(&logits[p * k..(p + 1) * k]))
                    .collect::<Result<Vec<_>>>()?;
                for seq in x.chunks_mut(d) {
                    for (s, dist) in seq.iter_mut().zip(&dists) {
                        *s = dist.sample(rng);
                    }
                }
            }
            Self::Autoregressive(a) => {
                for &pos in a.ordering().perm() {
                    let mut tape = Tape::new();
                    let xv = tape.constant(Tensor::one_hot(&x, n, d, k)?);
                    let ctx = context.map(|c| tape.constant(c.clone()));
                    let logits = self.logits(&mut tape, store, xv, ctx)?;
                    let data = tape.value(logits).data();
                    for b in 0..n {
                        let off = (b * d + pos) * k;
                        x[b * d + pos] = categorical(&data[off..off + k])?.sample(rng);
                    }
                }
            }
        }
        Ok(x)
    }

    pub fn passes(&self) -> u64 {
        self.pass_counter().map_or(0, PassCounter::get)
    }

    pub fn reset_passes(&self) {
        if let Some(p) = self.pass_counter() {
            p.reset();
        }
    }

    fn pass_counter(&self) -> Option<&PassCounter> {
        match self {
            Self::Factorized(_) => None,
            Self::Autoregressive(a) => Some(a.net.passes()),
        }
    }
}

fn categorical(logits: &[f64]) -> Result<WeightedIndex<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    WeightedIndex::new(weights)
        .map_err(|e| crate::error::shape_err("categorical", format!("bad logits: {e}")))
}
