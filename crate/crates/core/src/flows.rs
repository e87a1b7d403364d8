//! Invertible transforms on categorical sequences.
//!
//! Every layer applies `y_d = (μ_d + σ_d · x_d) mod K` at its transformed
//! positions. Data space is `y`, base space is `x`: [`FlowStack::inverse`]
//! runs on the tape (one conditioner pass per layer) and is what training
//! differentiates; [`FlowStack::forward`] works on integer symbols and is
//! used for sampling.

use rand::Rng;

use crate::autodiff::{argmax, ParamStore, Tape, Tensor, Var, MASKED_LOGIT};
use crate::conditioner::{
    CouplingConditioner, EmbeddingTableConditioner, MadeConditioner, MaskedConditionerConfig,
    Ordering, PassCounter,
};
use crate::error::{FlowError, Result};
use crate::modular::{coprime_mask, mod_inverse, Modulus, SigmaMask};

/// Ordering of the `i`-th autoregressive flow (layer 0 is applied first when
/// sampling): reversed for even `i`, natural for odd `i`.
pub fn layer_ordering(d: usize, i: usize) -> Ordering {
    if i % 2 == 0 {
        Ordering::reversed(d)
    } else {
        Ordering::natural(d)
    }
}

/// Kept positions of the `i`-th bipartite flow: even positions for even `i`,
/// odd positions otherwise.
pub fn alternating_mask(d: usize, i: usize) -> Vec<bool> {
    (0..d).map(|p| p % 2 == i % 2).collect()
}

/// Location symbol and scale symbol chosen from one row of logits.
fn pick(loc: &[f64], scale: Option<&[f64]>, mask: &SigmaMask) -> (usize, usize) {
    let mu = argmax(loc);
    let sigma = match scale {
        Some(row) => {
            let masked: Vec<f64> = row
                .iter()
                .zip(mask.allowed())
                .map(|(&v, &ok)| if ok { v } else { MASKED_LOGIT })
                .collect();
            argmax(&masked)
        }
        None => 1,
    };
    (mu, sigma)
}

/// Records `x = σ⁻¹ (y − μ)` for the rows of `y`.
fn record_inverse(
    tape: &mut Tape,
    y: Var,
    loc: Var,
    scale: Option<Var>,
    mask: &SigmaMask,
    tau: f64,
    fault_scale: Option<usize>,
) -> Result<Var> {
    let mu = tape.st_one_hot_argmax(loc, tau)?;
    let shifted = tape.mod_sub(y, mu)?;
    if let Some(f) = fault_scale {
        let shape = tape.shape(y).to_vec();
        let k = mask.len();
        let rows = tape.value(y).rows();
        let s = Tensor::one_hot(&vec![f; rows], rows, 1, k)?;
        let s = tape.constant(Tensor::new(shape, s.into_data())?);
        return tape.mod_div_unchecked(s, shifted);
    }
    match scale {
        Some(scale) => {
            let masked = tape.masked_fill(scale, mask)?;
            let sigma = tape.st_one_hot_argmax(masked, tau)?;
            tape.mod_div(sigma, shifted)
        }
        None => Ok(shifted),
    }
}

fn context_var(tape: &mut Tape, context: Option<&Tensor>) -> Option<Var> {
    context.map(|c| tape.constant(c.clone()))
}

#[derive(Debug, Clone)]
pub enum ArConditioner {
    Made(MadeConditioner),
    Embedding(EmbeddingTableConditioner),
}

impl ArConditioner {
    fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        match self {
            Self::Made(c) => c.forward(tape, store, y, context),
            Self::Embedding(c) => Ok((c.forward(tape, store, y)?, None)),
        }
    }

    pub fn passes(&self) -> &PassCounter {
        match self {
            Self::Made(c) => c.passes(),
            Self::Embedding(c) => c.passes(),
        }
    }
}

/// Autoregressive layer: `μ_d, σ_d` depend on the `y` positions preceding `d`.
#[derive(Debug, Clone)]
pub struct ArFlowLayer {
    d: usize,
    k: usize,
    ordering: Ordering,
    use_scale: bool,
    tau: f64,
    mask: SigmaMask,
    conditioner: ArConditioner,
    fault_scale: Option<usize>,
}

impl ArFlowLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn with_masked_conditioner(
        d: usize,
        k: usize,
        hidden: Vec<usize>,
        ordering: Ordering,
        use_scale: bool,
        context_dim: usize,
        tau: f64,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let modulus = Modulus::new(k)?;
        let cfg = MaskedConditionerConfig {
            d,
            k,
            hidden,
            ordering: ordering.clone(),
            emit_scale: use_scale,
            context_dim,
        };
        let made = MadeConditioner::new(cfg, store, name, rng)?;
        Ok(Self {
            d,
            k,
            ordering,
            use_scale,
            tau,
            mask: coprime_mask(modulus),
            conditioner: ArConditioner::Made(made),
            fault_scale: None,
        })
    }

    pub fn with_embedding_table(
        d: usize,
        k: usize,
        window: usize,
        ordering: Ordering,
        tau: f64,
        store: &mut ParamStore,
        name: &str,
    ) -> Result<Self> {
        let modulus = Modulus::new(k)?;
        let table = EmbeddingTableConditioner::new(d, k, window, ordering.clone(), store, name)?;
        Ok(Self {
            d,
            k,
            ordering,
            use_scale: false,
            tau,
            mask: coprime_mask(modulus),
            conditioner: ArConditioner::Embedding(table),
            fault_scale: None,
        })
    }

    /// Forces every σ to `scale`, bypassing the coprimality mask. A
    /// non-coprime value makes the layer non-bijective; used by negative tests.
    pub fn inject_fault_scale(&mut self, scale: usize) {
        self.fault_scale = Some(scale % self.k);
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn uses_scale(&self) -> bool {
        self.use_scale
    }

    pub fn conditioner(&self) -> &ArConditioner {
        &self.conditioner
    }

    /// One conditioner pass on `y`, then `x_d = σ_d⁻¹ (y_d − μ_d)` at every position.
    pub fn inverse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let (loc, scale) = self.conditioner.logits(tape, store, y, context)?;
        record_inverse(tape, y, loc, scale, &self.mask, self.tau, self.fault_scale)
    }

    /// Sequential forward in the layer's ordering; `D` conditioner passes.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[usize],
        batch: usize,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        let (d, k) = (self.d, self.k);
        check_symbols(x, batch * d, k)?;
        let mut y = vec![0usize; batch * d];
        for &pos in self.ordering.perm() {
            let mut tape = Tape::new();
            let yv = tape.constant(Tensor::one_hot(&y, batch, d, k)?);
            let ctx = context_var(&mut tape, context);
            let (loc, scale) = self.conditioner.logits(&mut tape, store, yv, ctx)?;
            let loc = tape.value(loc).data();
            let scale = scale.map(|s| tape.value(s).data());
            for b in 0..batch {
                let off = (b * d + pos) * k;
                let (mu, mut sigma) =
                    pick(&loc[off..off + k], scale.map(|s| &s[off..off + k]), &self.mask);
                if let Some(f) = self.fault_scale {
                    sigma = f;
                }
                y[b * d + pos] = (mu + sigma * x[b * d + pos]) % k;
            }
        }
        Ok(y)
    }
}

/// Coupling layer: kept positions pass through and parameterize the rest.
#[derive(Debug, Clone)]
pub struct BipartiteFlowLayer {
    d: usize,
    k: usize,
    kept: Vec<usize>,
    transformed: Vec<usize>,
    use_scale: bool,
    tau: f64,
    mask: SigmaMask,
    conditioner: CouplingConditioner,
}

impl BipartiteFlowLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        k: usize,
        keep: &[bool],
        hidden: &[usize],
        use_scale: bool,
        context_dim: usize,
        window: Option<usize>,
        tau: f64,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let modulus = Modulus::new(k)?;
        if keep.len() != d || keep.iter().all(|&b| b) || keep.iter().all(|&b| !b) {
            return Err(FlowError::InvalidConfig(format!(
                "bipartite mask {keep:?} must have length {d} and contain both kept and transformed positions"
            )));
        }
        let kept: Vec<usize> = (0..d).filter(|&p| keep[p]).collect();
        let transformed: Vec<usize> = (0..d).filter(|&p| !keep[p]).collect();
        let conditioner = CouplingConditioner::new(
            &kept,
            &transformed,
            k,
            hidden,
            use_scale,
            context_dim,
            window,
            store,
            name,
            rng,
        )?;
        Ok(Self {
            d,
            k,
            kept,
            transformed,
            use_scale,
            tau,
            mask: coprime_mask(modulus),
            conditioner,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn uses_scale(&self) -> bool {
        self.use_scale
    }

    pub fn conditioner(&self) -> &CouplingConditioner {
        &self.conditioner
    }

    pub fn inverse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let kept = tape.select_positions(y, &self.kept)?;
        let moved = tape.select_positions(y, &self.transformed)?;
        let (loc, scale) = self.conditioner.forward(tape, store, kept, context)?;
        let x_moved = record_inverse(tape, moved, loc, scale, &self.mask, self.tau, None)?;
        tape.merge_positions(y, x_moved, &self.transformed)
    }

    /// One conditioner pass on the kept positions of `x`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[usize],
        batch: usize,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        let (d, k) = (self.d, self.k);
        check_symbols(x, batch * d, k)?;
        let kept_syms: Vec<usize> = (0..batch)
            .flat_map(|b| self.kept.iter().map(move |&p| x[b * d + p]))
            .collect();
        let mut tape = Tape::new();
        let kv = tape.constant(Tensor::one_hot(&kept_syms, batch, self.kept.len(), k)?);
        let ctx = context_var(&mut tape, context);
        let (loc, scale) = self.conditioner.forward(&mut tape, store, kv, ctx)?;
        let loc = tape.value(loc).data();
        let scale = scale.map(|s| tape.value(s).data());
        let t = self.transformed.len();
        let mut y = x.to_vec();
        for b in 0..batch {
            for (j, &pos) in self.transformed.iter().enumerate() {
                let off = (b * t + j) * k;
                let (mu, sigma) =
                    pick(&loc[off..off + k], scale.map(|s| &s[off..off + k]), &self.mask);
                y[b * d + pos] = (mu + sigma * x[b * d + pos]) % k;
            }
        }
        Ok(y)
    }
}

fn check_symbols(x: &[usize], len: usize, k: usize) -> Result<()> {
    if x.len() != len {
        return Err(FlowError::LengthMismatch {
            expected: len,
            got: x.len(),
        });
    }
    if let Some(&s) = x.iter().find(|&&s| s >= k) {
        return Err(FlowError::SymbolOutOfRange { symbol: s, k });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Autoregressive(ArFlowLayer),
    Bipartite(BipartiteFlowLayer),
}

impl FlowLayer {
    pub fn inverse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        match self {
            Self::Autoregressive(l) => l.inverse(tape, store, y, context),
            Self::Bipartite(l) => l.inverse(tape, store, y, context),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[usize],
        batch: usize,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        match self {
            Self::Autoregressive(l) => l.forward(store, x, batch, context),
            Self::Bipartite(l) => l.forward(store, x, batch, context),
        }
    }

    pub fn passes(&self) -> &PassCounter {
        match self {
            Self::Autoregressive(l) => l.conditioner.passes(),
            Self::Bipartite(l) => l.conditioner.passes(),
        }
    }

    pub fn is_autoregressive(&self) -> bool {
        matches!(self, Self::Autoregressive(_))
    }
}

/// Ordered composition of flow layers; layer 0 is applied first by [`Self::forward`].
#[derive(Debug, Clone, Default)]
pub struct FlowStack {
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn new(layers: Vec<FlowLayer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Applies layer inverses from last to first.
    pub fn inverse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let mut x = y;
        for layer in self.layers.iter().rev() {
            x = layer.inverse(tape, store, x, context)?;
        }
        Ok(x)
    }

    /// Inverse on integer symbols, evaluated without keeping gradients.
    pub fn inverse_symbols(
        &self,
        store: &ParamStore,
        y: &[usize],
        batch: usize,
        d: usize,
        k: usize,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let yv = tape.constant(Tensor::one_hot(y, batch, d, k)?);
        let ctx = context_var(&mut tape, context);
        let x = self.inverse(&mut tape, store, yv, ctx)?;
        Ok(tape.value(x).argmax_last())
    }

    /// Applies layer forwards from first to last.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[usize],
        batch: usize,
        context: Option<&Tensor>,
    ) -> Result<Vec<usize>> {
        let mut y = x.to_vec();
        for layer in &self.layers {
            y = layer.forward(store, &y, batch, context)?;
        }
        Ok(y)
    }

    /// Conditioner passes recorded since the last reset.
    pub fn passes(&self) -> u64 {
        self.layers.iter().map(|l| l.passes().get()).sum()
    }

    pub fn reset_passes(&self) {
        self.layers.iter().for_each(|l| l.passes().reset());
    }
}

/// Integer form of the inverse map for one position, `σ⁻¹ (y − μ) mod K`.
pub fn inverse_symbol(y: usize, mu: usize, sigma: usize, k: Modulus) -> Result<usize> {
    let kk = k.get();
    let inv = mod_inverse(sigma, k)?;
    Ok(((y + kk - mu % kk) % kk * inv) % kk)
}
