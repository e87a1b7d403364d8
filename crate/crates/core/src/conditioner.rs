//! Networks that map context symbols to location (and optional scale) logits.
//!
//! Three conditioners are provided:
//! - [`MadeConditioner`]: a masked dense network whose output for a position
//!   depends only on positions earlier in an [`Ordering`] (plus context);
//! - [`CouplingConditioner`]: a dense network over the kept positions of a
//!   bipartite layer, emitting logits for the transformed positions;
//! - [`EmbeddingTableConditioner`]: a lookup table of location logits keyed by
//!   the `w` symbols preceding each position.

use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, FlowError, Result};

/// Generation order over positions: `perm[p]` is the position generated `p`-th.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ordering {
    perm: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(FlowError::InvalidConfig(format!(
                    "ordering {perm:?} is not a permutation"
                )));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn natural(d: usize) -> Self {
        Self {
            perm: (0..d).collect(),
        }
    }

    pub fn reversed(d: usize) -> Self {
        Self {
            perm: (0..d).rev().collect(),
        }
    }

    pub fn reverse(&self) -> Self {
        Self {
            perm: self.perm.iter().rev().copied().collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `rank[pos]` is the step at which `pos` is generated.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.perm.len()];
        for (r, &p) in self.perm.iter().enumerate() {
            rank[p] = r;
        }
        rank
    }
}

/// Counts conditioner evaluations.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(AtomicOrdering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, AtomicOrdering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

/// One (optionally masked) affine map with an optional unmasked context path.
#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
    mask: Option<Tensor>,
    ctx_weight: Option<ParamId>,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        ctx_dim: usize,
        bias: bool,
        mask: Option<Tensor>,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = if zero_init {
            Tensor::zeros(vec![fan_in, fan_out])
        } else {
            glorot(rng, fan_in, fan_out)
        };
        let weight = store.add(format!("{name}.w"), w);
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])));
        let ctx_weight = (ctx_dim > 0).then(|| {
            let w = if zero_init {
                Tensor::zeros(vec![ctx_dim, fan_out])
            } else {
                glorot(rng, ctx_dim, fan_out)
            };
            store.add(format!("{name}.ctx"), w)
        });
        Self {
            weight,
            bias,
            mask,
            ctx_weight,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: Option<Var>,
    ) -> Result<Var> {
        let mut w = tape.param(store, self.weight);
        if let Some(mask) = &self.mask {
            let m = tape.constant(mask.clone());
            w = tape.mul(w, m)?;
        }
        let mut out = tape.matmul(x, w)?;
        if let (Some(cw), Some(c)) = (self.ctx_weight, ctx) {
            let cw = tape.param(store, cw);
            let cz = tape.matmul(c, cw)?;
            out = tape.add(out, cz)?;
        }
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            out = tape.add_row(out, b)?;
        }
        Ok(out)
    }
}

/// Dense network with an extra direct input-to-output map.
#[derive(Debug, Clone)]
struct Mlp {
    hidden: Vec<Dense>,
    output: Dense,
    direct: Dense,
}

impl Mlp {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: Option<Var>,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            let z = layer.forward(tape, store, h, ctx)?;
            h = tape.relu(z);
        }
        let out = self.output.forward(tape, store, h, ctx)?;
        let skip = self.direct.forward(tape, store, x, None)?;
        tape.add(out, skip)
    }
}

/// Configuration of a masked autoregressive conditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConditionerConfig {
    pub d: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub ordering: Ordering,
    pub emit_scale: bool,
    pub context_dim: usize,
}

impl MaskedConditionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k < 2 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(FlowError::InvalidConfig(format!(
                "masked conditioner needs D ≥ 1, K ≥ 2 and nonempty positive widths (D={}, K={}, widths={:?})",
                self.d, self.k, self.hidden
            )));
        }
        if self.ordering.len() != self.d {
            return Err(FlowError::InvalidConfig(format!(
                "ordering length {} does not match D = {}",
                self.ordering.len(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Masked dense conditioner: logits for position `d` see only earlier positions.
#[derive(Debug, Clone)]
pub struct MadeConditioner {
    cfg: MaskedConditionerConfig,
    net: Mlp,
    passes: PassCounter,
}

fn hidden_degrees(width: usize, d: usize) -> Vec<usize> {
    (0..width)
        .map(|j| if width >= d { j % d } else { j * d / width })
        .collect()
}

fn mask_tensor(rows: &[usize], cols: &[usize], connect: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| if connect(r, c) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![rows.len(), cols.len()], data).expect("sized")
}

impl MadeConditioner {
    pub fn new(
        cfg: MaskedConditionerConfig,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, k) = (cfg.d, cfg.k);
        let rank = cfg.ordering.ranks();
        // degree of an input unit = rank of its position + 1
        let in_deg: Vec<usize> = (0..d * k).map(|i| rank[i / k] + 1).collect();
        let blocks = if cfg.emit_scale { 2 } else { 1 };
        let out_rank: Vec<usize> = (0..blocks * d * k).map(|c| rank[(c % (d * k)) / k]).collect();

        let mut hidden = Vec::new();
        let mut prev_deg = in_deg.clone();
        let mut fan_in = d * k;
        for (l, &width) in cfg.hidden.iter().enumerate() {
            let deg = hidden_degrees(width, d);
            let mask = mask_tensor(&prev_deg, &deg, |p, h| p <= h);
            hidden.push(Dense::new(
                store,
                &format!("{name}.h{l}"),
                fan_in,
                width,
                cfg.context_dim,
                true,
                Some(mask),
                false,
                rng,
            ));
            prev_deg = deg;
            fan_in = width;
        }
        let out_mask = mask_tensor(&prev_deg, &out_rank, |h, r| h <= r);
        let output = Dense::new(
            store,
            &format!("{name}.out"),
            fan_in,
            out_rank.len(),
            cfg.context_dim,
            true,
            Some(out_mask),
            true,
            rng,
        );
        let direct_mask = mask_tensor(&in_deg, &out_rank, |i, r| i <= r);
        let direct = Dense::new(
            store,
            &format!("{name}.direct"),
            d * k,
            out_rank.len(),
            0,
            false,
            Some(direct_mask),
            true,
            rng,
        );
        Ok(Self {
            cfg,
            net: Mlp {
                hidden,
                output,
                direct,
            },
            passes: PassCounter::default(),
        })
    }

    pub fn config(&self) -> &MaskedConditionerConfig {
        &self.cfg
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// Location logits `[B, D, K]` and, if configured, scale logits `[B, D, K]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        context: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let (d, k) = (self.cfg.d, self.cfg.k);
        let s = tape.shape(y).to_vec();
        if s.len() != 3 || s[1] != d || s[2] != k {
            return Err(shape_err("masked_forward", format!("input {s:?}, want [B, {d}, {k}]")));
        }
        let b = s[0];
        let ctx = check_context(tape, context, b, self.cfg.context_dim, "masked_forward")?;
        self.passes.bump();
        let x = tape.reshape(y, vec![b, d * k])?;
        let out = self.net.forward(tape, store, x, ctx)?;
        split_logits(tape, out, b, d, k, self.cfg.emit_scale)
    }
}

fn check_context(
    tape: &Tape,
    context: Option<Var>,
    batch: usize,
    dim: usize,
    op: &'static str,
) -> Result<Option<Var>> {
    match (context, dim) {
        (None, 0) => Ok(None),
        (Some(_), 0) => Err(shape_err(op, "context given to an unconditional network")),
        (Some(c), dim) => {
            if tape.shape(c) != [batch, dim] {
                return Err(shape_err(
                    op,
                    format!("context {:?}, want [{batch}, {dim}]", tape.shape(c)),
                ));
            }
            Ok(Some(c))
        }
        (None, _) => Err(shape_err(op, "context required")),
    }
}

fn split_logits(
    tape: &mut Tape,
    out: Var,
    b: usize,
    d: usize,
    k: usize,
    emit_scale: bool,
) -> Result<(Var, Option<Var>)> {
    if !emit_scale {
        return Ok((tape.reshape(out, vec![b, d, k])?, None));
    }
    // [B, 2·D·K] → [B, 2·D, K]; positions 0..D are location, D..2D scale
    let both = tape.reshape(out, vec![b, 2 * d, k])?;
    let loc: Vec<usize> = (0..d).collect();
    let scale: Vec<usize> = (d..2 * d).collect();
    let l = tape.select_positions(both, &loc)?;
    let s = tape.select_positions(both, &scale)?;
    Ok((l, Some(s)))
}

/// Dense conditioner of a bipartite layer.
#[derive(Debug, Clone)]
pub struct CouplingConditioner {
    k: usize,
    kept: usize,
    transformed: usize,
    emit_scale: bool,
    context_dim: usize,
    net: Mlp,
    passes: PassCounter,
}

impl CouplingConditioner {
    #[allow(clippy::too_many_arguments)]
    ///
    /// With `window = Some(w)`, the direct input-to-output map of each
    /// transformed position only sees kept positions at distance ≤ `w`.
    pub fn new(
        kept_pos: &[usize],
        transformed_pos: &[usize],
        k: usize,
        hidden: &[usize],
        emit_scale: bool,
        context_dim: usize,
        window: Option<usize>,
        store: &mut ParamStore,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kept, transformed) = (kept_pos.len(), transformed_pos.len());
        if kept == 0 || transformed == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(FlowError::InvalidConfig(format!(
                "coupling conditioner needs kept, transformed and widths positive (kept={kept}, transformed={transformed}, widths={hidden:?})"
            )));
        }
        let blocks = if emit_scale { 2 } else { 1 };
        let out_dim = blocks * transformed * k;
        let mut layers = Vec::new();
        let mut fan_in = kept * k;
        for (l, &width) in hidden.iter().enumerate() {
            layers.push(Dense::new(
                store,
                &format!("{name}.h{l}"),
                fan_in,
                width,
                context_dim,
                true,
                None,
                false,
                rng,
            ));
            fan_in = width;
        }
        let output = Dense::new(
            store,
            &format!("{name}.out"),
            fan_in,
            out_dim,
            context_dim,
            true,
            None,
            true,
            rng,
        );
        let direct = Dense::new(
            store,
            &format!("{name}.direct"),
            kept * k,
            out_dim,
            0,
            false,
            window.map(|w| {
                let rows: Vec<usize> = kept_pos.iter().flat_map(|&p| std::iter::repeat_n(p, k)).collect();
                let cols: Vec<usize> = (0..blocks)
                    .flat_map(|_| transformed_pos.iter().flat_map(|&p| std::iter::repeat_n(p, k)))
                    .collect();
                mask_tensor(&rows, &cols, |r, c| r.abs_diff(c) <= w)
            }),
            true,
            rng,
        );
        Ok(Self {
            k,
            kept,
            transformed,
            emit_scale,
            context_dim,
            net: Mlp {
                hidden: layers,
                output,
                direct,
            },
            passes: PassCounter::default(),
        })
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// `y_kept: [B, kept, K]` → logits `[B, transformed, K]` (and scale logits).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y_kept: Var,
        context: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let s = tape.shape(y_kept).to_vec();
        if s.len() != 3 || s[1] != self.kept || s[2] != self.k {
            return Err(shape_err(
                "coupling_forward",
                format!("input {s:?}, want [B, {}, {}]", self.kept, self.k),
            ));
        }
        let b = s[0];
        let ctx = check_context(tape, context, b, self.context_dim, "coupling_forward")?;
        self.passes.bump();
        let x = tape.reshape(y_kept, vec![b, self.kept * self.k])?;
        let out = self.net.forward(tape, store, x, ctx)?;
        split_logits(tape, out, b, self.transformed, self.k, self.emit_scale)
    }
}

/// Table of location logits keyed by the `window` symbols preceding each
/// position in an ordering; earlier-than-start slots hold a reserved pad symbol.
#[derive(Debug, Clone)]
pub struct EmbeddingTableConditioner {
    d: usize,
    k: usize,
    window: usize,
    ordering: Ordering,
    table: ParamId,
    passes: PassCounter,
}

/// Default context window for the embedding table.
pub fn default_window(d: usize) -> usize {
    d.saturating_sub(1).min(3)
}

impl EmbeddingTableConditioner {
    pub fn new(
        d: usize,
        k: usize,
        window: usize,
        ordering: Ordering,
        store: &mut ParamStore,
        name: &str,
    ) -> Result<Self> {
        if window > d || ordering.len() != d {
            return Err(FlowError::InvalidConfig(format!(
                "embedding window {window} with D = {d} and ordering of length {}",
                ordering.len()
            )));
        }
        let contexts = (k + 1)
            .checked_pow(window as u32)
            .filter(|&c| c.saturating_mul(d).saturating_mul(k) <= 50_000_000)
            .ok_or_else(|| {
                FlowError::InvalidConfig(format!("embedding table for K={k}, w={window} is too large"))
            })?;
        let table = store.add(format!("{name}.table"), Tensor::zeros(vec![d * contexts, k]));
        Ok(Self {
            d,
            k,
            window,
            ordering,
            table,
            passes: PassCounter::default(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// Table row used for position `pos` given the symbols of one sequence.
    pub fn row_for(&self, symbols: &[usize], pos: usize) -> usize {
        let pad = self.k;
        let rank = self.ordering.ranks()[pos];
        let mut index = 0;
        for i in 0..self.window {
            let sym = if rank > i {
                symbols[self.ordering.perm()[rank - 1 - i]]
            } else {
                pad
            };
            index = index * (self.k + 1) + sym;
        }
        pos * (self.k + 1).pow(self.window as u32) + index
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 3 || s[1] != self.d || s[2] != self.k {
            return Err(shape_err(
                "embedding_forward",
                format!("input {s:?}, want [B, {}, {}]", self.d, self.k),
            ));
        }
        self.passes.bump();
        let symbols = tape.value(y).argmax_last();
        let mut rows = Vec::with_capacity(s[0] * self.d);
        for seq in symbols.chunks(self.d) {
            for pos in 0..self.d {
                rows.push(self.row_for(seq, pos));
            }
        }
        let table = tape.param(store, self.table);
        tape.embedding_lookup(table, rows, &[s[0], self.d])
    }
}
