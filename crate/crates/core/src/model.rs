//! Base distribution plus flow stack: likelihood, sampling, training and
//! checkpointing.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var, DEFAULT_TAU};
use crate::bases::{ArBase, Base, FactorizedBase};
use crate::conditioner::{default_window, Ordering};
use crate::datagen::Dataset;
use crate::error::{FlowError, Result};
use crate::flows::{alternating_mask, layer_ordering, ArFlowLayer, BipartiteFlowLayer, FlowLayer, FlowStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Factorized,
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    None,
    Autoregressive,
    Bipartite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionerKind {
    #[default]
    Masked,
    Embedding,
}

/// Conditioning input: `len` symbols over `k` classes, one-hot encoded and
/// concatenated into every conditioner layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub len: usize,
    pub k: usize,
}

impl ContextSpec {
    pub fn dim(&self) -> usize {
        self.len * self.k
    }
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub k: usize,
    pub base: BaseKind,
    pub flow: FlowKind,
    pub flow_count: usize,
    #[serde(default)]
    pub use_scale: bool,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Widths of the autoregressive base network; defaults to `hidden`.
    #[serde(default)]
    pub base_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub conditioner: ConditionerKind,
    /// Embedding-table window; defaults to `min(D − 1, 3)`.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub context: Option<ContextSpec>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Per-layer generation orders for autoregressive flows.
    #[serde(default)]
    pub orderings: Option<Vec<Vec<usize>>>,
    /// Per-layer kept-position masks for bipartite flows.
    #[serde(default)]
    pub masks: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub base_ordering: Option<Vec<usize>>,
    /// Half-width of the uniform init for flow output weights. Zero keeps
    /// every flow at the identity until training moves it.
    #[serde(default)]
    pub flow_init: f64,
    /// Bipartite layers: limits each transformed position's direct
    /// connections to kept positions within this distance.
    #[serde(default)]
    pub coupling_window: Option<usize>,
}

impl ModelConfig {
    /// Minimal configuration with defaults for everything but the shape.
    pub fn new(d: usize, k: usize, base: BaseKind, flow: FlowKind, flow_count: usize) -> Self {
        Self {
            d,
            k,
            base,
            flow,
            flow_count,
            use_scale: false,
            hidden: default_hidden(),
            base_hidden: None,
            conditioner: ConditionerKind::Masked,
            window: None,
            context: None,
            tau: DEFAULT_TAU,
            orderings: None,
            masks: None,
            base_ordering: None,
            flow_init: 0.0,
            coupling_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::InvalidConfig(m));
        if self.d == 0 {
            return bad("model.d must be at least 1".into());
        }
        if !(2..=crate::modular::MAX_MODULUS).contains(&self.k) {
            return bad(format!("model.k = {} outside [2, {}]", self.k, crate::modular::MAX_MODULUS));
        }
        if !(self.flow_init >= 0.0 && self.flow_init.is_finite()) {
            return bad(format!("model.flow_init = {} must be finite and non-negative", self.flow_init));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(FlowError::InvalidTemperature(self.tau));
        }
        if self.flow == FlowKind::None && self.flow_count != 0 {
            return bad("model.flow_count must be 0 when model.flow is none".into());
        }
        if self.flow != FlowKind::None && self.flow_count == 0 {
            return bad("model.flow_count must be positive for a flow model".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("model.hidden must list positive widths".into());
        }
        if self.conditioner == ConditionerKind::Embedding {
            if self.flow != FlowKind::Autoregressive {
                return bad("model.conditioner = embedding requires autoregressive flows".into());
            }
            if self.use_scale {
                return bad("model.use_scale is not supported by the embedding conditioner".into());
            }
            if self.context.is_some() {
                return bad("model.context is not supported by the embedding conditioner".into());
            }
        }
        if self.flow == FlowKind::Bipartite && self.d < 2 {
            return bad("bipartite flows need model.d ≥ 2".into());
        }
        if self.coupling_window.is_some() && self.flow != FlowKind::Bipartite {
            return bad("model.coupling_window applies only to bipartite flows".into());
        }
        if self.coupling_window == Some(0) {
            return bad("model.coupling_window must be at least 1".into());
        }
        if let Some(o) = &self.orderings {
            if o.len() != self.flow_count {
                return bad(format!("model.orderings has {} entries, flow_count is {}", o.len(), self.flow_count));
            }
        }
        if let Some(m) = &self.masks {
            if m.len() != self.flow_count {
                return bad(format!("model.masks has {} entries, flow_count is {}", m.len(), self.flow_count));
            }
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        self.context.map_or(0, |c| c.dim())
    }
}

/// Bookkeeping carried into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
}

/// 64-bit FNV-1a over the canonical JSON form of a config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Conditioning symbols for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ContextBatch<'a> {
    pub symbols: &'a [usize],
    pub spec: ContextSpec,
}

#[derive(Debug, Clone)]
pub struct DiscreteFlowModel {
    config: ModelConfig,
    meta: ModelMeta,
    store: ParamStore,
    base: Base,
    stack: FlowStack,
}

/// Conditioner passes used by one sampling call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub flow_passes: u64,
    pub base_passes: u64,
}

impl PassReport {
    pub fn total(&self) -> u64 {
        self.flow_passes + self.base_passes
    }
}

impl DiscreteFlowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_meta(
            config,
            ModelMeta {
                task: String::new(),
                seed,
                config_hash: String::new(),
            },
        )
    }

    pub fn with_meta(config: ModelConfig, mut meta: ModelMeta) -> Result<Self> {
        config.validate()?;
        meta.config_hash = config_hash(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let mut store = ParamStore::new();
        let (d, k) = (config.d, config.k);
        let ctx = config.context_dim();

        let mut layers = Vec::with_capacity(config.flow_count);
        for i in 0..config.flow_count {
            let name = format!("flow{i}");
            let layer = match config.flow {
                FlowKind::None => unreachable!("validated"),
                FlowKind::Autoregressive => {
                    let ordering = match &config.orderings {
                        Some(o) => Ordering::new(o[i].clone())?,
                        None => layer_ordering(d, i),
                    };
                    if ordering.len() != d {
                        return Err(FlowError::InvalidConfig(format!(
                            "model.orderings[{i}] has length {}, expected {d}",
                            ordering.len()
                        )));
                    }
                    FlowLayer::Autoregressive(match config.conditioner {
                        ConditionerKind::Masked => ArFlowLayer::with_masked_conditioner(
                            d,
                            k,
                            config.hidden.clone(),
                            ordering,
                            config.use_scale,
                            ctx,
                            config.tau,
                            &mut store,
                            &name,
                            &mut rng,
                        )?,
                        ConditionerKind::Embedding => ArFlowLayer::with_embedding_table(
                            d,
                            k,
                            config.window.unwrap_or_else(|| default_window(d)),
                            ordering,
                            config.tau,
                            &mut store,
                            &name,
                        )?,
                    })
                }
                FlowKind::Bipartite => {
                    let keep = match &config.masks {
                        Some(m) => m[i].clone(),
                        None => alternating_mask(d, i),
                    };
                    FlowLayer::Bipartite(BipartiteFlowLayer::new(
                        d,
                        k,
                        &keep,
                        &config.hidden,
                        config.use_scale,
                        ctx,
                        config.coupling_window,
                        config.tau,
                        &mut store,
                        &name,
                        &mut rng,
                    )?)
                }
            };
            layers.push(layer);
        }

        let base = match config.base {
            BaseKind::Factorized => {
                if ctx > 0 {
                    return Err(FlowError::InvalidConfig(
                        "model.context requires an autoregressive base".into(),
                    ));
                }
                Base::Factorized(FactorizedBase::new(d, k, &mut store, "base"))
            }
            BaseKind::Autoregressive => {
                let ordering = match &config.base_ordering {
                    Some(o) => Ordering::new(o.clone())?,
                    None => Ordering::natural(d),
                };
                Base::Autoregressive(ArBase::new(
                    d,
                    k,
                    config.base_hidden.clone().unwrap_or_else(|| config.hidden.clone()),
                    ordering,
                    ctx,
                    &mut store,
                    "base",
                    &mut rng,
                )?)
            }
        };

        if config.flow_init > 0.0 {
            let a = config.flow_init;
            let is_output = |n: &str| [".out.", ".direct.", ".table"].iter().any(|t| n.contains(t));
            for p in store.iter_mut().filter(|p| p.name.starts_with("flow") && is_output(&p.name)) {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
            }
        }

        Ok(Self {
            config,
            meta,
            store,
            base,
            stack: FlowStack::new(layers),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn set_task(&mut self, task: impl Into<String>) {
        self.meta.task = task.into();
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn base(&self) -> &Base {
        &self.base
    }

    pub fn stack(&self) -> &FlowStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut FlowStack {
        &mut self.stack
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// Overwrites every parameter with uniform draws from `[−scale, scale]`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.store.iter_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..=scale));
        }
    }

    fn context_tensor(&self, context: Option<ContextBatch<'_>>, batch: usize) -> Result<Option<Tensor>> {
        match (self.config.context, context) {
            (None, None) => Ok(None),
            (Some(spec), Some(c)) => {
                if c.spec != spec {
                    return Err(FlowError::InvalidConfig(format!(
                        "context {:?} does not match model context {spec:?}",
                        c.spec
                    )));
                }
                let t = Tensor::one_hot(c.symbols, batch, spec.len, spec.k)?;
                Ok(Some(Tensor::new(vec![batch, spec.dim()], t.into_data())?))
            }
            (Some(_), None) => Err(FlowError::InvalidConfig("model requires context".into())),
            (None, Some(_)) => Err(FlowError::InvalidConfig("model takes no context".into())),
        }
    }

    /// Records `−log p(y)` per example on `tape`; returns a `[B]` variable.
    pub fn nll_on_tape(
        &self,
        tape: &mut Tape,
        y: &[usize],
        context: Option<ContextBatch<'_>>,
    ) -> Result<Var> {
        let (d, k) = (self.config.d, self.config.k);
        if y.len() % d != 0 {
            return Err(FlowError::LengthMismatch {
                expected: d * (y.len() / d + 1),
                got: y.len(),
            });
        }
        let batch = y.len() / d;
        let yv = tape.constant(Tensor::one_hot(y, batch, d, k)?);
        let ctx = self.context_tensor(context, batch)?.map(|c| tape.constant(c));
        let x = self.stack.inverse(tape, &self.store, yv, ctx)?;
        let lp = self.base.log_prob(tape, &self.store, x, ctx)?;
        Ok(tape.scale(lp, -1.0))
    }

    /// Per-example negative log-likelihood in nats.
    pub fn nll(&self, y: &[usize], context: Option<ContextBatch<'_>>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.nll_on_tape(&mut tape, y, context)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// NLL of a whole dataset, evaluated in fixed-size chunks in parallel.
    pub fn dataset_nll(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        let n = data.len();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| self.nll(data.rows(s, e), data.context_batch(s, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.d != self.config.d || data.k != self.config.k {
            return Err(FlowError::ManifestMismatch(format!(
                "dataset has D={}, K={}; model has D={}, K={}",
                data.d, data.k, self.config.d, self.config.k
            )));
        }
        match (data.context_spec(), self.config.context) {
            (a, b) if a == b => Ok(()),
            (a, b) => Err(FlowError::ManifestMismatch(format!(
                "dataset context {a:?} vs model context {b:?}"
            ))),
        }
    }

    /// Draws `n` sequences: `x ~ base`, `y = forward(x)`.
    pub fn sample(
        &self,
        n: usize,
        seed: u64,
        context: Option<ContextBatch<'_>>,
    ) -> Result<(Vec<usize>, PassReport)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = self.context_tensor(context, n)?;
        self.stack.reset_passes();
        self.base.reset_passes();
        let x = self.base.sample(&self.store, n, &mut rng, ctx.as_ref())?;
        let y = self.stack.forward(&self.store, &x, n, ctx.as_ref())?;
        let report = PassReport {
            flow_passes: self.stack.passes(),
            base_passes: self.base.passes(),
        };
        Ok((y, report))
    }

    /// Forward transform of base-space sequences.
    pub fn forward(&self, x: &[usize], context: Option<ContextBatch<'_>>) -> Result<Vec<usize>> {
        let n = x.len() / self.config.d;
        let ctx = self.context_tensor(context, n)?;
        self.stack.forward(&self.store, x, n, ctx.as_ref())
    }

    /// Inverse transform of data-space sequences.
    pub fn inverse(&self, y: &[usize], context: Option<ContextBatch<'_>>) -> Result<Vec<usize>> {
        let n = y.len() / self.config.d;
        let ctx = self.context_tensor(context, n)?;
        self.stack
            .inverse_symbols(&self.store, y, n, self.config.d, self.config.k, ctx.as_ref())
    }
}

const EVAL_CHUNK: usize = 256;
const GRAD_CHUNK: usize = 16;

/// Converts a per-sequence NLL in nats to bits per symbol.
pub fn bits_per_char(nll_nats: f64, d: usize) -> f64 {
    nll_nats / (d as f64 * std::f64::consts::LN_2)
}

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    64
}
fn d_steps() -> usize {
    1000
}
fn d_clip() -> f64 {
    5.0
}
fn d_eval_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    /// Steps at the start of training during which flow layers stay frozen
    /// and only the base is updated.
    #[serde(default)]
    pub flow_warmup: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            batch_size: d_batch(),
            steps: d_steps(),
            seed: 0,
            clip_norm: d_clip(),
            eval_every: d_eval_every(),
            flow_warmup: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if self.steps == 0 {
            return bad("optimizer.steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("optimizer.batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("optimizer.eval_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One logged interval of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean minibatch NLL (nats per sequence) since the previous record.
    pub train_nll: f64,
    pub eval_nll: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub final_train_nll: f64,
    pub final_eval_nll: Option<f64>,
    /// Conditioner passes spent during training (one per layer per chunk).
    pub flow_passes: u64,
}

impl TrainReport {
    /// Metrics CSV with header `step,train_nll,eval_nll,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_nll,eval_nll,wall_ms\n");
        for r in &self.records {
            let eval = r.eval_nll.map(|v| format!("{v:.10}")).unwrap_or_default();
            out.push_str(&format!("{},{:.10},{},{}\n", r.step, r.train_nll, eval, r.wall_ms));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Maximum-likelihood training with Adam on uniformly drawn minibatches.
///
/// Per-step gradients are computed over fixed chunks of the minibatch in
/// parallel and reduced in chunk order, so results do not depend on the
/// thread count.
pub fn train(
    model: &mut DiscreteFlowModel,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    opt: &OptimizerConfig,
) -> Result<TrainReport> {
    opt.validate()?;
    if train_data.is_empty() {
        return Err(FlowError::InvalidConfig("training dataset is empty".into()));
    }
    model.check_dataset(train_data)?;
    if let Some(e) = eval_data {
        model.check_dataset(e)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        },
        &model.store,
    );
    model.stack.reset_passes();
    let shapes: Vec<usize> = model.store.iter().map(|p| p.value.len()).collect();
    let mut records = Vec::new();
    let mut window = Vec::new();
    let mut last_train = f64::NAN;
    let mut last_eval = None;
    let b = opt.batch_size;

    for step in 1..=opt.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train_data.len())).collect();
        let batch = train_data.select(&idx);
        let chunks: Vec<(usize, usize)> = (0..b)
            .step_by(GRAD_CHUNK)
            .map(|s| (s, (s + GRAD_CHUNK).min(b)))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| -> Result<(f64, Vec<Vec<f64>>)> {
                let mut tape = Tape::new();
                let nll = model.nll_on_tape(&mut tape, batch.rows(s, e), batch.context_batch(s, e))?;
                let total = tape.sum(nll);
                let loss = tape.scale(total, 1.0 / b as f64);
                let grads = tape.backward(loss)?;
                let mut bufs: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
                grads.accumulate_into(&mut bufs);
                Ok((tape.value(total).item(), bufs))
            })
            .collect::<Result<Vec<_>>>()?;

        model.store.zero_grad();
        let mut loss_sum = 0.0;
        for (l, bufs) in &parts {
            loss_sum += l;
            for (p, g) in model.store.iter_mut().zip(bufs) {
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
        }
        let loss = loss_sum / b as f64;
        if !loss.is_finite() || !model.store.grad_norm().is_finite() {
            return Err(FlowError::DivergedLoss { step, value: loss });
        }
        if step <= opt.flow_warmup {
            for p in model.store.iter_mut().filter(|p| p.name.starts_with("flow")) {
                p.grad.data_mut().fill(0.0);
            }
        }
        model.store.clip_grad_norm(opt.clip_norm);
        adam.step(&mut model.store);
        window.push(loss);

        if step % opt.eval_every == 0 || step == opt.steps {
            let eval_nll = match eval_data {
                Some(e) => Some(mean(&model.dataset_nll(e)?)),
                None => None,
            };
            last_train = mean(&window);
            last_eval = eval_nll;
            window.clear();
            records.push(TrainRecord {
                step,
                train_nll: last_train,
                eval_nll,
                wall_ms: start.elapsed().as_millis(),
            });
        }
    }
    Ok(TrainReport {
        records,
        final_train_nll: last_train,
        final_eval_nll: last_eval,
        flow_passes: model.stack.passes(),
    })
}

const MAGIC: &[u8; 4] = b"DFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

impl DiscreteFlowModel {
    /// Serializes to `DFLW | version u32 | manifest length u32 | manifest JSON | f64 payload`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .store
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    len: p.value.len(),
                };
                offset += p.value.len();
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mismatch = |m: &str| FlowError::ManifestMismatch(m.into());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(mismatch("missing DFLW header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FlowError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| mismatch("manifest truncated"))?;
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| FlowError::ManifestMismatch(format!("manifest: {e}")))?;
        let payload = &bytes[12 + len..];
        if payload.len() % 8 != 0 {
            return Err(mismatch("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = Self::with_meta(manifest.config, manifest.meta.clone())?;
        model.meta = manifest.meta;
        if manifest.tensors.len() != model.store.len() {
            return Err(FlowError::ManifestMismatch(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                model.store.len()
            )));
        }
        let mut expect_offset = 0;
        for (entry, p) in manifest.tensors.iter().zip(model.store.iter()) {
            if entry.name != p.name
                || entry.shape != p.value.shape()
                || entry.len != p.value.len()
                || entry.offset != expect_offset
            {
                return Err(FlowError::ManifestMismatch(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            expect_offset += entry.len;
        }
        model.store.load_flat(&values)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpc_examples() {
        assert!((bits_per_char(2f64.ln(), 1) - 1.0).abs() < 1e-15);
        assert!((bits_per_char(256.0 * 27f64.ln(), 256) - 27f64.log2()).abs() < 1e-12);
        assert!((bits_per_char(245.0, 256) - 1.381).abs() < 5e-4);
    }

    #[test]
    fn empty_stack_equals_base() {
        let m = DiscreteFlowModel::new(ModelConfig::new(3, 4, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
        for v in m.nll(&[0, 1, 2, 3, 3, 3], None).unwrap() {
            assert!((v - 3.0 * 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(3, 4, BaseKind::Factorized, FlowKind::Autoregressive, 0);
        assert!(c.validate().is_err());
        c.flow_count = 1;
        c.tau = 0.0;
        assert!(matches!(c.validate(), Err(FlowError::InvalidTemperature(_))));
    }

    #[test]
    fn version_mismatch_reports_version() {
        let m = DiscreteFlowModel::new(ModelConfig::new(2, 2, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
        let mut bytes = m.to_bytes();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        match DiscreteFlowModel::from_bytes(&bytes) {
            Err(FlowError::VersionMismatch { found: 0, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
