use super::params::{ParamId, ParamStore};
use super::tensor::{argmax, Tensor};
use crate::error::{shape_err, FlowError, Result};
use crate::modular::{self, SigmaMask};

/// Finite stand-in for −∞ on masked logits.
pub const MASKED_LOGIT: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    ModAdd(Var, Var),
    ModSub(Var, Var),
    ModMul(Var, Var),
    ModDiv(Var, Var),
    StArgmax { input: Var, probs: Vec<f64>, tau: f64 },
    MaskedFill(Var, Vec<bool>),
    SumAll(Var),
    SumLast(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    BroadcastBatch(Var),
    SelectPositions(Var, Vec<usize>),
    MergePositions(Var, Var, Vec<usize>),
    EmbeddingLookup(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape in relaxed mode replaces the hard forward output of every
/// straight-through argmax node with its tempered softmax; the backward rule
/// is unchanged. That mode exists for checking gradients against finite
/// differences of the smooth surrogate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relaxed: bool,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let acc = store.get_mut(id).grad.data_mut();
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

impl Gradients {
    /// Adds parameter gradients into flat buffers indexed by [`ParamId`].
    pub fn accumulate_into(&self, bufs: &mut [Vec<f64>]) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (a, &b) in bufs[id.index()].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn relaxed() -> Self {
        Self {
            nodes: Vec::new(),
            relaxed: true,
        }
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, m, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * p];
        gemm(
            n,
            m,
            p,
            self.value(a).data(),
            (m as isize, 1),
            self.value(b).data(),
            (p as isize, 1),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` row to every row of a `[..., n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.shape(row) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let k = v.last_dim();
        let mut data = v.data().to_vec();
        data.chunks_mut(k).for_each(|row| softmax_in_place(row, 1.0));
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let k = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Picks `index[r]` from row `r` along the last axis; drops that axis.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        let k = v.last_dim();
        if index.len() != v.rows() || index.iter().any(|&i| i >= k) {
            return Err(shape_err(
                "gather",
                format!("{} indices into {:?}", index.len(), v.shape()),
            ));
        }
        let data = v.data().chunks(k).zip(&index).map(|(r, &i)| r[i]).collect();
        let shape = v.shape()[..v.shape().len() - 1].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather(a, index), rg))
    }

    fn bilinear(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        kernel: fn(&[f64], &[f64], &mut [f64]),
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let k = self.value(a).last_dim();
        let mut out = vec![0.0; self.value(a).len()];
        for ((ra, rb), ro) in self
            .value(a)
            .data()
            .chunks(k)
            .zip(self.value(b).data().chunks(k))
            .zip(out.chunks_mut(k))
        {
            kernel(ra, rb, ro);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op(a, b), rg))
    }

    fn check_scale_rows(&self, s: Var) -> Result<()> {
        let v = self.value(s);
        let k = v.last_dim();
        for row in v.data().chunks(k) {
            let mass = modular::masked_mass(row, k);
            if mass > modular::SCALE_MASS_TOL {
                return Err(FlowError::NonInvertibleMass { mass, modulus: k });
            }
        }
        Ok(())
    }

    /// Row-wise modular addition; identical to circular convolution over the last axis.
    pub fn mod_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bilinear("mod_add", a, b, modular::add_fwd, Op::ModAdd)
    }

    pub fn circular_convolution(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mod_add(a, b)
    }

    /// Row-wise `a − b` in the modular one-hot algebra.
    pub fn mod_sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bilinear("mod_sub", a, b, modular::sub_fwd, Op::ModSub)
    }

    /// Row-wise `s · a`; `s` must carry no mass on non-invertible scales.
    pub fn mod_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        self.check_scale_rows(s)?;
        self.bilinear("mod_mul", s, a, modular::mul_fwd, Op::ModMul)
    }

    /// Row-wise `s⁻¹ · a`.
    pub fn mod_div(&mut self, s: Var, a: Var) -> Result<Var> {
        self.check_scale_rows(s)?;
        self.bilinear("mod_div", s, a, modular::div_fwd, Op::ModDiv)
    }

    /// `mod_div` without the scale-mass check; used to inject faults in tests.
    pub fn mod_div_unchecked(&mut self, s: Var, a: Var) -> Result<Var> {
        self.bilinear("mod_div", s, a, modular::div_fwd, Op::ModDiv)
    }

    /// Straight-through one-hot argmax along the last axis.
    ///
    /// Forward: `one_hot(argmax(θ))` with ties to the lowest index (or
    /// `softmax(θ/τ)` on a relaxed tape). Backward: Jacobian of `softmax(θ/τ)`.
    pub fn st_one_hot_argmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(FlowError::InvalidTemperature(tau));
        }
        let v = self.value(a);
        let k = v.last_dim();
        let mut probs = v.data().to_vec();
        probs
            .chunks_mut(k)
            .for_each(|row| softmax_in_place(row, 1.0 / tau));
        let out = if self.relaxed {
            probs.clone()
        } else {
            let mut hard = vec![0.0; v.len()];
            for (row, h) in v.data().chunks(k).zip(hard.chunks_mut(k)) {
                h[argmax(row)] = 1.0;
            }
            hard
        };
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::StArgmax {
                input: a,
                probs,
                tau,
            },
            rg,
        ))
    }

    /// Replaces disallowed entries of the last axis with [`MASKED_LOGIT`].
    pub fn masked_fill(&mut self, a: Var, mask: &SigmaMask) -> Result<Var> {
        let v = self.value(a);
        let k = v.last_dim();
        if mask.len() != k {
            return Err(FlowError::LengthMismatch {
                expected: k,
                got: mask.len(),
            });
        }
        let allowed = mask.allowed().to_vec();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            for (x, &ok) in row.iter_mut().zip(&allowed) {
                if !ok {
                    *x = MASKED_LOGIT;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaskedFill(a, allowed), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let k = v.last_dim();
        let data = v.data().chunks(k).map(|r| r.iter().sum()).collect();
        let shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("rows"), Op::SumLast(a), rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn broadcast_batch(&mut self, a: Var, batch: usize) -> Var {
        let v = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(batch * v.len());
        for _ in 0..batch {
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("repeat"), Op::BroadcastBatch(a), rg)
    }

    /// Selects positions along axis 1 of a `[B, D, K]` tensor.
    pub fn select_positions(&mut self, a: Var, positions: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || positions.iter().any(|&p| p >= s[1]) {
            return Err(shape_err("select_positions", format!("{s:?} at {positions:?}")));
        }
        let (b, d, k) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(b * positions.len() * k);
        for bi in 0..b {
            for &p in positions {
                let off = (bi * d + p) * k;
                data.extend_from_slice(&src[off..off + k]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![b, positions.len(), k], data)?,
            Op::SelectPositions(a, positions.to_vec()),
            rg,
        ))
    }

    /// Copy of `a: [B, D, K]` with rows at `positions` replaced by `b: [B, P, K]`.
    pub fn merge_positions(&mut self, a: Var, b: Var, positions: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3
            || sb != [sa[0], positions.len(), sa[2]]
            || positions.iter().any(|&p| p >= sa[1])
        {
            return Err(shape_err("merge_positions", format!("{sa:?} <- {sb:?}")));
        }
        let (bn, d, k) = (sa[0], sa[1], sa[2]);
        let mut data = self.value(a).data().to_vec();
        let src = self.value(b).data();
        for bi in 0..bn {
            for (j, &p) in positions.iter().enumerate() {
                let dst = (bi * d + p) * k;
                let from = (bi * positions.len() + j) * k;
                data[dst..dst + k].copy_from_slice(&src[from..from + k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(sa, data)?,
            Op::MergePositions(a, b, positions.to_vec()),
            rg,
        ))
    }

    /// Gathers rows of a `[R, K]` table; output shape is `out_shape ++ [K]`.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        rows: Vec<usize>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let n: usize = out_shape.iter().product();
        if s.len() != 2 || rows.len() != n || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err(
                "embedding_lookup",
                format!("{} rows into {s:?}", rows.len()),
            ));
        }
        let k = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(n * k);
        for &r in &rows {
            data.extend_from_slice(&src[r * k..(r + 1) * k]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(k);
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(shape, data)?, Op::EmbeddingLookup(table, rows), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(FlowError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulates into the gradient slot of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, m, p) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    gemm(n, p, m, g, (p as isize, 1), bv, (1, p as isize), ga);
                });
                acc(*b, &mut |gb| {
                    gemm(m, n, p, av, (1, m as isize), g, (p as isize, 1), gb);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                let n = out.last_dim();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_assign(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for j in 0..ga.len() {
                    ga[j] += c * g[j];
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Softmax(a) => {
                let k = out.last_dim();
                acc(*a, &mut |ga| {
                    softmax_vjp(out.data(), g, k, 1.0, ga);
                });
            }
            Op::LogSoftmax(a) => {
                let k = out.last_dim();
                acc(*a, &mut |ga| {
                    for ((y, gr), gar) in out.data().chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            gar[j] += gr[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                let k = self.value(*a).last_dim();
                acc(*a, &mut |ga| {
                    for (r, &ix) in index.iter().enumerate() {
                        ga[r * k + ix] += g[r];
                    }
                });
            }
            Op::ModAdd(a, b) => {
                let k = out.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // addition is symmetric in its operands
                acc(*a, &mut |ga| rowwise(bv, g, ga, k, modular::add_grad_a));
                acc(*b, &mut |gb| rowwise(av, g, gb, k, modular::add_grad_a));
            }
            Op::ModSub(a, b) => {
                let k = out.last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| rowwise(bv, g, ga, k, modular::sub_grad_a));
                acc(*b, &mut |gb| rowwise(av, g, gb, k, modular::sub_grad_b));
            }
            Op::ModMul(s, a) => {
                let k = out.last_dim();
                let (sv, av) = (self.value(*s).data(), self.value(*a).data());
                acc(*s, &mut |gs| rowwise(av, g, gs, k, modular::mul_grad_s));
                acc(*a, &mut |ga| rowwise(sv, g, ga, k, modular::mul_grad_a));
            }
            Op::ModDiv(s, a) => {
                let k = out.last_dim();
                let (sv, av) = (self.value(*s).data(), self.value(*a).data());
                acc(*s, &mut |gs| rowwise(av, g, gs, k, modular::div_grad_s));
                acc(*a, &mut |ga| rowwise(sv, g, ga, k, modular::div_grad_a));
            }
            Op::StArgmax { input, probs, tau } => {
                let k = out.last_dim();
                acc(*input, &mut |ga| softmax_vjp(probs, g, k, 1.0 / tau, ga));
            }
            Op::MaskedFill(a, allowed) => {
                let k = allowed.len();
                acc(*a, &mut |ga| {
                    for (gar, gr) in ga.chunks_mut(k).zip(g.chunks(k)) {
                        for j in 0..k {
                            if allowed[j] {
                                gar[j] += gr[j];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumLast(a) => {
                let k = self.value(*a).last_dim();
                acc(*a, &mut |ga| {
                    for (gar, &gr) in ga.chunks_mut(k).zip(g) {
                        gar.iter_mut().for_each(|x| *x += gr);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_assign(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_assign(ga, g)),
            Op::BroadcastBatch(a) => {
                let n = self.value(*a).len();
                acc(*a, &mut |ga| {
                    for chunk in g.chunks(n) {
                        add_assign(ga, chunk);
                    }
                });
            }
            Op::SelectPositions(a, positions) => {
                let s = self.shape(*a);
                let (d, k) = (s[1], s[2]);
                let p = positions.len();
                acc(*a, &mut |ga| {
                    for bi in 0..s[0] {
                        for (j, &pos) in positions.iter().enumerate() {
                            let dst = (bi * d + pos) * k;
                            let src = (bi * p + j) * k;
                            add_assign(&mut ga[dst..dst + k], &g[src..src + k]);
                        }
                    }
                });
            }
            Op::MergePositions(a, b, positions) => {
                let s = out.shape();
                let (bn, d, k) = (s[0], s[1], s[2]);
                let p = positions.len();
                let mut replaced = vec![false; d];
                positions.iter().for_each(|&q| replaced[q] = true);
                acc(*a, &mut |ga| {
                    for bi in 0..bn {
                        for (pos, &r) in replaced.iter().enumerate() {
                            if !r {
                                let off = (bi * d + pos) * k;
                                add_assign(&mut ga[off..off + k], &g[off..off + k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..bn {
                        for (j, &pos) in positions.iter().enumerate() {
                            let src = (bi * d + pos) * k;
                            let dst = (bi * p + j) * k;
                            add_assign(&mut gb[dst..dst + k], &g[src..src + k]);
                        }
                    }
                });
            }
            Op::EmbeddingLookup(table, rows) => {
                let k = self.value(*table).last_dim();
                acc(*table, &mut |gt| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_assign(&mut gt[r * k..(r + 1) * k], &g[j * k..(j + 1) * k]);
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn rowwise(
    other: &[f64],
    g: &[f64],
    target: &mut [f64],
    k: usize,
    kernel: fn(&[f64], &[f64], &mut [f64]),
) {
    for ((o, gr), t) in other.chunks(k).zip(g.chunks(k)).zip(target.chunks_mut(k)) {
        kernel(o, gr, t);
    }
}

/// Numerically stable `softmax(scale · row)` in place.
pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Vector-Jacobian product of `softmax(scale · θ)` given its output `p`.
fn softmax_vjp(p: &[f64], g: &[f64], k: usize, scale: f64, ga: &mut [f64]) {
    for ((pr, gr), gar) in p.chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..k {
            gar[j] += scale * pr[j] * (gr[j] - dot);
        }
    }
}

/// `c += a · b` for row-major `a: [n, m]` and `b: [m, p]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    m: usize,
    p: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    if n == 0 || m == 0 || p == 0 {
        return;
    }
    // SAFETY: stride/extent pairs describe views fully inside `a`, `b` and `c`,
    // which are checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            p,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}
