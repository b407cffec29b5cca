use super::kernels::{self, Layout};
use super::{Float, ParamId, ParamStore, Tensor, NEG_MASK};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which parameter leaves take part in gradient computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter, including frozen ones.
    All,
    /// Nothing is differentiated.
    Inference,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    MaskFill {
        src: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Parameters are borrowed from the store, so every node's inputs precede it
/// and the backward sweep is a single reverse pass over `nodes`.
pub struct Tape<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    mode: GradMode,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.index()].as_ref()
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, GradMode::Trainable)
    }

    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, GradMode::Inference)
    }

    pub fn with_mode(params: &'p ParamStore<T>, mode: GradMode) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter leaves are stored by reference"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.mode != GradMode::Inference
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or differentiable input.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.mode != GradMode::Inference,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = match self.mode {
            GradMode::Trainable => self.params.is_trainable(id),
            GradMode::All => true,
            GradMode::Inference => false,
        };
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<((usize, usize), (usize, usize))> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(((sa[0], sa[1]), (sb[0], sb[1])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[d]` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() != 1 || xs.last() != bs.first() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        kernels::add_row_in_place(value.data_mut(), self.value(bias).data());
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x * c).collect(),
        )?;
        Ok(self.push(value, Op::Scale(a, c), &[a]))
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = self.matrix_dims("matmul", a, b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m x k] * [n x k]^T`, without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = self.matrix_dims("matmul_t", a, b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let n = value.cols();
        kernels::softmax_rows_in_place(value.data_mut(), n)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (out, mean, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )?;
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    /// Gathers rows of a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: ts.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::Tape("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: s,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Narrow {
                src: x,
                axis,
                start,
            },
            &[x],
        ))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.numel() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: src.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = src
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MaskFill {
                src: x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// `mask_fill` with the standard attention masking constant.
    pub fn mask_out(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.mask_fill(x, mask, T::of(NEG_MASK))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let vocab = s[1];
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocabulary { id, size: vocab });
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows_in_place(&mut probs, vocab)?;
        let src = self.value(logits).data();
        let mut out = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            out.push(lse - row[t]);
        }
        let value = Tensor::new(vec![targets.len()], out)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), &[x]))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_scaled(loss, T::one())
    }

    /// Back-propagates `seed * d(loss)`.
    pub fn backward_scaled(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape(
                "loss is detached from every differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let wants = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.as_ref().expect("leaf value").shape().to_vec();
                    leaves.push((Var(i), Tensor::new(shape, g)?));
                }
                Op::Param(id) => {
                    let shape = self.params.value(*id).shape().to_vec();
                    match &mut params[id.index()] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(Tensor::new(shape, g)?),
                    }
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if wants(bias) {
                        let d = self.value(*bias).numel();
                        let mut gb = vec![T::zero(); d];
                        for row in g.chunks(d) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if wants(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let bv = self.value(*b).data();
                        accumulate(
                            &mut grads,
                            *a,
                            g.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
                        );
                    }
                    if wants(b) {
                        let av = self.value(*a).data();
                        accumulate(
                            &mut grads,
                            *b,
                            g.iter().zip(av).map(|(&x, &y)| x * y).collect(),
                        );
                    }
                }
                Op::Scale(a, c) => {
                    if wants(a) {
                        accumulate(&mut grads, *a, g.iter().map(|&x| x * *c).collect());
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if wants(a) {
                        let mut ga = vec![T::zero(); m * k];
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::Normal,
                            self.value(*b).data(),
                            Layout::Transposed,
                            &mut ga,
                            false,
                        );
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(b) {
                        let mut gb = vec![T::zero(); k * n];
                        kernels::gemm(
                            k,
                            m,
                            n,
                            self.value(*a).data(),
                            Layout::Transposed,
                            &g,
                            Layout::Normal,
                            &mut gb,
                            false,
                        );
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[0];
                    if wants(a) {
                        let mut ga = vec![T::zero(); m * k];
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::Normal,
                            self.value(*b).data(),
                            Layout::Normal,
                            &mut ga,
                            false,
                        );
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(b) {
                        let mut gb = vec![T::zero(); n * k];
                        kernels::gemm(
                            n,
                            m,
                            k,
                            &g,
                            Layout::Transposed,
                            self.value(*a).data(),
                            Layout::Normal,
                            &mut gb,
                            false,
                        );
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    if wants(a) {
                        let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                        let mut ga = vec![T::zero(); r * c];
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] = g[j * r + i];
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Softmax(x) => {
                    if wants(x) {
                        let y = node.value.as_ref().expect("softmax output").data();
                        let n = self.value(*x).cols();
                        let mut gx = vec![T::zero(); y.len()];
                        for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                out[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    let d = gv.len();
                    let inv_d = T::one() / T::of(d as f64);
                    let mut ggain = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    let mut gx = if wants(x) {
                        vec![T::zero(); xv.len()]
                    } else {
                        Vec::new()
                    };
                    let mut xhat = vec![T::zero(); d];
                    let mut gxhat = vec![T::zero(); d];
                    for r in 0..xv.len() / d {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            xhat[j] = (row[j] - mean[r]) * rstd[r];
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                            gxhat[j] = gr[j] * gv[j];
                        }
                        if wants(x) {
                            let m1: T = gxhat.iter().copied().sum::<T>() * inv_d;
                            let m2: T =
                                gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                            for j in 0..d {
                                gx[r * d + j] = rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                    if wants(gain) {
                        accumulate(&mut grads, *gain, ggain);
                    }
                    if wants(bias) {
                        accumulate(&mut grads, *bias, gbias);
                    }
                    if wants(x) {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    if wants(x) {
                        let xv = self.value(*x).data();
                        accumulate(
                            &mut grads,
                            *x,
                            g.iter()
                                .zip(xv)
                                .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                                .collect(),
                        );
                    }
                }
                Op::Embedding { table, ids } => {
                    if wants(table) {
                        let ts = self.shape(*table);
                        let d = ts[1];
                        let mut gt = vec![T::zero(); ts[0] * d];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[r * d + j];
                            }
                        }
                        accumulate(&mut grads, *table, gt);
                    }
                }
                Op::Reshape(x) => {
                    if wants(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.as_ref().expect("concat output").shape();
                    let (outer, inner) = outer_inner(shape, *axis);
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis] * inner;
                        if wants(p) {
                            let mut gp = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let base = o * total + offset;
                                gp.extend_from_slice(&g[base..base + len]);
                            }
                            accumulate(&mut grads, *p, gp);
                        }
                        offset += len;
                    }
                }
                Op::Narrow { src, axis, start } => {
                    if wants(src) {
                        let s = self.shape(*src);
                        let (outer, inner) = outer_inner(s, *axis);
                        let len = node.value.as_ref().expect("narrow output").shape()[*axis];
                        let mut gs = vec![T::zero(); self.value(*src).numel()];
                        for o in 0..outer {
                            let dst = (o * s[*axis] + start) * inner;
                            let from = o * len * inner;
                            gs[dst..dst + len * inner]
                                .copy_from_slice(&g[from..from + len * inner]);
                        }
                        accumulate(&mut grads, *src, gs);
                    }
                }
                Op::MaskFill { src, mask } => {
                    if wants(src) {
                        accumulate(
                            &mut grads,
                            *src,
                            g.iter()
                                .zip(mask)
                                .map(|(&v, &m)| if m { T::zero() } else { v })
                                .collect(),
                        );
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    if wants(logits) {
                        let vocab = self.value(*logits).cols();
                        let mut gl = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &mut gl[r * vocab..(r + 1) * vocab];
                            row[t] -= T::one();
                            for v in row.iter_mut() {
                                *v *= g[r];
                            }
                        }
                        accumulate(&mut grads, *logits, gl);
                    }
                }
                Op::Sum(x) => {
                    if wants(x) {
                        accumulate(&mut grads, *x, vec![g[0]; self.value(*x).numel()]);
                    }
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { params, leaves })
    }
}
