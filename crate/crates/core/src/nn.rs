//! Transformer building blocks shared by the vision encoder, the bridge and
//! the language model. Each block owns parameter ids; values stay in the
//! [`ParamStore`].

use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::kernels::{self, Layout};
use crate::tensor::{Float, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
}

fn init_tensor<T: Float>(shape: Vec<usize>, init: Init, seed: u64, name: &str) -> Tensor<T> {
    match init {
        Init::Normal(std) => normal_tensor(shape, std, seed, name),
        Init::Zeros => Tensor::zeros(shape),
    }
}

pub fn register_weight<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: Vec<usize>,
    init: Init,
    kind: ParamKind,
    seed: u64,
) -> Result<ParamId> {
    store.register(name, init_tensor(shape, init, seed, name), kind)
}

/// Affine map `x W + b` with `W: [in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let w = register_weight(
            store,
            &format!("{name}.w"),
            vec![d_in, d_out],
            init,
            ParamKind::Weight,
            seed,
        )?;
        let b = store.register(
            &format!("{name}.b"),
            Tensor::zeros(vec![d_out]),
            ParamKind::Bias,
        )?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Tape-free evaluation on `rows x d_in` data.
    pub fn apply<T: Float>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut y = kernels::matmul(x, rows, self.d_in, store.value(self.w).data(), self.d_out);
        kernels::add_row_in_place(&mut y, store.value(self.b).data());
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.register(
            &format!("{name}.gain"),
            Tensor::full(vec![d], T::one()),
            ParamKind::Norm,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(vec![d]),
            ParamKind::Norm,
        )?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    pub fn apply<T: Float>(&self, store: &ParamStore<T>, x: &[T], d: usize) -> Vec<T> {
        kernels::layer_norm_rows(
            x,
            d,
            store.value(self.gain).data(),
            store.value(self.bias).data(),
            T::of(LN_EPS),
        )
        .0
    }
}

/// Multi-head scaled dot-product attention. Queries come from one input,
/// keys and values from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Outputs of an attention call, with the per-head weight matrices.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_query_in: usize,
        d_kv_in: usize,
        d_model: usize,
        heads: usize,
        zero_output: bool,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {d_model} is not divisible by {heads} heads"
            )));
        }
        let normal = Init::Normal(INIT_STD);
        let out_init = if zero_output { Init::Zeros } else { normal };
        Ok(Attention {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                d_query_in,
                d_model,
                normal,
                seed,
            )?,
            k: Linear::new(store, &format!("{name}.k"), d_kv_in, d_model, normal, seed)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv_in, d_model, normal, seed)?,
            o: Linear::new(
                store,
                &format!("{name}.o"),
                d_model,
                d_model,
                out_init,
                seed,
            )?,
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        query_in: Var,
        kv_in: Var,
        blocked: Option<&[bool]>,
        soft: Option<(Var, Var)>,
    ) -> Result<Var> {
        Ok(self
            .forward_traced(tape, query_in, kv_in, blocked, soft)?
            .output)
    }

    /// `blocked` is a row-major `[Lq x (P + Lkv)]` mask over the extended key
    /// axis (soft-prompt columns first); `soft` supplies `(P_K, P_V)`, each
    /// `[P x d_model]`, prepended to the projected keys and values.
    pub fn forward_traced<T: Float>(
        &self,
        tape: &mut Tape<T>,
        query_in: Var,
        kv_in: Var,
        blocked: Option<&[bool]>,
        soft: Option<(Var, Var)>,
    ) -> Result<AttentionTrace> {
        let q = self.q.forward(tape, query_in)?;
        let mut k = self.k.forward(tape, kv_in)?;
        let mut v = self.v.forward(tape, kv_in)?;
        if let Some((pk, pv)) = soft {
            k = tape.concat(&[pk, k], 0)?;
            v = tape.concat(&[pv, v], 0)?;
        }
        let (lq, lk) = (tape.shape(q)[0], tape.shape(k)[0]);
        if let Some(mask) = blocked {
            if mask.len() != lq * lk {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![lq, lk],
                    rhs: vec![mask.len()],
                });
            }
        }
        let dk = self.head_dim();
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.narrow(q, 1, h * dk, dk)?,
                    tape.narrow(k, 1, h * dk, dk)?,
                    tape.narrow(v, 1, h * dk, dk)?,
                )
            };
            let mut scores = tape.matmul_t(qh, kh)?;
            scores = tape.scale(scores, scale)?;
            if let Some(mask) = blocked {
                scores = tape.mask_out(scores, mask)?;
            }
            let attn = tape.softmax_rows(scores)?;
            weights.push(attn);
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        Ok(AttentionTrace {
            output: self.o.forward(tape, merged)?,
            weights,
        })
    }

    /// Tape-free attention of `lq` query rows against cached keys/values of
    /// `lk` rows (already projected, soft prompts included).
    pub fn attend_cached<T: Float>(
        &self,
        store: &ParamStore<T>,
        q: &[T],
        lq: usize,
        keys: &[T],
        values: &[T],
        lk: usize,
        blocked: impl Fn(usize, usize) -> bool,
    ) -> Result<Vec<T>> {
        let d = self.d_model;
        let dk = self.head_dim();
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut merged = vec![T::zero(); lq * d];
        let mut qh = vec![T::zero(); lq * dk];
        let mut kh = vec![T::zero(); lk * dk];
        let mut vh = vec![T::zero(); lk * dk];
        let mut scores = vec![T::zero(); lq * lk];
        let mut out = vec![T::zero(); lq * dk];
        for h in 0..self.heads {
            for r in 0..lq {
                qh[r * dk..(r + 1) * dk].copy_from_slice(&q[r * d + h * dk..r * d + (h + 1) * dk]);
            }
            for r in 0..lk {
                kh[r * dk..(r + 1) * dk]
                    .copy_from_slice(&keys[r * d + h * dk..r * d + (h + 1) * dk]);
                vh[r * dk..(r + 1) * dk]
                    .copy_from_slice(&values[r * d + h * dk..r * d + (h + 1) * dk]);
            }
            kernels::gemm(
                lq,
                dk,
                lk,
                &qh,
                Layout::Normal,
                &kh,
                Layout::Transposed,
                &mut scores,
                false,
            );
            for i in 0..lq {
                for j in 0..lk {
                    let s = &mut scores[i * lk + j];
                    *s *= scale;
                    if blocked(i, j) {
                        *s = T::of(crate::tensor::NEG_MASK);
                    }
                }
            }
            kernels::softmax_rows_in_place(&mut scores, lk)?;
            kernels::gemm(
                lq,
                lk,
                dk,
                &scores,
                Layout::Normal,
                &vh,
                Layout::Normal,
                &mut out,
                false,
            );
            for r in 0..lq {
                merged[r * d + h * dk..r * d + (h + 1) * dk]
                    .copy_from_slice(&out[r * dk..(r + 1) * dk]);
            }
        }
        Ok(self.o.apply(store, &merged, lq))
    }
}

/// Position-wise feed-forward sublayer with a 4x hidden expansion.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let normal = Init::Normal(INIT_STD);
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, normal, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, normal, seed)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }

    pub fn apply<T: Float>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut h = self.fc1.apply(store, x, rows);
        for v in h.iter_mut() {
            *v = kernels::gelu(*v);
        }
        self.fc2.apply(store, &h, rows)
    }
}

/// Pre-norm Transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, heads, false, seed)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, seed)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        blocked: Option<&[bool]>,
        soft: Option<(Var, Var)>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, blocked, soft)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}
