//! Decoder-only language model conditioned on a visual prefix, with optional
//! layer-wise soft prompts prepended to every self-attention's keys and
//! values.

use crate::error::{Error, Result};
use crate::nn::{register_weight, Attention, Block, Init, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Float, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::vocab::BOS;

pub const PREFIX: &str = "lm.";
pub const SOFT_PREFIX: &str = "lm.soft.";
pub const DEFAULT_PROMPT: &str = "Question: What is the radiology report for this image? Answer:";

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub d_lm: usize,
    pub depth: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Soft-prompt rows per layer; 0 disables P-tuning.
    pub soft_prompt_len: usize,
    pub prompt_text: String,
    /// Let prefix and prompt positions attend to each other in both
    /// directions. Off by default (pure causal mask).
    pub prefix_lm: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 128,
            depth: 4,
            heads: 4,
            vocab_size: 0,
            max_positions: 96,
            soft_prompt_len: 4,
            prompt_text: DEFAULT_PROMPT.to_string(),
            prefix_lm: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm.d_lm {} is not divisible by lm.heads {}",
                self.d_lm, self.heads
            )));
        }
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {} is too small",
                self.vocab_size
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("lm.max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters added by P-tuning: one `P_K` and one `P_V` of
/// `soft_prompt_len x d_lm` per layer.
pub fn count_ptuning_params(depth: usize, soft_prompt_len: usize, d_lm: usize) -> usize {
    depth * 2 * soft_prompt_len * d_lm
}

#[derive(Clone, Debug)]
pub struct SoftPromptLayer {
    pub keys: ParamId,
    pub values: ParamId,
}

#[derive(Clone, Debug)]
pub struct SoftPrompts {
    pub len: usize,
    pub layers: Vec<SoftPromptLayer>,
}

/// Blocked-entry mask over `[soft | real]` keys for `seq_len` queries.
/// Real key `j` is visible from query `i` when `j <= i`, or when both lie in
/// the first `bidirectional` positions.
pub fn attention_mask(seq_len: usize, soft_len: usize, bidirectional: usize) -> Vec<bool> {
    let width = soft_len + seq_len;
    let mut blocked = vec![false; seq_len * width];
    for i in 0..seq_len {
        for j in 0..seq_len {
            let visible = j <= i || (i < bidirectional && j < bidirectional);
            blocked[i * width + soft_len + j] = !visible;
        }
    }
    blocked
}

/// Self-attention over `hidden` with soft prompts concatenated in front of
/// the keys and values: `Attn(Q, [P_K; K], [P_V; V])`.
pub fn self_attention_ptuned<T: Float>(
    tape: &mut Tape<T>,
    hidden: Var,
    attn: &Attention,
    soft: Option<(Var, Var)>,
    blocked: &[bool],
) -> Result<Var> {
    attn.forward(tape, hidden, hidden, Some(blocked), soft)
}

/// Incremental decoding cache: projected keys and values per layer (soft
/// prompt rows first) plus the logits for the next token.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    logits: Vec<T>,
}

impl<T: Float> DecoderState<T> {
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Real (non-soft) positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub soft: Option<SoftPrompts>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl LanguageModel {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        cfg: &LmConfig,
        with_soft_prompts: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let normal = Init::Normal(INIT_STD);
        let d = cfg.d_lm;
        let tok_emb = register_weight(
            store,
            "lm.tok_emb",
            vec![cfg.vocab_size, d],
            normal,
            ParamKind::Embedding,
            seed,
        )?;
        let pos_emb = register_weight(
            store,
            "lm.pos_emb",
            vec![cfg.max_positions, d],
            normal,
            ParamKind::Embedding,
            seed,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("lm.blocks.{i}"), d, cfg.heads, seed))
            .collect::<Result<Vec<_>>>()?;
        let soft = if with_soft_prompts && cfg.soft_prompt_len > 0 {
            let shape = vec![cfg.soft_prompt_len, d];
            let layers = (0..cfg.depth)
                .map(|i| {
                    Ok(SoftPromptLayer {
                        keys: register_weight(
                            store,
                            &format!("lm.soft.{i}.keys"),
                            shape.clone(),
                            normal,
                            ParamKind::Embedding,
                            seed,
                        )?,
                        values: register_weight(
                            store,
                            &format!("lm.soft.{i}.values"),
                            shape.clone(),
                            normal,
                            ParamKind::Embedding,
                            seed,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(SoftPrompts {
                len: cfg.soft_prompt_len,
                layers,
            })
        } else {
            None
        };
        let norm = LayerNorm::new(store, "lm.norm", d)?;
        let head = Linear::new(store, "lm.head", d, cfg.vocab_size, normal, seed)?;
        Ok(LanguageModel {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            soft,
            norm,
            head,
        })
    }

    pub fn soft_len(&self) -> usize {
        self.soft.as_ref().map_or(0, |s| s.len)
    }

    fn bidirectional_len(&self, prefix: usize, prompt: usize) -> usize {
        if self.cfg.prefix_lm {
            prefix + prompt
        } else {
            0
        }
    }

    fn check_length(&self, prefix: usize, prompt: usize, target: usize) -> Result<()> {
        if prefix + prompt + target > self.cfg.max_positions {
            return Err(Error::Length {
                prefix,
                prompt,
                target,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    /// Teacher-forced next-token logits `[T x vocab]` for the target positions
    /// of `[prefix | prompt | BOS, y_1 .. y_{T-1}]`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        prefix: Option<Var>,
        prompt_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Var> {
        let k = prefix.map_or(0, |p| tape.shape(p)[0]);
        let (m, t) = (prompt_ids.len(), target_ids.len());
        if t == 0 {
            return Err(Error::EmptyTarget);
        }
        self.check_length(k, m, t)?;
        if let Some(p) = prefix {
            if tape.shape(p) != [k, self.cfg.d_lm] {
                return Err(Error::Shape {
                    op: "visual prefix",
                    lhs: tape.shape(p).to_vec(),
                    rhs: vec![k, self.cfg.d_lm],
                });
            }
        }
        let mut inputs = Vec::with_capacity(m + t);
        inputs.extend_from_slice(prompt_ids);
        inputs.push(BOS);
        inputs.extend_from_slice(&target_ids[..t - 1]);
        let table = tape.param(self.tok_emb);
        let emb = tape.embedding(table, &inputs)?;
        let mut x = match prefix {
            Some(p) => tape.concat(&[p, emb], 0)?,
            None => emb,
        };
        let len = k + m + t;
        let pos_table = tape.param(self.pos_emb);
        let pos = tape.narrow(pos_table, 0, 0, len)?;
        x = tape.add(x, pos)?;
        let soft_len = self.soft_len();
        let blocked = attention_mask(len, soft_len, self.bidirectional_len(k, m));
        for (i, block) in self.blocks.iter().enumerate() {
            let soft = self.soft.as_ref().map(|s| {
                let layer = &s.layers[i];
                (tape.param(layer.keys), tape.param(layer.values))
            });
            let h = block.ln1.forward(tape, x)?;
            let a = self_attention_ptuned(tape, h, &block.attn, soft, &blocked)?;
            x = tape.add(x, a)?;
            let h = block.ln2.forward(tape, x)?;
            let f = block.mlp.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        let x = tape.narrow(x, 0, k + m, t)?;
        let x = self.norm.forward(tape, x)?;
        self.head.forward(tape, x)
    }

    /// Runs `[prefix | prompt | BOS]` and returns a cache whose logits predict
    /// the first target token.
    pub fn prefill<T: Float>(
        &self,
        store: &ParamStore<T>,
        prefix: Option<&Tensor<T>>,
        prompt_ids: &[usize],
    ) -> Result<DecoderState<T>> {
        let d = self.cfg.d_lm;
        let k = prefix.map_or(0, |p| p.shape()[0]);
        let m = prompt_ids.len();
        self.check_length(k, m, 1)?;
        let vocab = self.cfg.vocab_size;
        let table = store.value(self.tok_emb).data();
        let mut x = Vec::with_capacity((k + m + 1) * d);
        if let Some(p) = prefix {
            if p.shape() != [k, d] {
                return Err(Error::Shape {
                    op: "visual prefix",
                    lhs: p.shape().to_vec(),
                    rhs: vec![k, d],
                });
            }
            x.extend_from_slice(p.data());
        }
        for &id in prompt_ids.iter().chain(std::iter::once(&BOS)) {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
            x.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        let mut state = DecoderState {
            keys: Vec::with_capacity(self.blocks.len()),
            values: Vec::with_capacity(self.blocks.len()),
            len: 0,
            logits: Vec::new(),
        };
        for i in 0..self.blocks.len() {
            match &self.soft {
                Some(s) => {
                    state
                        .keys
                        .push(store.value(s.layers[i].keys).data().to_vec());
                    state
                        .values
                        .push(store.value(s.layers[i].values).data().to_vec());
                }
                None => {
                    state.keys.push(Vec::new());
                    state.values.push(Vec::new());
                }
            }
        }
        self.run_rows(store, &mut state, x, self.bidirectional_len(k, m))?;
        Ok(state)
    }

    /// Feeds one generated token and refreshes the cached logits.
    pub fn advance<T: Float>(
        &self,
        store: &ParamStore<T>,
        state: &mut DecoderState<T>,
        token: usize,
    ) -> Result<()> {
        let d = self.cfg.d_lm;
        if token >= self.cfg.vocab_size {
            return Err(Error::Vocabulary {
                id: token,
                size: self.cfg.vocab_size,
            });
        }
        if state.len >= self.cfg.max_positions {
            return Err(Error::Length {
                prefix: 0,
                prompt: 0,
                target: state.len + 1,
                max: self.cfg.max_positions,
            });
        }
        let table = store.value(self.tok_emb).data();
        let x = table[token * d..(token + 1) * d].to_vec();
        self.run_rows(store, state, x, 0)
    }

    fn run_rows<T: Float>(
        &self,
        store: &ParamStore<T>,
        state: &mut DecoderState<T>,
        mut x: Vec<T>,
        bidirectional: usize,
    ) -> Result<()> {
        let d = self.cfg.d_lm;
        let rows = x.len() / d;
        let start = state.len;
        let pos = store.value(self.pos_emb).data();
        for (r, row) in x.chunks_mut(d).enumerate() {
            for (v, &p) in row
                .iter_mut()
                .zip(&pos[(start + r) * d..(start + r + 1) * d])
            {
                *v += p;
            }
        }
        let soft_len = self.soft_len();
        for (li, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.apply(store, &x, d);
            let q = block.attn.q.apply(store, &h, rows);
            state.keys[li].extend(block.attn.k.apply(store, &h, rows));
            state.values[li].extend(block.attn.v.apply(store, &h, rows));
            let lk = soft_len + start + rows;
            let blocked = |i: usize, j: usize| {
                if j < soft_len {
                    return false;
                }
                let (qi, kj) = (start + i, j - soft_len);
                !(kj <= qi || (qi < bidirectional && kj < bidirectional))
            };
            let a = block.attn.attend_cached(
                store,
                &q,
                rows,
                &state.keys[li],
                &state.values[li],
                lk,
                blocked,
            )?;
            for (v, a) in x.iter_mut().zip(&a) {
                *v += *a;
            }
            let h = block.ln2.apply(store, &x, d);
            let f = block.mlp.apply(store, &h, rows);
            for (v, f) in x.iter_mut().zip(&f) {
                *v += *f;
            }
        }
        state.len += rows;
        let last = &x[(rows - 1) * d..];
        let normed = self.norm.apply(store, last, d);
        state.logits = self.head.apply(store, &normed, 1);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ptuning_parameter_arithmetic() {
        assert_eq!(count_ptuning_params(28, 4, 4096), 917_504);
        assert_eq!(count_ptuning_params(12, 0, 768), 0);
        assert_eq!(count_ptuning_params(2, 4, 64), 1_024);
    }

    #[test]
    fn causal_mask_layout() {
        let m = attention_mask(3, 2, 0);
        let rows: Vec<&[bool]> = m.chunks(5).collect();
        assert_eq!(rows[0], &[false, false, false, true, true]);
        assert_eq!(rows[1], &[false, false, false, false, true]);
        assert_eq!(rows[2], &[false; 5]);
        let bi = attention_mask(3, 0, 2);
        assert_eq!(
            bi,
            vec![false, false, true, false, false, true, false, false, false]
        );
    }

    #[test]
    fn soft_prompt_count_matches_formula() {
        let cfg = LmConfig {
            d_lm: 16,
            depth: 3,
            heads: 2,
            vocab_size: 10,
            max_positions: 20,
            soft_prompt_len: 4,
            ..LmConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        LanguageModel::new(&mut store, &cfg, true, 0).unwrap();
        assert_eq!(
            store.count_prefix(SOFT_PREFIX),
            count_ptuning_params(3, 4, 16)
        );
        let mut plain = ParamStore::<f32>::new();
        let lm = LanguageModel::new(&mut plain, &cfg, false, 0).unwrap();
        assert!(lm.soft.is_none());
        assert_eq!(store.count_total() - plain.count_total(), 3 * 2 * 4 * 16);
    }

    #[test]
    fn overflow_names_segments() {
        let cfg = LmConfig {
            d_lm: 8,
            depth: 1,
            heads: 2,
            vocab_size: 10,
            max_positions: 6,
            ..LmConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let lm = LanguageModel::new(&mut store, &cfg, false, 0).unwrap();
        let mut tape = Tape::inference(&store);
        let prefix = tape.constant(Tensor::zeros(vec![2, 8]));
        match lm.forward(&mut tape, Some(prefix), &[5, 6], &[7, 8, 9]) {
            Err(Error::Length {
                prefix: 2,
                prompt: 2,
                target: 3,
                max: 6,
            }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        let mut tape = Tape::inference(&store);
        assert!(matches!(
            lm.forward(&mut tape, None, &[5], &[]),
            Err(Error::EmptyTarget)
        ));
    }
}
