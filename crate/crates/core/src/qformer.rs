//! Query Transformer: K learnable query tokens that read the image features
//! through periodically inserted cross-attention, then an affine map into the
//! language model's embedding space.

use crate::error::{Error, Result};
use crate::nn::{register_weight, Attention, Init, LayerNorm, Linear, Mlp, INIT_STD};
use crate::tensor::{Float, ParamId, ParamKind, ParamStore, Tape, Var};

pub const PREFIX: &str = "qformer.";

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerConfig {
    /// Number of learnable query tokens (K).
    pub num_queries: usize,
    pub d_q: usize,
    pub depth: usize,
    pub heads: usize,
    /// Cross-attention is present in 1-based blocks divisible by this period.
    pub cross_attn_period: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            num_queries: 8,
            d_q: 64,
            depth: 2,
            heads: 4,
            cross_attn_period: 2,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("qformer.num_queries must be positive".into()));
        }
        if self.cross_attn_period == 0 {
            return Err(Error::Config(
                "qformer.cross_attn_period must be at least 1".into(),
            ));
        }
        if self.heads == 0 || self.d_q % self.heads != 0 {
            return Err(Error::Config(format!(
                "qformer.d_q {} is not divisible by qformer.heads {}",
                self.d_q, self.heads
            )));
        }
        Ok(())
    }

    /// Whether 1-based block `index` carries a cross-attention sublayer.
    pub fn has_cross_attention(&self, index: usize) -> bool {
        index % self.cross_attn_period == 0
    }

    pub fn count_cross_attn_layers(&self) -> usize {
        count_cross_attn_layers(self.depth, self.cross_attn_period)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.count_cross_attn_layers() == 0 {
            out.push(format!(
                "query transformer with depth {} and cross-attention period {} has no cross-attention; its output ignores the image",
                self.depth, self.cross_attn_period
            ));
        }
        out
    }
}

/// `floor(depth / period)`.
pub fn count_cross_attn_layers(depth: usize, period: usize) -> usize {
    if period == 0 {
        0
    } else {
        depth / period
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
}

#[derive(Clone, Debug)]
pub struct QBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<CrossAttention>,
    pub ln_ffn: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub cfg: QFormerConfig,
    pub queries: ParamId,
    pub blocks: Vec<QBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl QFormer {
    /// `d_image` is the width of the image features, `d_lm` the width of the
    /// language model the output is projected into.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        cfg: &QFormerConfig,
        d_image: usize,
        d_lm: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        for w in cfg.warnings() {
            log::warn!("{w}");
        }
        let normal = Init::Normal(INIT_STD);
        let queries = register_weight(
            store,
            "qformer.queries",
            vec![cfg.num_queries, cfg.d_q],
            normal,
            ParamKind::Embedding,
            seed,
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("qformer.blocks.{i}");
            let cross = if cfg.has_cross_attention(i + 1) {
                Some(CrossAttention {
                    norm: LayerNorm::new(store, &format!("{name}.ln_cross"), cfg.d_q)?,
                    attn: Attention::new(
                        store,
                        &format!("{name}.cross_attn"),
                        cfg.d_q,
                        d_image,
                        cfg.d_q,
                        cfg.heads,
                        true,
                        seed,
                    )?,
                })
            } else {
                None
            };
            blocks.push(QBlock {
                ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), cfg.d_q)?,
                self_attn: Attention::new(
                    store,
                    &format!("{name}.self_attn"),
                    cfg.d_q,
                    cfg.d_q,
                    cfg.d_q,
                    cfg.heads,
                    false,
                    seed,
                )?,
                cross,
                ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d_q)?,
                mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.d_q, seed)?,
            });
        }
        let norm = LayerNorm::new(store, "qformer.norm", cfg.d_q)?;
        let proj = Linear::new(store, "qformer.proj", cfg.d_q, d_lm, normal, seed)?;
        Ok(QFormer {
            cfg: cfg.clone(),
            queries,
            blocks,
            norm,
            proj,
        })
    }

    pub fn cross_attention_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.cross.is_some()).count()
    }

    /// Compresses `[N x d_v]` image features into `[K x d_lm]` visual prefix
    /// rows.
    pub fn bridge<T: Float>(&self, tape: &mut Tape<T>, image_feats: Var) -> Result<Var> {
        let n = tape.shape(image_feats)[0];
        if n <= self.cfg.num_queries {
            return Err(Error::Config(format!(
                "image feature rows ({n}) must exceed the query count ({})",
                self.cfg.num_queries
            )));
        }
        let mut x = tape.param(self.queries);
        for block in &self.blocks {
            let h = block.ln_self.forward(tape, x)?;
            let a = block.self_attn.forward(tape, h, h, None, None)?;
            x = tape.add(x, a)?;
            if let Some(cross) = &block.cross {
                let h = cross.norm.forward(tape, x)?;
                let c = cross.attn.forward(tape, h, image_feats, None, None)?;
                x = tape.add(x, c)?;
            }
            let h = block.ln_ffn.forward(tape, x)?;
            let m = block.mlp.forward(tape, h)?;
            x = tape.add(x, m)?;
        }
        let x = self.norm.forward(tape, x)?;
        self.proj.forward(tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    #[test]
    fn cross_attention_counting_rule() {
        assert_eq!(count_cross_attn_layers(12, 2), 6);
        assert_eq!(count_cross_attn_layers(1, 2), 0);
        assert_eq!(count_cross_attn_layers(2, 1), 2);
        assert_eq!(count_cross_attn_layers(2, 2), 1);
    }

    #[test]
    fn degenerate_depth_warns() {
        let cfg = QFormerConfig {
            depth: 1,
            ..QFormerConfig::default()
        };
        assert_eq!(cfg.warnings().len(), 1);
        assert!(QFormerConfig::default().warnings().is_empty());
    }

    #[test]
    fn cross_attention_sits_in_even_blocks() {
        let cfg = QFormerConfig {
            depth: 4,
            d_q: 8,
            heads: 2,
            ..QFormerConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let q = QFormer::new(&mut store, &cfg, 8, 16, 0).unwrap();
        let placement: Vec<bool> = q.blocks.iter().map(|b| b.cross.is_some()).collect();
        assert_eq!(placement, vec![false, true, false, true]);
        assert_eq!(q.cross_attention_layers(), cfg.count_cross_attn_layers());
    }

    #[test]
    fn output_shape_is_independent_of_feature_rows() {
        let cfg = QFormerConfig {
            d_q: 8,
            heads: 2,
            num_queries: 4,
            ..QFormerConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let q = QFormer::new(&mut store, &cfg, 6, 12, 0).unwrap();
        for n in [5, 17, 40] {
            let mut tape = Tape::inference(&store);
            let feats = tape.constant(normal_tensor(vec![n, 6], 1.0, n as u64, "f"));
            let out = q.bridge(&mut tape, feats).unwrap();
            assert_eq!(tape.shape(out), &[4, 12]);
        }
        let mut tape = Tape::inference(&store);
        let feats = tape.constant(normal_tensor(vec![4, 6], 1.0, 0, "f"));
        assert!(matches!(q.bridge(&mut tape, feats), Err(Error::Config(_))));
    }

    #[test]
    fn zero_cross_output_makes_bridge_image_independent_at_init() {
        let cfg = QFormerConfig {
            d_q: 8,
            heads: 2,
            num_queries: 3,
            ..QFormerConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let q = QFormer::new(&mut store, &cfg, 6, 5, 9).unwrap();
        let run = |seed| {
            let mut tape = Tape::inference(&store);
            let feats = tape.constant(normal_tensor(vec![10, 6], 1.0, seed, "f"));
            let out = q.bridge(&mut tape, feats).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(1), run(2));
    }
}
