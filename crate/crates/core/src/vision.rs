//! ViT-style patch encoder producing the patch-feature matrix of an image.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{register_weight, Block, Init, LayerNorm, Linear, INIT_STD};
use crate::tensor::{Float, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "vision.";

#[derive(Clone, Debug, PartialEq)]
pub struct VisionConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub depth: usize,
    pub heads: usize,
    pub use_cls_token: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 56,
            channels: 1,
            patch_size: 14,
            d_v: 64,
            depth: 2,
            heads: 4,
            use_cls_token: true,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("vision.patch_size must be at least 1".into()));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision.d_v {} is not divisible by vision.heads {}",
                self.d_v, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Row count N of the encoder output at the configured resolution.
    pub fn seq_len(&self) -> usize {
        sequence_length(
            self.image_size,
            self.image_size,
            self.patch_size,
            self.use_cls_token,
        )
        .expect("validated configuration")
    }
}

/// `N = (H / ps) * (W / ps) + [cls]`.
pub fn sequence_length(height: usize, width: usize, patch_size: usize, cls: bool) -> Result<usize> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::Preprocess(format!(
            "{height}x{width} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    Ok((height / patch_size) * (width / patch_size) + usize::from(cls))
}

/// Pixels are standardized with these before patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Splits an image into non-overlapping patches in raster order, each
/// flattened as `(row, col, channel)` and standardized.
pub fn patchify<T: Float>(img: &ImageTensor, patch_size: usize) -> Result<Tensor<T>> {
    sequence_length(img.height, img.width, patch_size, false)?;
    let (ph, pw) = (img.height / patch_size, img.width / patch_size);
    let dim = patch_size * patch_size * img.channels;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for c in 0..img.channels {
                        let v = img.get(py * patch_size + y, px * patch_size + x, c);
                        data.push(T::of((f64::from(v) - PIXEL_MEAN) / PIXEL_STD));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, dim], data)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    pub patch_proj: Linear,
    pub cls: Option<ParamId>,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &VisionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let normal = Init::Normal(INIT_STD);
        let patch_proj = Linear::new(
            store,
            "vision.patch_proj",
            cfg.patch_dim(),
            cfg.d_v,
            normal,
            seed,
        )?;
        let cls = if cfg.use_cls_token {
            Some(register_weight(
                store,
                "vision.cls",
                vec![1, cfg.d_v],
                normal,
                ParamKind::Embedding,
                seed,
            )?)
        } else {
            None
        };
        let pos = register_weight(
            store,
            "vision.pos",
            vec![cfg.seq_len(), cfg.d_v],
            normal,
            ParamKind::Embedding,
            seed,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("vision.blocks.{i}"),
                    cfg.d_v,
                    cfg.heads,
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "vision.norm", cfg.d_v)?;
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_proj,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    /// Patch projection, optional CLS row, and positional embeddings; the
    /// input to the first block.
    pub fn embed<T: Float>(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let mut x = self.patch_proj.forward(tape, patches)?;
        if let Some(cls) = self.cls {
            let c = tape.param(cls);
            x = tape.concat(&[c, x], 0)?;
        }
        let rows = tape.shape(x)[0];
        let pos = tape.param(self.pos);
        if tape.shape(pos)[0] != rows {
            return Err(Error::Preprocess(format!(
                "encoder is configured for {} positions, image yields {rows}",
                tape.shape(pos)[0]
            )));
        }
        tape.add(x, pos)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let mut x = self.embed(tape, patches)?;
        for block in &self.blocks {
            x = block.forward(tape, x, None, None)?;
        }
        self.norm.forward(tape, x)
    }

    /// Encodes an image already preprocessed to the configured resolution.
    /// Returns the `[N x d_v]` feature matrix.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, img: &ImageTensor) -> Result<Var> {
        if img.height != self.cfg.image_size || img.width != self.cfg.image_size {
            return Err(Error::Preprocess(format!(
                "encoder expects {0}x{0} images, got {1}x{2}",
                self.cfg.image_size, img.height, img.width
            )));
        }
        let patches = tape.constant(patchify(img, self.cfg.patch_size)?);
        self.forward(tape, patches)
    }
}

pub fn set_trainable<T: Float>(store: &mut ParamStore<T>, flag: bool) {
    store.set_trainable_prefix(PREFIX, flag);
}
