//! The assembled captioning model and the trainability settings that define
//! each ablation row.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm::{DecoderState, LanguageModel, LmConfig};
use crate::qformer::{QFormer, QFormerConfig};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};
use crate::vision::{patchify, VisionConfig, VisionEncoder};
use crate::{lm, qformer, vision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LmMode {
    /// Base language model frozen, no soft prompts.
    Frozen,
    /// Base language model frozen, soft prompts trained.
    Ptuning,
    /// Every language-model weight trained.
    Full,
}

impl fmt::Display for LmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmMode::Frozen => "frozen",
            LmMode::Ptuning => "ptuning",
            LmMode::Full => "full",
        })
    }
}

impl FromStr for LmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(LmMode::Frozen),
            "ptuning" => Ok(LmMode::Ptuning),
            "full" => Ok(LmMode::Full),
            other => Err(Error::Config(format!("unknown lm mode {other:?}"))),
        }
    }
}

/// Which components are trainable. The bridge is trainable in every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub vision_trainable: bool,
    pub lm_mode: LmMode,
    pub image_size: usize,
}

impl AblationSpec {
    pub fn qformer_trainable(&self) -> bool {
        true
    }
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            vision_trainable: true,
            lm_mode: LmMode::Ptuning,
            image_size: VisionConfig::default().image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub qformer: QFormerConfig,
    pub lm: LmConfig,
}

/// Parameter counts per component, plus totals (the `#Parameters` columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub vision: usize,
    pub qformer: usize,
    pub soft_prompts: usize,
    pub lm_base: usize,
    pub total: usize,
    pub trainable: usize,
}

impl ParamReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "component\tparams\nvision\t{}\nqformer\t{}\nsoft_prompts\t{}\nlm_base\t{}\ntotal\t{}\ntrainable\t{}\n",
            self.vision, self.qformer, self.soft_prompts, self.lm_base, self.total, self.trainable
        )
    }
}

#[derive(Clone, Debug)]
pub struct CaptionModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub qformer: QFormer,
    pub lm: LanguageModel,
}

impl<T: Float> CaptionModel<T> {
    /// Builds a freshly initialized model. Soft prompts exist only when
    /// `with_soft_prompts` is set (the P-tuning rows).
    pub fn new(cfg: &ModelConfig, with_soft_prompts: bool, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &cfg.vision, seed)?;
        let qformer = QFormer::new(&mut store, &cfg.qformer, cfg.vision.d_v, cfg.lm.d_lm, seed)?;
        if cfg.qformer.num_queries >= cfg.vision.seq_len() {
            return Err(Error::Config(format!(
                "query count {} must be below the image token count {}",
                cfg.qformer.num_queries,
                cfg.vision.seq_len()
            )));
        }
        let lm = LanguageModel::new(&mut store, &cfg.lm, with_soft_prompts, seed)?;
        Ok(CaptionModel {
            cfg: cfg.clone(),
            store,
            vision,
            qformer,
            lm,
        })
    }

    /// Model for one ablation row: the image size comes from the spec and soft
    /// prompts exist iff the row uses P-tuning.
    pub fn for_ablation(cfg: &ModelConfig, spec: &AblationSpec, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.vision.image_size = spec.image_size;
        let mut model = Self::new(&cfg, spec.lm_mode == LmMode::Ptuning, seed)?;
        model.apply_ablation(spec);
        Ok(model)
    }

    pub fn apply_ablation(&mut self, spec: &AblationSpec) {
        vision::set_trainable(&mut self.store, spec.vision_trainable);
        self.store
            .set_trainable_prefix(qformer::PREFIX, spec.qformer_trainable());
        self.store
            .set_trainable_prefix(lm::PREFIX, spec.lm_mode == LmMode::Full);
        self.store
            .set_trainable_prefix(lm::SOFT_PREFIX, spec.lm_mode == LmMode::Ptuning);
    }

    pub fn num_queries(&self) -> usize {
        self.cfg.qformer.num_queries
    }

    pub fn image_size(&self) -> usize {
        self.cfg.vision.image_size
    }

    /// `[K x d_lm]` visual prefix from a patch matrix already on the tape.
    pub fn visual_prefix_from_patches(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let feats = self.vision.forward(tape, patches)?;
        self.qformer.bridge(tape, feats)
    }

    pub fn visual_prefix(&self, tape: &mut Tape<T>, image: &ImageTensor) -> Result<Var> {
        let feats = self.vision.encode(tape, image)?;
        self.qformer.bridge(tape, feats)
    }

    /// Teacher-forced logits `[T x vocab]` for one sample.
    pub fn logits(
        &self,
        tape: &mut Tape<T>,
        image: &ImageTensor,
        prompt_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Var> {
        let prefix = self.visual_prefix(tape, image)?;
        self.lm.forward(tape, Some(prefix), prompt_ids, target_ids)
    }

    pub fn patches(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        patchify(image, self.cfg.vision.patch_size)
    }

    /// Inference-only visual prefix.
    pub fn prefix_tensor(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.store);
        let prefix = self.visual_prefix(&mut tape, image)?;
        Ok(tape.value(prefix).clone())
    }

    /// Decoder cache positioned to predict the first report token.
    pub fn start_decoding(
        &self,
        image: &ImageTensor,
        prompt_ids: &[usize],
    ) -> Result<DecoderState<T>> {
        let prefix = self.prefix_tensor(image)?;
        self.lm.prefill(&self.store, Some(&prefix), prompt_ids)
    }

    pub fn param_report(&self) -> ParamReport {
        let s = &self.store;
        let soft = s.count_prefix(lm::SOFT_PREFIX);
        ParamReport {
            vision: s.count_prefix(vision::PREFIX),
            qformer: s.count_prefix(qformer::PREFIX),
            soft_prompts: soft,
            lm_base: s.count_prefix(lm::PREFIX) - soft,
            total: s.count_total(),
            trainable: s.count_trainable(),
        }
    }

    /// Copies every parameter under `prefix` from `other`, matched by name.
    /// Parameters absent from `other` keep their values.
    pub fn copy_params_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = self.store.ids_with_prefix(prefix).collect();
        let mut copied = 0;
        for id in ids {
            let name = self.store.get(id).name.clone();
            if let Some(src) = other.find(&name) {
                let value = other.value(src);
                if value.shape() != self.store.value(id).shape() {
                    return Err(Error::Shape {
                        op: "copy_params_from",
                        lhs: self.store.value(id).shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *self.store.value_mut(id) = value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
