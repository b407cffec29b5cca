//! Optimization of the caption negative log-likelihood.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, make_batches, preprocess, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm;
use crate::model::{AblationSpec, CaptionModel};
use crate::rng::{rng_for, sub_seed};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::Vocabulary;

pub use checkpoint::Checkpoint;
pub use loss::{nll_loss, Loss};
pub use optim::{clip_global_norm, AdamW};
pub use schedule::lr_at;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Target length cap including the appended EOS.
    pub max_report_len: usize,
    pub grad_clip: f64,
    /// Multiplier on the learning rate of vision-encoder parameters.
    pub vision_lr_scale: f64,
    /// Stops after this many updates when nonzero.
    pub max_steps: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            peak_lr: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 50,
            max_report_len: 24,
            grad_clip: 1.0,
            vision_lr_scale: 1.0,
            max_steps: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("warmup_steps", self.warmup_steps),
            ("max_report_len", self.max_report_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(
                "train.peak_lr and train.grad_clip must be positive, train.weight_decay non-negative".into(),
            ));
        }
        if !(self.vision_lr_scale > 0.0) {
            return Err(Error::Config(
                "train.vision_lr_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size);
        let all = per_epoch * self.epochs;
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_mean: f64,
    pub loss_sum: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss_mean, self.loss_sum
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepRecord>,
    pub optimizer: AdamW<f32>,
}

/// What precedes the prompt during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// The visual prefix computed from each sample's image.
    Image,
    /// All-zero prefix rows: text-only language modelling with the same
    /// positions the captioner will later use.
    ZeroPrefix,
    /// Embeddings of a random, order-preserving subset of the caption's own
    /// tokens (zero rows after them), so the language model learns to read
    /// content from its prefix.
    TokenHints,
}

pub fn prompt_ids(vocab: &Vocabulary, prompt_text: &str) -> Vec<usize> {
    vocab.encode(prompt_text)
}

/// Trains the components selected by `spec` on `data`.
pub fn train(
    model: &mut CaptionModel<f32>,
    data: &Dataset,
    spec: &AblationSpec,
    cfg: &TrainConfig,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    model.apply_ablation(spec);
    fit(model, data, cfg, seed, Conditioning::Image, on_step)
}

/// Text-only training of the base language model; every other parameter is
/// frozen for the duration and left frozen afterwards.
pub fn pretrain_lm(
    model: &mut CaptionModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = &model.store.get(id).name;
        let base_lm = name.starts_with(lm::PREFIX) && !name.starts_with(lm::SOFT_PREFIX);
        model.store.set_trainable(id, base_lm);
    }
    fit(model, data, cfg, seed, Conditioning::TokenHints, on_step)
}

fn prepare_image(
    img: &ImageTensor,
    size: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    if cfg.augment {
        augment(img, size, &AugmentConfig::default(), rng)
    } else {
        preprocess(img, size)
    }
}

/// Prefix of `k` rows holding the embeddings of between 0 and `k` caption
/// tokens, chosen uniformly and kept in caption order.
fn token_hints(
    model: &CaptionModel<f32>,
    tape: &mut Tape<'_, f32>,
    caption: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let k = model.num_queries();
    let count = rng.random_range(0..=k.min(caption.len()));
    let mut picked = index::sample(rng, caption.len(), count).into_vec();
    picked.sort_unstable();
    let ids: Vec<usize> = picked.iter().map(|&p| caption[p]).collect();
    let zeros = tape.constant(Tensor::zeros(vec![k - count, model.cfg.lm.d_lm]));
    if ids.is_empty() {
        return Ok(zeros);
    }
    let table = tape.param(model.lm.tok_emb);
    let hints = tape.embedding(table, &ids)?;
    if count == k {
        return Ok(hints);
    }
    tape.concat(&[hints, zeros], 0)
}

/// The training loop shared by captioning and text-only runs. Per-sample
/// tapes are accumulated in batch order, so results are deterministic.
pub fn fit(
    model: &mut CaptionModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    conditioning: Conditioning,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total = cfg.total_steps(data.len());
    if cfg.warmup_steps >= total {
        return Err(Error::Config(format!(
            "train.warmup_steps {} must be below the total step count {total}",
            cfg.warmup_steps
        )));
    }
    let prompt = prompt_ids(&data.vocab, &model.cfg.lm.prompt_text);
    let captions: Vec<Vec<usize>> = data
        .examples
        .iter()
        .map(|e| e.caption_ids.clone())
        .collect();
    let shuffle_seed = sub_seed(seed, "shuffle");
    let mut aug_rng = rng_for(seed, "augment");
    let mut hint_rng = rng_for(seed, "hints");
    let size = model.image_size();
    let zero_prefix = Tensor::<f32>::zeros(vec![model.num_queries(), model.cfg.lm.d_lm]);
    let mut optimizer = AdamW::new(model.store.len());
    optimizer.prefix_scales = vec![("vision.".into(), cfg.vision_lr_scale)];
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in make_batches(
            &captions,
            cfg.batch_size,
            shuffle_seed,
            epoch,
            cfg.max_report_len,
        ) {
            if step == total {
                break 'epochs;
            }
            let tokens: usize = batch.mask.iter().flatten().filter(|&&m| m).count();
            let scale = 1.0 / tokens as f32;
            let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
            let mut loss_sum = 0.0f64;
            for (row, &i) in batch.indices.iter().enumerate() {
                let target = batch.unpadded(row);
                let mut tape = Tape::new(&model.store);
                let prefix = match conditioning {
                    Conditioning::Image => {
                        let img = prepare_image(&data.examples[i].image, size, cfg, &mut aug_rng);
                        model.visual_prefix(&mut tape, &img)?
                    }
                    Conditioning::ZeroPrefix => tape.constant(zero_prefix.clone()),
                    Conditioning::TokenHints => token_hints(
                        model,
                        &mut tape,
                        &data.examples[i].caption_ids,
                        &mut hint_rng,
                    )?,
                };
                let numeric = |e: Error| match e {
                    Error::NonFinite(_) => Error::NumericFailure { step },
                    e => e,
                };
                let logits = model
                    .lm
                    .forward(&mut tape, Some(prefix), &prompt, &target)
                    .map_err(numeric)?;
                let loss = nll_loss(&mut tape, logits, &target, &vec![true; target.len()])
                    .map_err(numeric)?;
                let value = f64::from(tape.value(loss.sum).data()[0]);
                if !value.is_finite() {
                    return Err(Error::NumericFailure { step });
                }
                loss_sum += value;
                let sample_grads = tape.backward_scaled(loss.sum, scale)?.into_params();
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        (None, g @ Some(_)) => *acc = g,
                        _ => {}
                    }
                }
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = lr_at(step + 1, cfg.peak_lr, cfg.warmup_steps, total);
            optimizer.update(&mut model.store, &grads, lr, cfg.weight_decay)?;
            let record = StepRecord {
                step,
                lr,
                loss_mean: loss_sum / tokens as f64,
                loss_sum,
            };
            on_step(&record);
            log.push(record);
            step += 1;
        }
    }
    Ok(TrainReport { log, optimizer })
}
