#![allow(dead_code)]

use qbridge::decode::{step_log_probs, BeamHypothesis, DecodeConfig, LogitSource};
use qbridge::image::ImageTensor;
use qbridge::lm::LmConfig;
use qbridge::model::{AblationSpec, CaptionModel, LmMode, ModelConfig};
use qbridge::qformer::QFormerConfig;
use qbridge::rng::{normal_tensor, rng_for};
use qbridge::tensor::{GradMode, Tape, Tensor, Var, NEG_MASK};
use qbridge::train::nll_loss;
use qbridge::vision::VisionConfig;
use qbridge::Result;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output element influences the checked gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(normal_tensor(shape, 1.0, seed, "projection"));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Largest relative error between tape gradients and central differences
/// for every element of every input.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let store = qbridge::tensor::ParamStore::<f64>::new();
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::with_mode(&store, GradMode::Inference);
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let s = project(&mut tape, out, 99).unwrap();
        tape.value(s).data()[0]
    };
    let mut tape = Tape::with_mode(&store, GradMode::All);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = project(&mut tape, out, 99).unwrap();
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_size: 28,
            channels: 1,
            patch_size: 14,
            d_v: 16,
            depth: 1,
            heads: 2,
            use_cls_token: true,
        },
        qformer: QFormerConfig {
            num_queries: 2,
            d_q: 16,
            depth: 2,
            heads: 2,
            cross_attn_period: 2,
        },
        lm: LmConfig {
            d_lm: 16,
            depth: 2,
            heads: 2,
            vocab_size,
            max_positions: 32,
            soft_prompt_len: 2,
            ..LmConfig::default()
        },
    }
}

pub fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = rng_for(seed, "image");
    ImageTensor::new(
        size,
        size,
        1,
        (0..size * size).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

/// Tiny P-tuned model whose bridge actually reads the image: the
/// zero-initialized cross-attention output projections are randomized.
pub fn tiny_ptuned_model(seed: u64) -> CaptionModel<f64> {
    let spec = AblationSpec {
        vision_trainable: true,
        lm_mode: LmMode::Ptuning,
        image_size: 28,
    };
    let mut model = CaptionModel::<f64>::for_ablation(&tiny_model_config(12), &spec, seed).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        if name.contains("cross_attn.o.") {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = normal_tensor(shape, 0.3, seed, &name);
        }
    }
    model
}

pub const PROMPT: [usize; 3] = [4, 5, 6];
pub const TARGET: [usize; 4] = [7, 8, 9, 2];

/// Token-mean caption loss of the tiny model on a fixed sample.
pub fn tiny_loss(model: &CaptionModel<f64>, tape: &mut Tape<f64>, image: &ImageTensor) -> Var {
    let logits = model.logits(tape, image, &PROMPT, &TARGET).unwrap();
    nll_loss(tape, logits, &TARGET, &[true; 4]).unwrap().mean
}

/// Relative errors for `count` random scalar entries of parameters whose
/// names start with `prefix`.
pub fn end_to_end_errors(
    model: &mut CaptionModel<f64>,
    prefix: &str,
    count: usize,
    seed: u64,
) -> Vec<f64> {
    let image = random_image(28, seed);
    let grads = {
        let mut tape = Tape::with_mode(&model.store, GradMode::All);
        let loss = tiny_loss(model, &mut tape, &image);
        tape.backward(loss).unwrap().into_params()
    };
    let ids: Vec<_> = model.store.ids_with_prefix(prefix).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let mut rng = rng_for(seed, prefix);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..model.store.value(id).numel());
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
        let original = model.store.value(id).data()[j];
        let mut at = |delta: f64| {
            model.store.value_mut(id).data_mut()[j] = original + delta;
            let mut tape = Tape::inference(&model.store);
            let l = tiny_loss(model, &mut tape, &image);
            tape.value(l).data()[0]
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        model.store.value_mut(id).data_mut()[j] = original;
        out.push(rel_err(analytic, numeric));
    }
    out
}

/// Logits are a seeded random function of the whole history.
pub struct ToyModel {
    pub vocab: usize,
    pub eos: usize,
    pub seed: u64,
    pub spread: f64,
}

impl LogitSource for ToyModel {
    type State = Vec<usize>;

    fn start(&self) -> qbridge::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn logits(&self, state: &Vec<usize>) -> Vec<f64> {
        let key = format!("{state:?}");
        let mut rng = rng_for(self.seed, &key);
        (0..self.vocab)
            .map(|_| self.spread * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn advance(&self, state: &mut Vec<usize>, token: usize) -> qbridge::Result<()> {
        state.push(token);
        Ok(())
    }

    fn eos(&self) -> usize {
        self.eos
    }
}

/// Every complete hypothesis of at most `max_len` tokens with its constrained
/// score, best first.
pub fn enumerate(model: &ToyModel, cfg: &DecodeConfig) -> Vec<BeamHypothesis> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((tokens, score)) = stack.pop() {
        if tokens.len() == cfg.max_len {
            out.push(BeamHypothesis {
                tokens,
                score,
                finished: false,
            });
            continue;
        }
        let lp = step_log_probs(model, &tokens, &tokens, cfg).unwrap();
        for (t, &l) in lp.iter().enumerate() {
            if l <= NEG_MASK / 2.0 {
                continue;
            }
            if t == model.eos {
                out.push(BeamHypothesis {
                    tokens: tokens.clone(),
                    score: score + l,
                    finished: true,
                });
            } else {
                let mut next = tokens.clone();
                next.push(t);
                stack.push((next, score + l));
            }
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out
}
