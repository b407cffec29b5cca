//! Deterministic report generation: greedy and beam search with a
//! sign-aware repetition penalty and a minimum-length constraint.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm::DecoderState;
use crate::model::CaptionModel;
use crate::tensor::kernels::log_softmax;
use crate::tensor::NEG_MASK;
use crate::vocab::{BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub repetition_penalty: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            repetition_penalty: 2.0,
            min_len: 8,
            max_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config(
                "decode.repetition_penalty must be at least 1".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 1 <= decode.min_len ({}) <= decode.max_len ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Divides positive logits of previously generated tokens by `p` and
/// multiplies negative ones by `p`.
pub fn apply_repetition_penalty(logits: &[f64], history: &[usize], p: f64) -> Vec<f64> {
    let mut out = logits.to_vec();
    let seen: BTreeSet<usize> = history.iter().copied().filter(|&t| t < out.len()).collect();
    for t in seen {
        let x = out[t];
        out[t] = if x > 0.0 { x / p } else { x * p };
    }
    out
}

/// Masks EOS while fewer than `min_len` tokens have been generated.
pub fn apply_min_length(
    logits: &[f64],
    current_len: usize,
    min_len: usize,
    eos: usize,
) -> Vec<f64> {
    let mut out = logits.to_vec();
    if current_len < min_len && eos < out.len() {
        out[eos] = NEG_MASK;
    }
    out
}

fn is_masked(x: f64) -> bool {
    x <= NEG_MASK / 2.0
}

/// An autoregressive model seen one step at a time.
pub trait LogitSource {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;
    /// Raw next-token logits.
    fn logits(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<()>;
    fn eos(&self) -> usize;
    /// Ids that are never generated.
    fn banned(&self) -> &[usize] {
        &[]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, without the terminating EOS.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, including the EOS step when present.
    pub score: f64,
    /// Ended by EOS rather than by reaching `max_len`.
    pub finished: bool,
}

/// Constrained next-token log-probabilities after `history`. Masked entries
/// stay at or below half the masking constant.
pub fn step_log_probs<S: LogitSource>(
    source: &S,
    state: &S::State,
    history: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<f64>> {
    let raw = source.logits(state);
    let mut logits = apply_repetition_penalty(&raw, history, cfg.repetition_penalty);
    logits = apply_min_length(&logits, history.len(), cfg.min_len, source.eos());
    for &b in source.banned() {
        if b < logits.len() {
            logits[b] = NEG_MASK;
        }
    }
    if logits.iter().all(|&x| is_masked(x) || x.is_nan()) {
        return Err(Error::Decoding(format!(
            "every token is masked after {} generated tokens",
            history.len()
        )));
    }
    let lp = log_softmax(&logits);
    Ok(logits
        .iter()
        .zip(lp)
        .map(|(&x, l)| if is_masked(x) { NEG_MASK } else { l })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: LogitSource>(source: &S, cfg: &DecodeConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    let mut state = source.start()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < cfg.max_len {
        let lp = step_log_probs(source, &state, &tokens, cfg)?;
        let t = argmax(&lp);
        score += lp[t];
        if t == source.eos() {
            return Ok(BeamHypothesis {
                tokens,
                score,
                finished: true,
            });
        }
        tokens.push(t);
        source.advance(&mut state, t)?;
    }
    Ok(BeamHypothesis {
        tokens,
        score,
        finished: false,
    })
}

struct Live<St> {
    hyp: BeamHypothesis,
    state: St,
}

fn by_score_desc(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Beam search without length normalization. Returns at most `beam_size`
/// hypotheses, best first.
pub fn beam_search<S: LogitSource>(source: &S, cfg: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let beam = cfg.beam_size;
    let fan_out = 2 * beam;
    let eos = source.eos();
    let mut live = vec![Live {
        hyp: BeamHypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        },
        state: source.start()?,
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    loop {
        // (score, hypothesis index, token)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (h, l) in live.iter().enumerate() {
            let lp = step_log_probs(source, &l.state, &l.hyp.tokens, cfg)?;
            let mut order: Vec<usize> = (0..lp.len()).filter(|&t| !is_masked(lp[t])).collect();
            order.sort_by(|&a, &b| {
                lp[b]
                    .partial_cmp(&lp[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            candidates.extend(
                order
                    .into_iter()
                    .take(fan_out)
                    .map(|t| (l.hyp.score + lp[t], h, t)),
            );
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, h, t)) in candidates.iter().enumerate() {
            if next.len() == beam {
                break;
            }
            let parent = &live[h];
            if t == eos {
                if rank < beam {
                    done.push(BeamHypothesis {
                        tokens: parent.hyp.tokens.clone(),
                        score,
                        finished: true,
                    });
                }
                continue;
            }
            let mut tokens = parent.hyp.tokens.clone();
            tokens.push(t);
            let mut state = parent.state.clone();
            source.advance(&mut state, t)?;
            next.push(Live {
                hyp: BeamHypothesis {
                    tokens,
                    score,
                    finished: false,
                },
                state,
            });
        }
        live = next;
        done.sort_by(by_score_desc);
        done.truncate(beam);
        if live
            .first()
            .is_some_and(|l| l.hyp.tokens.len() >= cfg.max_len)
        {
            done.extend(live.drain(..).map(|l| l.hyp));
            done.sort_by(by_score_desc);
            done.truncate(beam);
            break;
        }
        let best_live = live
            .iter()
            .map(|l| l.hyp.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (done.len() >= beam && done[beam - 1].score >= best_live) {
            break;
        }
    }
    Ok(done)
}

/// Decodes captions from a trained model with a cached incremental forward.
pub struct CaptionSource<'a> {
    model: &'a CaptionModel<f32>,
    start: DecoderState<f32>,
}

impl<'a> CaptionSource<'a> {
    pub fn new(
        model: &'a CaptionModel<f32>,
        image: &ImageTensor,
        prompt_ids: &[usize],
    ) -> Result<Self> {
        let start = model.start_decoding(image, prompt_ids)?;
        Ok(CaptionSource { model, start })
    }
}

impl LogitSource for CaptionSource<'_> {
    type State = DecoderState<f32>;

    fn start(&self) -> Result<Self::State> {
        Ok(self.start.clone())
    }

    fn logits(&self, state: &Self::State) -> Vec<f64> {
        state.logits().iter().map(|&x| f64::from(x)).collect()
    }

    fn advance(&self, state: &mut Self::State, token: usize) -> Result<()> {
        self.model.lm.advance(&self.model.store, state, token)
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn banned(&self) -> &[usize] {
        &[PAD, BOS, UNK]
    }
}

/// Best beam hypothesis for one image; the image must already have the
/// model's input resolution.
pub fn generate_ids(
    model: &CaptionModel<f32>,
    image: &ImageTensor,
    prompt_ids: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    let source = CaptionSource::new(model, image, prompt_ids)?;
    let best = beam_search(&source, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Decoding("beam search returned no hypothesis".into()))?;
    Ok(best.tokens)
}
