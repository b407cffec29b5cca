use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qbridge::data::{generate_corpus, load_vocab, pgm, preprocess, SynthSpec};
use qbridge::decode::{generate_ids, DecodeConfig};
use qbridge::experiment;
use qbridge::lm::count_ptuning_params as count_params;
use qbridge::metrics;
use qbridge::train::{lr_at, prompt_ids};
use qbridge::vision::sequence_length;
use qbridge::vocab::Vocabulary;
use qbridge::{CaptionModel, Error, RunConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Unigram (precision, recall, f1) of one candidate against one reference.
#[pyfunction]
fn rouge1(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let s = metrics::rouge1(candidate, reference);
    (s.precision, s.recall, s.f1)
}

/// Mean (precision, recall, f1) over aligned lists.
#[pyfunction]
fn corpus_rouge1(predictions: Vec<String>, references: Vec<String>) -> PyResult<(f64, f64, f64)> {
    if predictions.len() != references.len() {
        return Err(PyValueError::new_err(
            "predictions and references differ in length",
        ));
    }
    let pairs: Vec<_> = predictions.iter().zip(&references).collect();
    let s = metrics::corpus_rouge1(&pairs).map_err(to_py)?;
    Ok((s.precision, s.recall, s.f1))
}

#[pyfunction]
fn count_ptuning_params(depth: usize, soft_prompt_len: usize, d_lm: usize) -> usize {
    count_params(depth, soft_prompt_len, d_lm)
}

/// Encoder sequence length for a square image, including the CLS slot.
#[pyfunction]
#[pyo3(signature = (image_size, patch_size, cls = true))]
fn vision_tokens(image_size: usize, patch_size: usize, cls: bool) -> PyResult<usize> {
    sequence_length(image_size, image_size, patch_size, cls).map_err(to_py)
}

#[pyfunction]
fn learning_rate(step: usize, peak_lr: f64, warmup: usize, total: usize) -> f64 {
    lr_at(step, peak_lr, warmup, total)
}

/// Renders a synthetic corpus into `out` and returns the vocabulary size.
#[pyfunction]
#[pyo3(signature = (out, count, seed, image_size = 112))]
fn gen_data(out: PathBuf, count: usize, seed: u64, image_size: usize) -> PyResult<usize> {
    let spec = SynthSpec {
        count,
        seed,
        image_size,
        ..SynthSpec::default()
    };
    spec.validate().map_err(to_py)?;
    Ok(generate_corpus(&spec, &out).map_err(to_py)?.len())
}

/// A trained checkpoint paired with the corpus vocabulary it was built on.
#[pyclass(unsendable)]
struct Captioner {
    model: CaptionModel<f32>,
    cfg: RunConfig,
    vocab: Vocabulary,
}

#[pymethods]
impl Captioner {
    #[new]
    fn new(checkpoint: PathBuf, data_dir: PathBuf) -> PyResult<Self> {
        let vocab = load_vocab(&data_dir).map_err(to_py)?;
        let (cfg, model) = experiment::load_model(&checkpoint, &vocab).map_err(to_py)?;
        Ok(Captioner { model, cfg, vocab })
    }

    /// Report for one PGM image; unset decoding options come from the checkpoint config.
    #[pyo3(signature = (image_path, beam = None, repetition_penalty = None, min_len = None, max_len = None))]
    fn caption(
        &self,
        image_path: PathBuf,
        beam: Option<usize>,
        repetition_penalty: Option<f64>,
        min_len: Option<usize>,
        max_len: Option<usize>,
    ) -> PyResult<String> {
        let d = &self.cfg.decode;
        let cfg = DecodeConfig {
            beam_size: beam.unwrap_or(d.beam_size),
            repetition_penalty: repetition_penalty.unwrap_or(d.repetition_penalty),
            min_len: min_len.unwrap_or(d.min_len),
            max_len: max_len.unwrap_or(d.max_len),
        };
        cfg.validate().map_err(to_py)?;
        let img = pgm::read(&image_path).map_err(to_py)?;
        let img = preprocess(&img, self.model.image_size());
        let prompt = prompt_ids(&self.vocab, &self.model.cfg.lm.prompt_text);
        let ids = generate_ids(&self.model, &img, &prompt, &cfg).map_err(to_py)?;
        Ok(self.vocab.decode(&ids))
    }

    #[getter]
    fn config(&self) -> String {
        self.cfg.to_kv_string()
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.model.param_report().trainable
    }
}

#[pymodule]
fn pyqbridge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rouge1, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_rouge1, m)?)?;
    m.add_function(wrap_pyfunction!(count_ptuning_params, m)?)?;
    m.add_function(wrap_pyfunction!(vision_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_class::<Captioner>()?;
    Ok(())
}
