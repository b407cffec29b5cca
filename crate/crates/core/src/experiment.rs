//! End-to-end runs: training into an output directory, generation,
//! evaluation, and the five-row ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{preprocess, Dataset, Split};
use crate::decode::generate_ids;
use crate::error::{Error, Result};
use crate::lm;
use crate::metrics::{corpus_rouge1, CorpusScore};
use crate::model::{AblationSpec, CaptionModel, LmMode, ParamReport};
use crate::rng::sub_seed;
use crate::train::{self, prompt_ids, Checkpoint, StepRecord, TrainConfig};
use crate::vocab::Vocabulary;

pub const CHECKPOINT: &str = "checkpoint.qbck";
pub const METRICS: &str = "metrics.tsv";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.tsv";
pub const PARAMS: &str = "params.tsv";
pub const PREDICTIONS: &str = "predictions.txt";
pub const TABLE: &str = "ablation.tsv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fails when the config was produced against a different vocabulary.
pub fn check_vocab(cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    if !cfg.vocab_hash.is_empty() && cfg.vocab_hash != vocab.hash() {
        return Err(Error::Provenance(format!(
            "config was built for vocabulary {} but the data has {}",
            cfg.vocab_hash,
            vocab.hash()
        )));
    }
    Ok(())
}

struct MetricsLog {
    path: PathBuf,
    file: fs::File,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsLog {
            path,
            file,
            error: None,
        })
    }

    fn record(&mut self, rec: &StepRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{}", rec.log_line()) {
                self.error = Some(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(Error::io(self.path, e)),
            None => Ok(()),
        }
    }
}

fn pretrain_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.pretrain.epochs,
        peak_lr: cfg.pretrain.peak_lr,
        warmup_steps: cfg.pretrain.warmup_steps,
        augment: false,
        max_steps: 0,
        ..cfg.train.clone()
    }
}

/// Text-only language model trained on the training captions. Its `lm.*`
/// parameters seed every row that does not train the language model from
/// scratch.
pub fn train_foundation(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<CaptionModel<f32>> {
    create_dir(out)?;
    let seed = sub_seed(cfg.seed, "foundation");
    let mut model = CaptionModel::<f32>::new(
        &cfg.model_config(data.vocab.len()),
        false,
        sub_seed(seed, "init"),
    )?;
    let mut log = MetricsLog::create(out.join(PRETRAIN_METRICS))?;
    let report = train::pretrain_lm(&mut model, data, &pretrain_config(cfg), seed, |r| {
        log.record(r)
    });
    log.finish()?;
    report?;
    Checkpoint::from_model(&model.store, &cfg.to_kv_string(), None).save(&out.join(CHECKPOINT))?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub params: ParamReport,
    pub log: Vec<StepRecord>,
}

/// Trains one model as configured and writes the config, checkpoint,
/// metrics log and parameter report under `out`.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    foundation: Option<&CaptionModel<f32>>,
    out: &Path,
) -> Result<(CaptionModel<f32>, TrainSummary)> {
    check_vocab(cfg, &data.vocab)?;
    let mut cfg = cfg.clone();
    cfg.vocab_hash = data.vocab.hash();
    create_dir(out)?;
    cfg.write_to_dir(out)?;
    let mut model = CaptionModel::<f32>::for_ablation(
        &cfg.model_config(data.vocab.len()),
        &cfg.ablation,
        sub_seed(cfg.seed, "init"),
    )?;
    if let Some(f) = foundation {
        model.copy_params_from(&f.store, lm::PREFIX)?;
    }
    let mut log = MetricsLog::create(out.join(METRICS))?;
    let spec = cfg.ablation.clone();
    let report = train::train(&mut model, data, &spec, &cfg.train, cfg.seed, |r| {
        log.record(r)
    });
    log.finish()?;
    let report = report?;
    let params = model.param_report();
    write_file(&out.join(PARAMS), &params.to_tsv())?;
    Checkpoint::from_model(&model.store, &cfg.to_kv_string(), Some(&report.optimizer))
        .save(&out.join(CHECKPOINT))?;
    Ok((
        model,
        TrainSummary {
            params,
            log: report.log,
        },
    ))
}

/// The `train` command: optional text-only stage, then captioning.
pub fn train_command(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary> {
    let data = Dataset::load(data_dir, Split::Train)?;
    check_vocab(cfg, &data.vocab)?;
    let foundation = if cfg.pretrain.epochs > 0 && cfg.ablation.lm_mode != LmMode::Full {
        Some(train_foundation(cfg, &data, &out.join("foundation"))?)
    } else {
        None
    };
    train_run(cfg, &data, foundation.as_ref(), out).map(|(_, s)| s)
}

/// Rebuilds a trained model from its checkpoint; `vocab` must be the one it
/// was trained with.
pub fn load_model(checkpoint: &Path, vocab: &Vocabulary) -> Result<(RunConfig, CaptionModel<f32>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = RunConfig::parse(&ck.config)?;
    if cfg.vocab_hash != vocab.hash() {
        return Err(Error::Provenance(format!(
            "checkpoint was trained with vocabulary {:?} but the data has {}",
            cfg.vocab_hash,
            vocab.hash()
        )));
    }
    let mut model = CaptionModel::for_ablation(&cfg.model_config(vocab.len()), &cfg.ablation, 0)?;
    ck.restore(&mut model.store)?;
    Ok((cfg, model))
}

/// One generated report per example, in dataset order.
pub fn generate_reports(
    model: &CaptionModel<f32>,
    cfg: &RunConfig,
    data: &Dataset,
) -> Result<Vec<String>> {
    let prompt = prompt_ids(&data.vocab, &model.cfg.lm.prompt_text);
    let size = model.image_size();
    data.examples
        .iter()
        .map(|ex| {
            let img = preprocess(&ex.image, size);
            let ids = generate_ids(model, &img, &prompt, &cfg.decode)?;
            Ok(data.vocab.decode(&ids))
        })
        .collect()
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn evaluate_files(pred: &Path, reference: &Path) -> Result<CorpusScore> {
    let p = read_lines(pred)?;
    let r = read_lines(reference)?;
    if p.len() != r.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            pred.display(),
            p.len(),
            reference.display(),
            r.len()
        )));
    }
    let pairs: Vec<(String, String)> = p.into_iter().zip(r).collect();
    corpus_rouge1(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub id: &'static str,
    pub spec: AblationSpec,
    /// The language model starts from random weights instead of the
    /// text-only foundation.
    pub from_scratch: bool,
}

pub fn grid(cfg: &RunConfig) -> Vec<AblationRow> {
    let base = cfg.model.vision.image_size;
    let row = |id, vision_trainable, lm_mode, image_size, from_scratch| AblationRow {
        id,
        spec: AblationSpec {
            vision_trainable,
            lm_mode,
            image_size,
        },
        from_scratch,
    };
    vec![
        row("tf-scratch", false, LmMode::Full, base, true),
        row("frozen-lm", false, LmMode::Frozen, base, false),
        row("ptuning", false, LmMode::Ptuning, base, false),
        row("vision+ptuning", true, LmMode::Ptuning, base, false),
        row(
            "vision+ptuning-large",
            true,
            LmMode::Ptuning,
            cfg.ablate.large_image_size,
            false,
        ),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: AblationRow,
    pub params: ParamReport,
    pub rouge1: Vec<f64>,
}

impl RowResult {
    pub fn mean_rouge1(&self) -> f64 {
        self.rouge1.iter().sum::<f64>() / self.rouge1.len() as f64
    }
}

pub fn format_table(rows: &[RowResult]) -> String {
    let seeds = rows.first().map_or(0, |r| r.rouge1.len());
    let mut out = String::from(
        "row\timage_size\tvision_trainable\tlm_mode\ttotal_params\ttrainable_params\tbertscore\trouge1",
    );
    for s in 0..seeds {
        let _ = write!(out, "\trouge1_seed{s}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\tn/a\t{:.6}",
            r.row.id,
            r.row.spec.image_size,
            r.row.spec.vision_trainable,
            r.row.spec.lm_mode,
            r.params.total,
            r.params.trainable,
            r.mean_rouge1()
        );
        for v in &r.rouge1 {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Configuration actually used by one grid cell.
pub fn row_config(cfg: &RunConfig, row: &AblationRow, replicate: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = cfg.seed + replicate as u64;
    c.model.vision.image_size = row.spec.image_size;
    c.ablation = row.spec.clone();
    if row.from_scratch {
        c.pretrain.epochs = 0;
    }
    c
}

/// Trains and scores every grid row for `cfg.ablate.num_seeds` replicates on
/// the validation split, writing per-cell outputs and the summary table.
pub fn run_ablation(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<RowResult>> {
    let train_data = Dataset::load(data_dir, Split::Train)?;
    let val_data = Dataset::load(data_dir, Split::Val)?;
    check_vocab(cfg, &train_data.vocab)?;
    if val_data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut cfg = cfg.clone();
    cfg.vocab_hash = train_data.vocab.hash();
    create_dir(out)?;
    cfg.write_to_dir(out)?;
    let foundation = if cfg.pretrain.epochs > 0 {
        log::info!("training text-only foundation model");
        Some(train_foundation(
            &cfg,
            &train_data,
            &out.join("foundation"),
        )?)
    } else {
        None
    };
    let references = val_data.captions();
    let mut results = Vec::new();
    for row in grid(&cfg) {
        let mut scores = Vec::with_capacity(cfg.ablate.num_seeds);
        let mut params = None;
        for s in 0..cfg.ablate.num_seeds {
            let rc = row_config(&cfg, &row, s);
            let dir = out.join(row.id).join(format!("seed{s}"));
            log::info!("row {} replicate {s}", row.id);
            let base = if row.from_scratch {
                None
            } else {
                foundation.as_ref()
            };
            let (model, summary) = train_run(&rc, &train_data, base, &dir)?;
            let preds = generate_reports(&model, &rc, &val_data)?;
            write_lines(&dir.join(PREDICTIONS), &preds)?;
            let pairs: Vec<(&String, &String)> = preds.iter().zip(&references).collect();
            let score = corpus_rouge1(&pairs)?;
            write_file(&dir.join("eval.tsv"), &score.to_tsv())?;
            scores.push(score.f1);
            params = Some(summary.params);
        }
        results.push(RowResult {
            row,
            params: params.expect("at least one replicate"),
            rouge1: scores,
        });
    }
    write_file(&out.join(TABLE), &format_table(&results))?;
    Ok(results)
}
