//! Corpus generation, loading, augmentation and batching.

pub mod augment;
pub mod batch;
pub mod pgm;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vocab::Vocabulary;

pub use augment::{augment, preprocess, AugmentConfig, CropParams};
pub use batch::{make_batches, truncate_target, Batch};
pub use synth::{generate_corpus, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Every sample, regardless of split.
    All,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Val => "val.tsv",
            Split::Test => "test.tsv",
            Split::All => synth::MANIFEST,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub index: usize,
    pub image: ImageTensor,
    pub caption: String,
    /// Caption token ids without BOS/EOS.
    pub caption_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let vocab = load_vocab(dir)?;
        let path = dir.join(split.file_name());
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (index, image_path, caption) = parse_manifest_line(line).ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: malformed manifest line",
                    path.display(),
                    n + 1
                ))
            })?;
            examples.push(Example {
                index,
                image: pgm::read(&dir.join(image_path))?,
                caption: caption.to_string(),
                caption_ids: vocab.encode(caption),
            });
        }
        Ok(Dataset { vocab, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn captions(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.caption.clone()).collect()
    }
}

pub fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(synth::VOCAB);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Vocabulary::parse(&text)
}

fn parse_manifest_line(line: &str) -> Option<(usize, &str, &str)> {
    let mut parts = line.splitn(3, '\t');
    let index = parts.next()?.parse().ok()?;
    Some((index, parts.next()?, parts.next()?))
}
