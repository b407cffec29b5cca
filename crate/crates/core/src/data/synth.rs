//! Procedural image/caption corpus: white glyphs on a 3x3 grid over a
//! modality-specific background.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{pgm, Split};
use crate::config::{parse_pairs, parse_value};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lm::DEFAULT_PROMPT;
use crate::rng::{rng_for, sub_seed};
use crate::vocab::Vocabulary;

pub const PATCH_MULTIPLE: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Circle,
    Cross,
    Bar,
    Dot,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Circle, Glyph::Cross, Glyph::Bar, Glyph::Dot];

    pub fn word(self) -> &'static str {
        match self {
            Glyph::Circle => "circle",
            Glyph::Cross => "cross",
            Glyph::Bar => "bar",
            Glyph::Dot => "dot",
        }
    }

    /// Whether offset `(dy, dx)` from the glyph center, in units of the glyph
    /// radius, is inked.
    fn covers(self, dy: f64, dx: f64) -> bool {
        match self {
            Glyph::Circle => ((dy * dy + dx * dx).sqrt() - 0.75).abs() <= 0.22,
            Glyph::Dot => dy * dy + dx * dx <= 0.4 * 0.4,
            Glyph::Cross => {
                (dy.abs() <= 0.2 && dx.abs() <= 1.0) || (dx.abs() <= 0.2 && dy.abs() <= 1.0)
            }
            Glyph::Bar => dx.abs() <= 1.0 && dy.abs() <= 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ct,
    XRay,
    Mri,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::XRay, Modality::Mri];

    pub fn word(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::XRay => "x-ray",
            Modality::Mri => "mri",
        }
    }

    /// Background intensity at normalized coordinates in `[0, 1]`.
    fn background(self, v: f64, u: f64) -> f64 {
        match self {
            Modality::Ct => {
                let (dy, dx) = (v - 0.5, u - 0.5);
                if (dy * dy + dx * dx).sqrt() <= 0.47 {
                    0.25
                } else {
                    0.0
                }
            }
            Modality::XRay => 0.35,
            Modality::Mri => 0.05 + 0.4 * v,
        }
    }
}

/// Grid cell `(row, col)`, both in `0..3`.
pub type Cell = (usize, usize);

/// Location phrase for a cell. With `lateral` the left/right side is named,
/// which is only meaningful when images are never mirrored.
pub fn position_phrase(cell: Cell, lateral: bool) -> &'static str {
    match (cell, lateral) {
        ((1, 1), _) => "in the center",
        ((0, 1), _) => "at the top",
        ((2, 1), _) => "at the bottom",
        ((1, _), false) => "at the side",
        ((0, _), false) => "in the upper corner",
        (_, false) => "in the lower corner",
        ((1, 0), true) => "on the left side",
        ((1, _), true) => "on the right side",
        ((0, 0), true) => "in the upper left corner",
        ((0, _), true) => "in the upper right corner",
        ((2, 0), true) => "in the lower left corner",
        (_, true) => "in the lower right corner",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub glyph: Glyph,
    pub cell: Cell,
}

/// Everything that determines one rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub modality: Modality,
    /// Ordered by cell, row-major.
    pub findings: Vec<Finding>,
    /// The first finding carries an arrow marker.
    pub marker: bool,
}

impl Scene {
    pub fn caption(&self, lateral: bool) -> String {
        let mut out = format!("{} image showing", self.modality.word());
        for (i, f) in self.findings.iter().enumerate() {
            if i > 0 {
                out.push_str(" and");
            }
            let _ = write!(
                out,
                " a {} {}",
                f.glyph.word(),
                position_phrase(f.cell, lateral)
            );
        }
        if self.marker {
            out.push_str(" marked with white arrow");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Native side length; must be a multiple of the patch size.
    pub image_size: usize,
    pub seed: u64,
    /// Training mirrors images, so captions avoid left/right words.
    pub horizontal_flip: bool,
    pub pair_rate: f64,
    pub marker_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 1000,
            image_size: 112,
            seed: 0,
            horizontal_flip: true,
            pair_rate: 0.5,
            marker_rate: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % PATCH_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of {PATCH_MULTIPLE}",
                self.image_size
            )));
        }
        for (name, rate) in [
            ("pair_rate", self.pair_rate),
            ("marker_rate", self.marker_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (key, value) in parse_pairs(text)? {
            match key.as_str() {
                "count" => spec.count = parse_value(&key, &value)?,
                "image_size" => spec.image_size = parse_value(&key, &value)?,
                "seed" => spec.seed = parse_value(&key, &value)?,
                "horizontal_flip" => spec.horizontal_flip = parse_value(&key, &value)?,
                "pair_rate" => spec.pair_rate = parse_value(&key, &value)?,
                "marker_rate" => spec.marker_rate = parse_value(&key, &value)?,
                _ => return Err(Error::Config(format!("unknown data spec key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "count={}\nimage_size={}\nseed={}\nhorizontal_flip={}\npair_rate={}\nmarker_rate={}\n",
            self.count,
            self.image_size,
            self.seed,
            self.horizontal_flip,
            self.pair_rate,
            self.marker_rate
        )
    }

    fn data_seed(&self) -> u64 {
        sub_seed(self.seed, "data")
    }

    pub fn scene(&self, index: usize) -> Scene {
        let mut rng = self.sample_rng(index, "scene");
        let modality = Modality::ALL[rng.random_range(0..Modality::ALL.len())];
        let n = if rng.random::<f64>() < self.pair_rate {
            2
        } else {
            1
        };
        let mut cells: Vec<usize> = Vec::with_capacity(n);
        while cells.len() < n {
            let c = rng.random_range(0..9);
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        cells.sort_unstable();
        let findings = cells
            .into_iter()
            .map(|c| Finding {
                glyph: Glyph::ALL[rng.random_range(0..Glyph::ALL.len())],
                cell: (c / 3, c % 3),
            })
            .collect();
        let marker = rng.random::<f64>() < self.marker_rate;
        Scene {
            modality,
            findings,
            marker,
        }
    }

    pub fn caption(&self, index: usize) -> String {
        self.scene(index).caption(!self.horizontal_flip)
    }

    pub fn render(&self, index: usize) -> ImageTensor {
        render_scene(
            &self.scene(index),
            self.image_size,
            &mut self.sample_rng(index, "pixels"),
        )
    }

    pub fn split(&self, index: usize) -> Split {
        match sub_seed(self.data_seed(), &format!("split.{index}")) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }

    fn sample_rng(&self, index: usize, part: &str) -> ChaCha8Rng {
        rng_for(self.data_seed(), &format!("{part}.{index}"))
    }
}

fn render_scene(scene: &Scene, size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = size as f64;
    let cell = s / 3.0;
    let radius = 0.32 * cell;
    let mut canvas: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            scene
                .modality
                .background((y as f64 + 0.5) / s, (x as f64 + 0.5) / s)
        })
        .collect();
    for (k, f) in scene.findings.iter().enumerate() {
        let jitter = 0.08 * cell;
        let cy = (f.cell.0 as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
        let cx = (f.cell.1 as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
        let ink = rng.random_range(0.85..=1.0);
        stamp(
            &mut canvas,
            size,
            |py, px| f.glyph.covers((py - cy) / radius, (px - cx) / radius),
            ink,
        );
        if scene.marker && k == 0 {
            // Diagonal shaft pointing at the glyph from the lower right.
            stamp(
                &mut canvas,
                size,
                |py, px| {
                    let (dy, dx) = ((py - cy) / radius, (px - cx) / radius);
                    let along = (dy + dx) / std::f64::consts::SQRT_2;
                    let across = (dy - dx) / std::f64::consts::SQRT_2;
                    (0.95..=1.55).contains(&along) && across.abs() <= 0.18
                },
                1.0,
            );
        }
    }
    let pixels = canvas
        .into_iter()
        .map(|v| (v + rng.random_range(0.0..=0.1)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor::new(size, size, 1, pixels).expect("square single-channel canvas")
}

fn stamp(canvas: &mut [f64], size: usize, covers: impl Fn(f64, f64) -> bool, ink: f64) {
    for y in 0..size {
        for x in 0..size {
            if covers(y as f64 + 0.5, x as f64 + 0.5) {
                canvas[y * size + x] = ink;
            }
        }
    }
}

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.txt";
pub const SPEC: &str = "synth.txt";

pub fn image_path(index: usize) -> String {
    format!("images/{index:05}.pgm")
}

/// Renders the corpus under `out`: images, the full manifest, one manifest
/// per split, the vocabulary and the spec that produced them.
pub fn generate_corpus(spec: &SynthSpec, out: &Path) -> Result<Vocabulary> {
    spec.validate()?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    let mut splits = [String::new(), String::new(), String::new()];
    let mut captions = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let caption = spec.caption(index);
        let path = image_path(index);
        pgm::write(&out.join(&path), &spec.render(index))?;
        let line = format!("{index}\t{path}\t{caption}\n");
        manifest.push_str(&line);
        let slot = match spec.split(index) {
            Split::Train => 0,
            Split::Val => 1,
            _ => 2,
        };
        splits[slot].push_str(&line);
        captions.push(caption);
    }
    let vocab = Vocabulary::from_texts(
        captions
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(DEFAULT_PROMPT)),
    );
    let files = [
        (MANIFEST, manifest.as_str()),
        (Split::Train.file_name(), splits[0].as_str()),
        (Split::Val.file_name(), splits[1].as_str()),
        (Split::Test.file_name(), splits[2].as_str()),
        (VOCAB, &vocab.to_file_string()),
        (SPEC, &spec.to_kv_string()),
    ];
    for (name, text) in files {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(vocab)
}
