//! Procedurally generated grid scenes with labels for the four expert tasks
//! and a small visual-question set.

mod scene;
pub mod vocab;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use scene::{
    detection_text, generate_scene, labels_for, make_qa, render, segmentation_text, shape_name,
    BBox, DatasetConfig, QaItem, QaKind, RenderedImage, SceneObject, SceneSpec, TaskLabels,
    FORMAT_VERSION, NUM_COLORS, NUM_SHAPES,
};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD, SEP};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("unsupported question kind {0:?}")]
    UnsupportedQa(String),
    #[error("scene has no object with a unique shape")]
    NoUniqueObject,
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One scene with everything derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub index: usize,
    pub scene: SceneSpec,
    pub image: RenderedImage,
    pub labels: TaskLabels,
}

impl Sample {
    pub fn from_scene(split: Split, index: usize, scene: SceneSpec) -> Self {
        let image = render(&scene);
        let labels = labels_for(&scene);
        Self {
            split,
            index,
            scene,
            image,
            labels,
        }
    }

    /// Seed for the `n`-th question drawn about this sample.
    pub fn qa_seed(&self, n: u64) -> u64 {
        splitmix(self.scene.seed ^ splitmix(n.wrapping_add(0x5157)))
    }
}

/// Label text of expert task `task` (0 caption, 1 classification,
/// 2 detection, 3 segmentation) for a sample.
pub fn task_text(task: usize, sample: &Sample) -> Vec<TokenId> {
    match task {
        0 => sample.labels.caption_tokens.clone(),
        1 => sample.labels.classification_text(),
        2 => detection_text(&sample.scene),
        3 => segmentation_text(&sample.scene),
        _ => panic!("task index {task} out of range"),
    }
}

/// Longest `task_text(task, _)` any scene with at most `max_objects`
/// objects can produce.
pub fn task_text_bound(task: usize, max_objects: usize) -> usize {
    match task {
        0 => 6 * max_objects - 1,
        1 => max_objects.min(NUM_SHAPES),
        2 => 5 * max_objects,
        3 => 2 * max_objects,
        _ => panic!("task index {task} out of range"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub master_seed: u64,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` in `split`, a pure function of the master seed.
pub fn scene_seed(master: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Eval => 0x6576_616c_0000_0000,
    };
    splitmix(splitmix(master ^ tag) ^ index as u64)
}

impl Dataset {
    pub fn generate(master_seed: u64, config: &DatasetConfig) -> Result<Self, DataError> {
        config.validate()?;
        let make = |split, n| -> Result<Vec<Sample>, DataError> {
            (0..n)
                .map(|i| {
                    let scene = generate_scene(scene_seed(master_seed, split, i), config)?;
                    Ok(Sample::from_scene(split, i, scene))
                })
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            master_seed,
            train: make(Split::Train, config.train_size)?,
            eval: make(Split::Eval, config.eval_size)?,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    /// Writes a header line followed by one line per scene.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            master_seed: self.master_seed,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in self.train.iter().chain(&self.eval) {
            let rec = Record {
                format_version: FORMAT_VERSION,
                split: s.split,
                index: s.index,
                seed: s.scene.seed,
                objects: s.scene.objects.clone(),
                labels: s.labels.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset file, re-deriving images and checking every stored
    /// label against the scene it claims to describe.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| DataError::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format_version != FORMAT_VERSION {
            return Err(DataError::Format(format!(
                "format_version {} not supported",
                header.format_version
            )));
        }
        header.config.validate()?;
        let mut ds = Dataset {
            config: header.config,
            master_seed: header.master_seed,
            train: Vec::new(),
            eval: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            if rec.format_version != FORMAT_VERSION {
                return Err(DataError::Format(format!(
                    "line {}: format_version {}",
                    n + 2,
                    rec.format_version
                )));
            }
            let scene = SceneSpec {
                grid_size: ds.config.grid_size,
                objects: rec.objects,
                seed: rec.seed,
            };
            let sample = Sample::from_scene(rec.split, rec.index, scene);
            if sample.labels != rec.labels {
                return Err(DataError::Format(format!(
                    "line {}: labels disagree with scene",
                    n + 2
                )));
            }
            let dest = match rec.split {
                Split::Train => &mut ds.train,
                Split::Eval => &mut ds.eval,
            };
            if rec.index != dest.len() {
                return Err(DataError::Format(format!(
                    "line {}: expected index {}, found {}",
                    n + 2,
                    dest.len(),
                    rec.index
                )));
            }
            dest.push(sample);
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    master_seed: u64,
    config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    format_version: u32,
    split: Split,
    index: usize,
    seed: u64,
    objects: Vec<SceneObject>,
    labels: TaskLabels,
}
