use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, MAX_NUMBER, SEP, SHAPES};
use super::DataError;

pub const NUM_SHAPES: usize = 8;
pub const NUM_COLORS: usize = 4;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    pub grid_size: usize,
    pub max_objects: usize,
    /// Largest bbox side, in cells.
    pub max_side: usize,
    pub train_size: usize,
    pub eval_size: usize,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            grid_size: 6,
            max_objects: 3,
            max_side: 2,
            train_size: 4096,
            eval_size: 512,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if self.grid_size < 4 || self.grid_size > MAX_NUMBER {
            return bad(format!("grid_size {} outside 4..={MAX_NUMBER}", self.grid_size));
        }
        if !(1..=6).contains(&self.max_objects) {
            return bad(format!("max_objects {} outside 1..=6", self.max_objects));
        }
        if self.max_side == 0 || self.max_side > self.grid_size / 2 {
            return bad(format!(
                "max_side {} must be in 1..={}",
                self.max_side,
                self.grid_size / 2
            ));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("dataset splits must be non-empty".into());
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.grid_size / 2
    }
}

/// Cell-coordinate box, half-open: covers `x0..x1` × `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Quadrant of the box centre (0 TL, 1 TR, 2 BL, 3 BR).
    pub fn quadrant(&self, grid_size: usize) -> usize {
        let cx2 = self.x0 + self.x1;
        let cy2 = self.y0 + self.y1;
        let right = cx2 >= grid_size;
        let bottom = cy2 >= grid_size;
        (bottom as usize) * 2 + right as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    /// 1..=8
    pub shape: u8,
    /// 1..=4
    pub color: u8,
    pub bbox: BBox,
    pub z_order: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_size: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Procedurally generates a scene. The first four objects go to distinct
/// quadrants (in quadrant order); any further objects land in a random
/// quadrant and may overlap earlier ones. `z_order` is the generation index.
pub fn generate_scene(seed: u64, config: &DatasetConfig) -> Result<SceneSpec, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=config.max_objects);
    let mut quads: Vec<usize> = (0..4).collect();
    quads.shuffle(&mut rng);
    let mut first: Vec<usize> = quads[..count.min(4)].to_vec();
    first.sort_unstable();
    let half = config.half();
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let q = if i < first.len() {
            first[i]
        } else {
            rng.gen_range(0..4)
        };
        let (qx, qy) = ((q % 2) * half, (q / 2) * half);
        let qw = if q % 2 == 0 { half } else { config.grid_size - half };
        let qh = if q / 2 == 0 { half } else { config.grid_size - half };
        let w = rng.gen_range(1..=config.max_side.min(qw));
        let h = rng.gen_range(1..=config.max_side.min(qh));
        let x0 = qx + rng.gen_range(0..=qw - w);
        let y0 = qy + rng.gen_range(0..=qh - h);
        objects.push(SceneObject {
            shape: rng.gen_range(1..=NUM_SHAPES as u8),
            color: rng.gen_range(1..=NUM_COLORS as u8),
            bbox: BBox {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            },
            z_order: i as i32,
        });
    }
    Ok(SceneSpec {
        grid_size: config.grid_size,
        objects,
        seed,
    })
}

impl SceneSpec {
    /// Index of the topmost object covering each cell, row-major.
    pub fn cover(&self) -> Vec<Option<usize>> {
        let g = self.grid_size;
        let mut out = vec![None; g * g];
        for (cell, slot) in out.iter_mut().enumerate() {
            let (x, y) = (cell % g, cell / g);
            *slot = self
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.bbox.contains(x, y))
                .max_by_key(|(i, o)| (o.z_order, *i))
                .map(|(i, _)| i);
        }
        out
    }

    /// Objects in caption order: z-order, then raster position.
    pub fn caption_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&i| {
            let o = &self.objects[i];
            (o.z_order, o.bbox.y0, o.bbox.x0, i)
        });
        idx
    }

    pub fn count_shape(&self, shape: u8) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }
}

/// One RGB-like triple per cell, values in `[0,1]`.
///
/// Channel 0 encodes colour (`c/4`), channel 1 shape (`s/8`), channel 2 is
/// `1.0` on an object's anchor (top-left) cell and `0.5` elsewhere on it.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub grid_size: usize,
    pub cells: Vec<[f64; 3]>,
}

pub fn render(scene: &SceneSpec) -> RenderedImage {
    let g = scene.grid_size;
    let cells = scene
        .cover()
        .iter()
        .enumerate()
        .map(|(cell, top)| match top {
            None => [0.0; 3],
            Some(i) => {
                let o = &scene.objects[*i];
                let anchor = cell % g == o.bbox.x0 && cell / g == o.bbox.y0;
                [
                    o.color as f64 / NUM_COLORS as f64,
                    o.shape as f64 / NUM_SHAPES as f64,
                    if anchor { 1.0 } else { 0.5 },
                ]
            }
        })
        .collect();
    RenderedImage { grid_size: g, cells }
}

impl RenderedImage {
    pub fn blank(grid_size: usize) -> Self {
        Self {
            grid_size,
            cells: vec![[0.0; 3]; grid_size * grid_size],
        }
    }

    /// Decoded `(colour, shape, anchor)` of a covered cell.
    pub fn decode(&self, cell: usize) -> Option<(u8, u8, bool)> {
        let [c, s, a] = self.cells[cell];
        if a <= 0.0 {
            return None;
        }
        Some((
            (c * NUM_COLORS as f64).round() as u8,
            (s * NUM_SHAPES as f64).round() as u8,
            a >= 1.0,
        ))
    }

    pub fn quadrant_of(&self, cell: usize) -> usize {
        let g = self.grid_size;
        let (x, y) = (cell % g, cell / g);
        let half = g / 2;
        ((y >= half) as usize) * 2 + (x >= half) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub caption_tokens: Vec<TokenId>,
    pub class_multihot: [u8; NUM_SHAPES],
    /// Per object, in object order.
    pub boxes: Vec<BBox>,
    /// Per-cell class id of the topmost object, 0 for background.
    pub mask: Vec<u8>,
}

pub fn labels_for(scene: &SceneSpec) -> TaskLabels {
    let v = Vocab::get();
    let mut caption = Vec::new();
    for (n, &i) in scene.caption_order().iter().enumerate() {
        let o = &scene.objects[i];
        if n > 0 {
            caption.push(SEP);
        }
        caption.extend([
            v.word("a"),
            v.color(o.color),
            v.shape(o.shape),
            v.word("at"),
            v.quadrant(o.bbox.quadrant(scene.grid_size)),
        ]);
    }
    let mut class_multihot = [0u8; NUM_SHAPES];
    for o in &scene.objects {
        class_multihot[o.shape as usize - 1] = 1;
    }
    let mask = scene
        .cover()
        .iter()
        .map(|c| c.map_or(0, |i| scene.objects[i].shape))
        .collect();
    TaskLabels {
        caption_tokens: caption,
        class_multihot,
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        mask,
    }
}

impl TaskLabels {
    /// Shape names present, in class order.
    pub fn classification_text(&self) -> Vec<TokenId> {
        let v = Vocab::get();
        (0..NUM_SHAPES)
            .filter(|&c| self.class_multihot[c] == 1)
            .map(|c| v.shape(c as u8 + 1))
            .collect()
    }
}

/// `<shape> x0 y0 x1 y1` per object, caption order.
pub fn detection_text(scene: &SceneSpec) -> Vec<TokenId> {
    let v = Vocab::get();
    let mut out = Vec::new();
    for i in scene.caption_order() {
        let o = &scene.objects[i];
        out.push(v.shape(o.shape));
        for n in [o.bbox.x0, o.bbox.y0, o.bbox.x1, o.bbox.y1] {
            out.push(v.number(n).expect("grid_size bounded by MAX_NUMBER"));
        }
    }
    out
}

/// `<shape> <visible cells>` per object, caption order.
pub fn segmentation_text(scene: &SceneSpec) -> Vec<TokenId> {
    let v = Vocab::get();
    let cover = scene.cover();
    let mut out = Vec::new();
    for i in scene.caption_order() {
        let visible = cover.iter().filter(|c| **c == Some(i)).count();
        out.push(v.shape(scene.objects[i].shape));
        out.push(v.number(visible.min(MAX_NUMBER)).unwrap());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Count,
    Presence,
    Location,
}

impl QaKind {
    pub const ALL: [QaKind; 3] = [QaKind::Count, QaKind::Presence, QaKind::Location];

    pub fn name(self) -> &'static str {
        match self {
            QaKind::Count => "count",
            QaKind::Presence => "presence",
            QaKind::Location => "location",
        }
    }
}

impl std::str::FromStr for QaKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(QaKind::Count),
            "presence" => Ok(QaKind::Presence),
            "location" => Ok(QaKind::Location),
            other => Err(DataError::UnsupportedQa(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub kind: QaKind,
}

/// Builds a question about `scene`; the answer is read off the scene by
/// direct inspection.
pub fn make_qa(scene: &SceneSpec, kind: QaKind, seed: u64) -> Result<QaItem, DataError> {
    let v = Vocab::get();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present: Vec<u8> = (1..=NUM_SHAPES as u8)
        .filter(|&s| scene.count_shape(s) > 0)
        .collect();
    let pick_any = |rng: &mut ChaCha8Rng| rng.gen_range(1..=NUM_SHAPES as u8);
    let (question, answer) = match kind {
        QaKind::Count => {
            let shape = if !present.is_empty() && rng.gen_bool(0.75) {
                *present.choose(&mut rng).unwrap()
            } else {
                pick_any(&mut rng)
            };
            (
                vec![v.word("how"), v.word("many"), v.shape(shape), v.word("?")],
                vec![v.number(scene.count_shape(shape))?],
            )
        }
        QaKind::Presence => {
            let shape = if !present.is_empty() && rng.gen_bool(0.5) {
                *present.choose(&mut rng).unwrap()
            } else {
                pick_any(&mut rng)
            };
            let yes = scene.count_shape(shape) > 0;
            (
                vec![v.word("is"), v.word("there"), v.word("a"), v.shape(shape), v.word("?")],
                vec![v.word(if yes { "yes" } else { "no" })],
            )
        }
        QaKind::Location => {
            let unique: Vec<&SceneObject> = scene
                .objects
                .iter()
                .filter(|o| scene.count_shape(o.shape) == 1)
                .collect();
            let o = unique.choose(&mut rng).ok_or(DataError::NoUniqueObject)?;
            (
                vec![v.word("where"), v.word("is"), v.word("the"), v.shape(o.shape), v.word("?")],
                vec![v.quadrant(o.bbox.quadrant(scene.grid_size))],
            )
        }
    };
    Ok(QaItem {
        question_tokens: question,
        answer_tokens: answer,
        kind,
    })
}

/// Shape name for class id `1..=8`.
pub fn shape_name(shape: u8) -> &'static str {
    SHAPES[shape as usize - 1]
}
