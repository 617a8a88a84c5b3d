//! Frozen handcrafted visual experts and the trainable projectors that map
//! their features to the shared model width.
//!
//! Each expert summarises a [`RenderedImage`] at its own granularity and
//! then passes the summary through a fixed, seeded random affine map so that
//! the features are informative without being literal copies of the labels.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{RenderedImage, NUM_COLORS, NUM_SHAPES};
use crate::data::vocab::INSTRUCTIONS;
use crate::params::{normal_matrix, Binding, ParamError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertKind {
    Caption,
    Classification,
    Detection,
    Segmentation,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Caption,
        ExpertKind::Classification,
        ExpertKind::Detection,
        ExpertKind::Segmentation,
    ];

    /// Coarse-to-fine position, 1-based.
    pub fn ordinal(self) -> usize {
        self.index() + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        ["cap", "cls", "det", "seg"][self.index()]
    }

    /// Instruction word naming this expert's task.
    pub fn instruction(self) -> &'static str {
        INSTRUCTIONS[self.index()]
    }

    /// Accepts the short stage name, the instruction word or the type name.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|k| {
            s == k.short() || s == k.instruction() || s == format!("{k:?}").to_ascii_lowercase()
        })
    }

    pub fn tokens(self, grid_size: usize) -> usize {
        match self {
            ExpertKind::Caption => 1,
            ExpertKind::Classification => NUM_SHAPES,
            ExpertKind::Detection => 4,
            ExpertKind::Segmentation => grid_size * grid_size,
        }
    }

    /// Width of the handcrafted summary before the fixed map.
    pub fn raw_dim(self) -> usize {
        match self {
            ExpertKind::Caption => 4 * (NUM_COLORS + NUM_SHAPES + 1),
            ExpertKind::Classification => 2 + NUM_COLORS,
            ExpertKind::Detection => NUM_SHAPES + 1 + 4,
            ExpertKind::Segmentation => (NUM_SHAPES + 1) + (NUM_COLORS + 1) + 3,
        }
    }

    /// Feature width `d_k` emitted by the expert.
    pub fn feat_dim(self) -> usize {
        match self {
            ExpertKind::Classification => 16,
            _ => 32,
        }
    }

    fn map_seed(self) -> u64 {
        0xE4_0000 + self.index() as u64
    }
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

struct FixedMap {
    w: Tensor,
    b: Vec<f64>,
}

fn fixed_maps() -> &'static [FixedMap; 4] {
    static MAPS: OnceLock<[FixedMap; 4]> = OnceLock::new();
    MAPS.get_or_init(|| {
        ExpertKind::ALL.map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(k.map_seed());
            let w = normal_matrix(k.raw_dim(), k.feat_dim(), 0.7, &mut rng);
            let b = normal_matrix(1, k.feat_dim(), 0.1, &mut rng).into_data();
            FixedMap { w, b }
        })
    })
}

fn quadrant_cells(g: usize, q: usize) -> impl Iterator<Item = usize> {
    let half = g / 2;
    let (x0, x1) = if q % 2 == 0 { (0, half) } else { (half, g) };
    let (y0, y1) = if q / 2 == 0 { (0, half) } else { (half, g) };
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * g + x))
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// The handcrafted summary `[tokens × raw_dim]` before the fixed map.
pub fn raw_features(kind: ExpertKind, image: &RenderedImage) -> Tensor {
    let g = image.grid_size;
    let cells = g * g;
    let decoded: Vec<Option<(u8, u8, bool)>> = (0..cells).map(|c| image.decode(c)).collect();
    let mut out = Vec::with_capacity(kind.tokens(g) * kind.raw_dim());
    match kind {
        ExpertKind::Caption => {
            for q in 0..4 {
                let mut colors = [0.0; NUM_COLORS];
                let mut shapes = [0.0; NUM_SHAPES];
                let (mut covered, mut total) = (0.0, 0.0);
                for c in quadrant_cells(g, q) {
                    total += 1.0;
                    if let Some((col, sh, _)) = decoded[c] {
                        colors[col as usize - 1] += 1.0;
                        shapes[sh as usize - 1] += 1.0;
                        covered += 1.0;
                    }
                }
                normalize(&mut colors);
                normalize(&mut shapes);
                out.extend(colors);
                out.extend(shapes);
                out.push(covered / total);
            }
        }
        ExpertKind::Classification => {
            for class in 1..=NUM_SHAPES as u8 {
                let mut colors = [0.0; NUM_COLORS];
                let mut area = 0.0;
                for (col, _, _) in decoded.iter().flatten().filter(|d| d.1 == class) {
                    colors[*col as usize - 1] += 1.0;
                    area += 1.0;
                }
                normalize(&mut colors);
                out.push(if area > 0.0 { 1.0 } else { 0.0 });
                out.push(area / cells as f64);
                out.extend(colors);
            }
        }
        ExpertKind::Detection => {
            for q in 0..4 {
                let mut classes = [0.0; NUM_SHAPES];
                let mut covered = 0.0;
                let mut total = 0.0;
                let (mut x0, mut y0, mut x1, mut y1) = (g, g, 0, 0);
                for c in quadrant_cells(g, q) {
                    total += 1.0;
                    if let Some((_, sh, _)) = decoded[c] {
                        classes[sh as usize - 1] = 1.0;
                        covered += 1.0;
                        let (x, y) = (c % g, c / g);
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
                out.extend(classes);
                out.push(covered / total);
                if covered > 0.0 {
                    out.extend([x0, y0, x1, y1].map(|v| v as f64 / g as f64));
                } else {
                    out.extend([0.0; 4]);
                }
            }
        }
        ExpertKind::Segmentation => {
            for (c, d) in decoded.iter().enumerate() {
                let mut class = [0.0; NUM_SHAPES + 1];
                let mut color = [0.0; NUM_COLORS + 1];
                let mut anchor = 0.0;
                match d {
                    Some((col, sh, a)) => {
                        class[*sh as usize] = 1.0;
                        color[*col as usize] = 1.0;
                        anchor = if *a { 1.0 } else { 0.0 };
                    }
                    None => {
                        class[0] = 1.0;
                        color[0] = 1.0;
                    }
                }
                out.extend(class);
                out.extend(color);
                out.push(anchor);
                out.push((c / g) as f64 / g as f64);
                out.push((c % g) as f64 / g as f64);
            }
        }
    }
    Tensor::matrix(kind.tokens(g), kind.raw_dim(), out)
}

/// Expert features `[tokens × d_k]` of an image.
pub fn extract(kind: ExpertKind, image: &RenderedImage) -> Tensor {
    apply_fixed_map(kind, &raw_features(kind, image))
}

/// The expert's fixed affine map applied to a raw summary.
pub fn apply_fixed_map(kind: ExpertKind, raw: &Tensor) -> Tensor {
    let map = &fixed_maps()[kind.index()];
    let mut f = raw.matmul(&map.w).expect("fixed map matches raw width");
    for r in 0..f.rows() {
        for (v, b) in f.row_mut(r).iter_mut().zip(&map.b) {
            *v += b;
        }
    }
    f
}

/// All four experts' features for one image, indexed by [`ExpertKind::index`].
pub fn extract_all(image: &RenderedImage) -> [Tensor; 4] {
    ExpertKind::ALL.map(|k| extract(k, image))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; used to test the affine path in isolation.
    Identity,
}

/// Two affine layers `d_k → D → D` with an elementwise nonlinearity between,
/// stored under `proj.<short>.` in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projector {
    pub kind: ExpertKind,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl Projector {
    pub fn new(kind: ExpertKind, d_model: usize) -> Self {
        Self {
            kind,
            d_in: kind.feat_dim(),
            d_out: d_model,
            activation: Activation::Tanh,
        }
    }

    pub fn prefix(kind: ExpertKind) -> String {
        format!("proj.{}.", kind.short())
    }

    fn name(&self, part: &str) -> String {
        format!("{}{part}", Self::prefix(self.kind))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), ParamError> {
        let (i, o) = (self.d_in, self.d_out);
        store.insert_normal(&self.name("w1"), i, o, 1.0 / (i as f64).sqrt(), rng)?;
        store.insert(&self.name("b1"), Tensor::zeros(&[1, o]))?;
        store.insert_normal(&self.name("w2"), o, o, 1.0 / (o as f64).sqrt(), rng)?;
        store.insert(&self.name("b2"), Tensor::zeros(&[1, o]))?;
        Ok(())
    }

    /// Maps `feats` (`tokens × d_in`, any number of stacked images) to
    /// `tokens × D`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, feats: Var) -> Result<Var, TensorError> {
        let cols = tape.value(feats).cols();
        if cols != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                lhs: tape.value(feats).shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let h = tape.matmul(feats, p.var(&self.name("w1")))?;
        let h = tape.add_row(h, p.var(&self.name("b1")))?;
        let h = match self.activation {
            Activation::Tanh => tape.tanh(h),
            Activation::Identity => h,
        };
        let h = tape.matmul(h, p.var(&self.name("w2")))?;
        tape.add_row(h, p.var(&self.name("b2")))
    }
}

/// Stacks the features of several images into one matrix.
pub fn stack(feats: &[&Tensor]) -> Tensor {
    let cols = feats[0].cols();
    let rows: usize = feats.iter().map(|f| f.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for f in feats {
        data.extend_from_slice(f.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Precomputed features of every image of a dataset: training images first,
/// then evaluation images.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub grid_size: usize,
    pub train_len: usize,
    feats: Vec<[Tensor; 4]>,
}

impl FeatureBank {
    pub fn new(ds: &crate::data::Dataset) -> Self {
        let feats = ds
            .train
            .iter()
            .chain(&ds.eval)
            .map(|s| extract_all(&s.image))
            .collect();
        Self {
            grid_size: ds.config.grid_size,
            train_len: ds.train.len(),
            feats,
        }
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    /// Global image id of sample `index` in `split`.
    pub fn image_id(&self, split: crate::data::Split, index: usize) -> usize {
        match split {
            crate::data::Split::Train => index,
            crate::data::Split::Eval => self.train_len + index,
        }
    }

    pub fn get(&self, image: usize, kind: ExpertKind) -> &Tensor {
        &self.feats[image][kind.index()]
    }

    /// Features of several images stacked sample-major.
    pub fn stacked(&self, images: &[usize], kind: ExpertKind) -> Tensor {
        stack(&images.iter().map(|&i| self.get(i, kind)).collect::<Vec<_>>())
    }
}
