use serde::{Deserialize, Serialize};

use super::AlignError;

/// One embedding of width `D` per (expert, image), with a population
/// bitmap and per-expert write permissions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    experts: usize,
    images: usize,
    dim: usize,
    data: Vec<f64>,
    populated: Vec<bool>,
    sealed: Vec<bool>,
    active: Vec<bool>,
}

impl FeatureCache {
    pub fn new(experts: usize, images: usize, dim: usize) -> Self {
        Self {
            experts,
            images,
            dim,
            data: vec![0.0; experts * images * dim],
            populated: vec![false; experts * images],
            sealed: vec![false; experts],
            active: vec![false; experts],
        }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    fn slot(&self, expert: usize, image: usize) -> Result<usize, AlignError> {
        if expert >= self.experts || image >= self.images {
            return Err(AlignError::CacheIndex { expert, image });
        }
        Ok(expert * self.images + image)
    }

    /// Opens expert `i`'s row for writing. A sealed row cannot reopen.
    pub fn activate(&mut self, expert: usize) -> Result<(), AlignError> {
        self.slot(expert, 0)?;
        if self.sealed[expert] {
            return Err(AlignError::CacheSealed { expert });
        }
        self.active[expert] = true;
        Ok(())
    }

    /// Closes expert `i`'s row for good.
    pub fn seal(&mut self, expert: usize) {
        self.active[expert] = false;
        self.sealed[expert] = true;
    }

    pub fn is_sealed(&self, expert: usize) -> bool {
        self.sealed[expert]
    }

    pub fn write(&mut self, expert: usize, image: usize, embedding: &[f64]) -> Result<(), AlignError> {
        let s = self.slot(expert, image)?;
        if embedding.len() != self.dim {
            return Err(AlignError::Width {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        if self.sealed[expert] {
            return Err(AlignError::CacheSealed { expert });
        }
        if !self.active[expert] {
            return Err(AlignError::CacheInactive { expert });
        }
        self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(embedding);
        self.populated[s] = true;
        Ok(())
    }

    pub fn read(&self, expert: usize, image: usize) -> Result<&[f64], AlignError> {
        let s = self.slot(expert, image)?;
        if !self.populated[s] {
            return Err(AlignError::Unpopulated { expert, image });
        }
        Ok(&self.data[s * self.dim..(s + 1) * self.dim])
    }

    pub fn is_populated(&self, expert: usize, image: usize) -> bool {
        self.slot(expert, image).map_or(false, |s| self.populated[s])
    }

    /// Whether every image has an entry for `expert`.
    pub fn row_full(&self, expert: usize) -> bool {
        expert < self.experts
            && self.populated[expert * self.images..(expert + 1) * self.images]
                .iter()
                .all(|&p| p)
    }

    pub fn bitmap(&self) -> &[bool] {
        &self.populated
    }

    pub fn sealed(&self) -> &[bool] {
        &self.sealed
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Overwrites every populated entry with `f(expert, image, k)`,
    /// bypassing the write protocol. Intended for probing cache
    /// dependence, not for training.
    pub fn scramble(&mut self, mut f: impl FnMut(usize, usize, usize) -> f64) {
        for e in 0..self.experts {
            for i in 0..self.images {
                let s = e * self.images + i;
                if self.populated[s] {
                    for k in 0..self.dim {
                        self.data[s * self.dim + k] = f(e, i, k);
                    }
                }
            }
        }
    }

    /// Rebuilds a cache from serialized parts.
    pub fn from_parts(
        experts: usize,
        images: usize,
        dim: usize,
        data: Vec<f64>,
        populated: Vec<bool>,
        sealed: Vec<bool>,
    ) -> Result<Self, AlignError> {
        if data.len() != experts * images * dim
            || populated.len() != experts * images
            || sealed.len() != experts
        {
            return Err(AlignError::Plan("cache parts have inconsistent sizes".into()));
        }
        Ok(Self {
            experts,
            images,
            dim,
            data,
            populated,
            sealed,
            active: vec![false; experts],
        })
    }
}

/// `γ · Σ C_i^j · p_i` over the listed prior experts. Terms whose gate is
/// closed are skipped entirely, so their cache entries are never read.
pub fn gated_query(
    cache: &FeatureCache,
    prior: &[usize],
    image: usize,
    gates: &[bool],
    gamma: f64,
) -> Result<Vec<f64>, AlignError> {
    if gates.len() != prior.len() {
        return Err(AlignError::Plan(format!(
            "{} gates for {} prior experts",
            gates.len(),
            prior.len()
        )));
    }
    let mut q = vec![0.0; cache.dim()];
    if gamma == 0.0 {
        return Ok(q);
    }
    for (&e, &open) in prior.iter().zip(gates) {
        if !open {
            continue;
        }
        for (a, &c) in q.iter_mut().zip(cache.read(e, image)?) {
            *a += gamma * c;
        }
    }
    Ok(q)
}

/// Evaluation-time query: every gate open with weight `γ·prob`.
pub fn expected_query(
    cache: &FeatureCache,
    prior: &[usize],
    image: usize,
    gamma: f64,
    prob: f64,
) -> Result<Vec<f64>, AlignError> {
    gated_query(cache, prior, image, &vec![true; prior.len()], gamma * prob)
}
