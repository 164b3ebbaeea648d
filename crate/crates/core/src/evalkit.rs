//! Zero-shot evaluation: per-level Similarity Grid Accuracy, top-k retrieval
//! accuracy, and per-epoch training curves.
//!
//! SGA correctness rule: a sample is correct at a level iff the
//! maximum-similarity cell's center lies inside the crop rectangle, ties
//! broken toward the lowest row-major index (which is then still required to
//! qualify).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::imops::{crop, decode_image, resize, sample_crop, CropSpec, Image, Interpolation, RectN};
use crate::index::RetrievalIndex;
use crate::ndgrad::rng::stream_rng;
use crate::ndgrad::Scalar;
use crate::net::{Embedding, EmbeddingGrid, Model, NetConfig, PyramidEmbeddings, NUM_LEVELS};

/// Dense cosine-similarity map of one query against one pyramid grid.
#[derive(Debug, Clone)]
pub struct SimilarityGrid {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl SimilarityGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// First-maximum cell in row-major scan order (the tie-break rule).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        (arg / self.cols, arg % self.cols)
    }
}

/// Cosine similarity of the query against every cell of a grid.
pub fn similarity_grid<T: Scalar>(
    z_query: &Embedding<T>,
    grid: &EmbeddingGrid<T>,
) -> Result<SimilarityGrid> {
    if z_query.dim() != grid.dim() {
        return Err(Error::ShapeMismatch {
            op: "similarity_grid",
            detail: format!("query dim {} vs grid dim {}", z_query.dim(), grid.dim()),
        });
    }
    let q = z_query.data();
    let mut values = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let cell = grid.cell_slice(r, c);
            let dot: f64 = q
                .iter()
                .zip(cell)
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            values.push(dot);
        }
    }
    Ok(SimilarityGrid {
        rows: grid.rows,
        cols: grid.cols,
        values,
    })
}

/// Per-level correctness of one query embedding against one pyramid.
pub fn sga_sample<T: Scalar>(
    z_query: &Embedding<T>,
    pyr: &PyramidEmbeddings<T>,
    rect: RectN,
) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(pyr.grids.len());
    for grid in &pyr.grids {
        let sims = similarity_grid(z_query, grid)?;
        let (r, c) = sims.argmax();
        let (cx, cy) = grid.cell_center(r, c);
        out.push(rect.contains(cx, cy));
    }
    Ok(out)
}

/// Similarity Grid Accuracy per pyramid level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgaResult {
    pub per_level: Vec<f64>,
    pub n_samples: usize,
}

impl SgaResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Encodes each `(image, crop)` pair through both pipelines and scores
/// localization per level. Images may be any size; they are resized to the
/// model's input sizes, while crop geometry stays in source coordinates.
pub fn sga<T: Scalar>(model: &Model<T>, eval_set: &[(Image, CropSpec)]) -> Result<SgaResult> {
    if eval_set.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let flags: Vec<Vec<bool>> = eval_set
        .par_iter()
        .map(|(img, spec)| -> Result<Vec<bool>> {
            spec.validate_against(img)?;
            let full = resize(img, model.cfg.image_size, model.cfg.image_size, Interpolation::Bilinear)?;
            let pyr = model.encode_image(&full)?;
            let crop_img = resize(
                &crop(img, spec)?,
                model.cfg.crop_size,
                model.cfg.crop_size,
                Interpolation::Bilinear,
            )?;
            let (_, z) = model.encode_crop(&crop_img)?;
            sga_sample(&z, &pyr, spec.normalized(img.width(), img.height()))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = flags.len();
    let mut per_level = vec![0.0; NUM_LEVELS];
    for f in &flags {
        for (l, ok) in f.iter().enumerate() {
            if *ok {
                per_level[l] += 1.0;
            }
        }
    }
    for v in &mut per_level {
        *v /= n as f64;
    }
    Ok(SgaResult {
        per_level,
        n_samples: n,
    })
}

/// Mean and standard deviation of SGA under a uniform-argmax (random
/// embedding) model: per sample, the success probability is the fraction of
/// cell centers inside the crop.
#[derive(Debug, Clone, Copy)]
pub struct LevelBaseline {
    pub mean: f64,
    pub sigma: f64,
}

pub fn random_argmax_baseline(net: &NetConfig, eval_set: &[(Image, CropSpec)]) -> Vec<LevelBaseline> {
    let n = eval_set.len();
    (0..NUM_LEVELS)
        .map(|level| {
            let side = net.grid_side(level);
            let mut mean = 0.0;
            let mut var = 0.0;
            for (img, spec) in eval_set {
                let rect = spec.normalized(img.width(), img.height());
                let mut inside = 0usize;
                for r in 0..side {
                    for c in 0..side {
                        let cx = (c as f64 + 0.5) / side as f64;
                        let cy = (r as f64 + 0.5) / side as f64;
                        if rect.contains(cx, cy) {
                            inside += 1;
                        }
                    }
                }
                let p = inside as f64 / (side * side) as f64;
                mean += p;
                var += p * (1.0 - p);
            }
            LevelBaseline {
                mean: mean / n as f64,
                sigma: var.sqrt() / n as f64,
            }
        })
        .collect()
}

/// Evaluation crops with a fixed seed, cycling through the dataset.
pub fn build_eval_crops(ds: &Dataset, n_samples: usize, seed: u64) -> Result<Vec<(Image, CropSpec)>> {
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let images: Vec<(String, Image)> = ds
        .entries()
        .iter()
        .map(|(id, path)| Ok((id.clone(), decode_image(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let (id, img) = &images[i % images.len()];
        let spec = sample_crop(img, id, &mut stream_rng(seed, i as u64))?;
        out.push((img.clone(), spec));
    }
    Ok(out)
}

/// Top-k retrieval accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopKResult {
    pub k_values: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl TopKResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// For each crop query: encode through Pipeline 1, rank the index, and count
/// the query correct at `k` iff its source image appears in the top `k`
/// (the source is not excluded from the candidates).
pub fn topk_accuracy(
    model: &Model<f32>,
    index: &RetrievalIndex,
    images: &Dataset,
    queries: &[CropSpec],
    ks: &[usize],
) -> Result<TopKResult> {
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::Data("k values must be positive".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let k_max = *ks.last().expect("non-empty");

    for q in queries {
        if !index.contains(&q.source_id) {
            return Err(Error::Data(format!(
                "query source {:?} missing from index",
                q.source_id
            )));
        }
    }

    let ranks: Vec<Option<usize>> = queries
        .par_iter()
        .map(|spec| -> Result<Option<usize>> {
            let path = images.path_of(&spec.source_id).ok_or_else(|| {
                Error::Data(format!("query source {:?} not in dataset", spec.source_id))
            })?;
            let img = decode_image(path)?;
            let crop_img = resize(
                &crop(&img, spec)?,
                model.cfg.crop_size,
                model.cfg.crop_size,
                Interpolation::Bilinear,
            )?;
            let (_, z) = model.encode_crop(&crop_img)?;
            let ranked = index.query(z.data(), k_max)?;
            Ok(ranked.iter().position(|r| r.image_id == spec.source_id))
        })
        .collect::<Result<Vec<_>>>()?;

    let accuracy = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p < k)).count();
            hits as f64 / queries.len() as f64
        })
        .collect();
    Ok(TopKResult {
        k_values: ks,
        accuracy,
    })
}

/// One training step's averaged similarity/loss values.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub loss: f64,
}

/// Arithmetic means of the per-step metrics at the conclusion of an epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub avg_positive_sim: f64,
    pub avg_negative_sim: f64,
    pub avg_loss: f64,
}

impl EpochStats {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializes")
    }
}

pub fn track_epoch(epoch: usize, steps: &[StepMetrics]) -> Result<EpochStats> {
    if steps.is_empty() {
        return Err(Error::Data("epoch with no steps".into()));
    }
    let n = steps.len() as f64;
    Ok(EpochStats {
        epoch,
        avg_positive_sim: steps.iter().map(|s| s.pos_sim).sum::<f64>() / n,
        avg_negative_sim: steps.iter().map(|s| s.neg_sim).sum::<f64>() / n,
        avg_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
    })
}

pub fn write_metrics_jsonl(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut text = String::new();
    for s in stats {
        text.push_str(&s.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
