//! The two encoder pipelines.
//!
//! Pipeline 1 encodes a crop: a small conv backbone, global pooling into a
//! representation `r`, then a projection head onto the unit sphere.
//! Pipeline 2 encodes a full image into five pyramid levels (strides 4 to
//! 64) via lateral 1x1 convolutions fused top-down with nearest-neighbour
//! upsampling; every cell's channel vector goes through a shared head and is
//! normalized. The pipelines share no parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imops::Image;
use crate::ndgrad::{load_checkpoint, save_checkpoint, Parameter, Scalar, Tape, Tensor};

/// Backbone stage widths: stem plus three strided stages.
const STAGE_CHANNELS: [usize; 4] = [16, 16, 32, 64];
/// Number of pyramid levels; level 0 is the finest (stride 4).
pub const NUM_LEVELS: usize = 5;
/// Stride of pyramid level `l` is `4 << l`.
pub const BASE_STRIDE: usize = 4;

/// Architecture hyperparameters (checkpoints store only shapes; these live
/// in the run configuration).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Pipeline-2 input side; must be a positive multiple of 64.
    pub image_size: usize,
    /// Pipeline-1 input side; at least 16.
    pub crop_size: usize,
    /// Dimension of the crop representation r.
    pub repr_dim: usize,
    /// Dimension of the shared embedding space z.
    pub embed_dim: usize,
    /// Channel width of the pyramid maps.
    pub pyramid_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            crop_size: 32,
            repr_dim: 128,
            embed_dim: 32,
            pyramid_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 64 != 0 {
            return Err(Error::Data(format!(
                "image_size {} must be a positive multiple of 64",
                self.image_size
            )));
        }
        if self.crop_size < 16 {
            return Err(Error::Data(format!(
                "crop_size {} must be at least 16",
                self.crop_size
            )));
        }
        if self.repr_dim == 0 || self.embed_dim == 0 || self.pyramid_dim == 0 {
            return Err(Error::Data("embedding dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Grid side length of pyramid level `l`.
    pub fn grid_side(&self, level: usize) -> usize {
        self.image_size / (BASE_STRIDE << level)
    }
}

/// The four experiment configurations. They differ in augmentation presets;
/// M4 additionally puts a two-layer projection head on Pipeline 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    M1,
    M2,
    M3,
    M4,
}

impl ModelVariant {
    pub fn pipeline2_projection_head(self) -> bool {
        matches!(self, ModelVariant::M4)
    }

    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::M1,
        ModelVariant::M2,
        ModelVariant::M3,
        ModelVariant::M4,
    ];
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::M1 => "1",
            ModelVariant::M2 => "2",
            ModelVariant::M3 => "3",
            ModelVariant::M4 => "4",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "m1" => Ok(ModelVariant::M1),
            "2" | "m2" => Ok(ModelVariant::M2),
            "3" | "m3" => Ok(ModelVariant::M3),
            "4" | "m4" => Ok(ModelVariant::M4),
            other => Err(format!("unknown variant {other:?} (expected 1-4)")),
        }
    }
}

/// Unit-norm embedding, held as a `[1, D]` row so it can participate in
/// further taped operations.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    vector: Tensor<T>,
}

impl<T: Scalar> Embedding<T> {
    /// Wraps an existing `[1, D]` row, checking unit norm at tolerance 1e-4.
    pub fn from_row(vector: Tensor<T>) -> Result<Self> {
        if vector.shape().len() != 2 || vector.shape()[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                detail: format!("expected [1, D], got {:?}", vector.shape()),
            });
        }
        let norm = vector
            .data()
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::DegenerateEmbedding(format!(
                "expected unit norm, got {norm}"
            )));
        }
        Ok(Embedding { vector })
    }

    /// Normalizes raw values into an embedding (convenience for tests and
    /// rigged evaluation models); not recorded on any tape.
    pub fn from_unnormalized(values: &[T]) -> Result<Self> {
        let mut tape = Tape::inference();
        let t = Tensor::new(&[1, values.len()], values.to_vec())?;
        let n = tape.l2_normalize(&t)?;
        Embedding::from_row(n)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.vector
    }

    pub fn data(&self) -> &[T] {
        self.vector.data()
    }

    pub fn dim(&self) -> usize {
        self.vector.shape()[1]
    }
}

/// Crop representation prior to the projection head.
#[derive(Debug, Clone)]
pub struct BackboneRepresentation<T> {
    pub vector: Tensor<T>,
}

/// One pyramid level of a single image: a `rows x cols` grid of unit-norm
/// cell embeddings backed by a `[rows*cols, D]` tensor.
#[derive(Debug, Clone)]
pub struct EmbeddingGrid<T> {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    emb: Tensor<T>,
}

impl<T: Scalar> EmbeddingGrid<T> {
    pub fn new(level: usize, rows: usize, cols: usize, emb: Tensor<T>) -> Result<Self> {
        if emb.shape().len() != 2 || emb.shape()[0] != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "embedding_grid",
                detail: format!(
                    "level {level}: {rows}x{cols} grid needs [{}, D], got {:?}",
                    rows * cols,
                    emb.shape()
                ),
            });
        }
        Ok(EmbeddingGrid {
            level,
            rows,
            cols,
            emb,
        })
    }

    pub fn dim(&self) -> usize {
        self.emb.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.emb
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_slice(&self, row: usize, col: usize) -> &[T] {
        let d = self.dim();
        let i = self.cell_index(row, col);
        &self.emb.data()[i * d..(i + 1) * d]
    }

    /// Cell embedding as a taped row selection (gradients flow back to the
    /// grid tensor when recording).
    pub fn cell_embedding(&self, tape: &mut Tape<T>, row: usize, col: usize) -> Result<Embedding<T>> {
        let sel = tape.select_rows(&self.emb, &[self.cell_index(row, col)])?;
        Embedding::from_row(sel)
    }

    /// Normalized coordinates of a cell center within the image frame.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.cols as f64,
            (row as f64 + 0.5) / self.rows as f64,
        )
    }
}

/// All five levels for one image.
#[derive(Debug, Clone)]
pub struct PyramidEmbeddings<T> {
    pub grids: Vec<EmbeddingGrid<T>>,
}

impl<T: Scalar> PyramidEmbeddings<T> {
    pub fn level(&self, l: usize) -> &EmbeddingGrid<T> {
        &self.grids[l]
    }
}

/// Batched pyramid rows straight out of Pipeline 2; per-image grids are
/// sliced from these tensors.
pub struct PyramidRows<T> {
    levels: Vec<(Tensor<T>, usize, usize)>, // ([B*h*w, D], grid_h, grid_w)
    batch: usize,
}

impl<T: Scalar> PyramidRows<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Extracts the per-image pyramid for batch item `i`. Selection is
    /// recorded on the tape, so training losses can differentiate through it.
    pub fn image_pyramid(&self, tape: &mut Tape<T>, i: usize) -> Result<PyramidEmbeddings<T>> {
        assert!(i < self.batch, "batch index {i} out of {}", self.batch);
        let mut grids = Vec::with_capacity(NUM_LEVELS);
        for (level, (rows, gh, gw)) in self.levels.iter().enumerate() {
            let hw = gh * gw;
            let indices: Vec<usize> = (i * hw..(i + 1) * hw).collect();
            let emb = tape.select_rows(rows, &indices)?;
            grids.push(EmbeddingGrid::new(level, *gh, *gw, emb)?);
        }
        Ok(PyramidEmbeddings { grids })
    }
}

struct Conv<T> {
    w: Parameter<T>,
    b: Parameter<T>,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Conv<T> {
    fn init(
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = he_uniform(&format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng);
        let b = Parameter::new(format!("{name}.bias"), &[cout], vec![T::zero(); cout])
            .expect("finite zeros");
        Conv {
            w,
            b,
            stride,
            padding,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.conv2d(x, self.w.value(), self.b.value(), self.stride, self.padding)
    }

    fn params(&self) -> [&Parameter<T>; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.w, &mut self.b]
    }
}

struct Dense<T> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(name: &str, dout: usize, din: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = he_uniform(&format!("{name}.weight"), &[dout, din], din, rng);
        let b = Parameter::new(format!("{name}.bias"), &[dout], vec![T::zero(); dout])
            .expect("finite zeros");
        Dense { w, b }
    }

    fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.linear(x, self.w.value(), self.b.value())
    }

    fn params(&self) -> [&Parameter<T>; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Fan-in-scaled uniform init, bound sqrt(6 / fan_in); biases are zero.
fn he_uniform<T: Scalar>(
    name: &str,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Parameter<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Parameter::new(name, shape, data).expect("finite init")
}

struct Backbone<T> {
    stem: Conv<T>,
    stages: Vec<Conv<T>>,
}

impl<T: Scalar> Backbone<T> {
    fn init(prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv::init(&format!("{prefix}.stem"), STAGE_CHANNELS[0], 3, 3, 2, 1, rng);
        let stages = (1..STAGE_CHANNELS.len())
            .map(|i| {
                Conv::init(
                    &format!("{prefix}.stage{i}"),
                    STAGE_CHANNELS[i],
                    STAGE_CHANNELS[i - 1],
                    3,
                    2,
                    1,
                    rng,
                )
            })
            .collect();
        Backbone { stem, stages }
    }

    /// Returns all stage outputs after ReLU: strides 2, 4, 8, 16.
    fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut features = Vec::with_capacity(4);
        let h = self.stem.forward(tape, x)?;
        features.push(tape.relu(&h));
        for stage in &self.stages {
            let h = stage.forward(tape, features.last().expect("non-empty"))?;
            features.push(tape.relu(&h));
        }
        Ok(features)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.stem.params().into();
        for s in &self.stages {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.stem.params_mut().into();
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        v
    }
}

struct CropEncoder<T> {
    backbone: Backbone<T>,
    embed: Dense<T>,
    head1: Dense<T>,
    head2: Dense<T>,
}

struct PyramidEncoder<T> {
    backbone: Backbone<T>,
    extra4: Conv<T>,
    extra5: Conv<T>,
    laterals: Vec<Conv<T>>,
    head: PyramidHead<T>,
}

enum PyramidHead<T> {
    /// Single linear map, shared across cells and levels (M1-M3).
    Linear(Dense<T>),
    /// Two-layer projection head (M4).
    Mlp(Dense<T>, Dense<T>),
}

/// Both pipelines plus their configuration. Weights are read-only during
/// evaluation and may be shared across threads; training mutates them
/// through [`Model::parameters_mut`] (single writer).
pub struct Model<T> {
    pub variant: ModelVariant,
    pub cfg: NetConfig,
    crop_enc: CropEncoder<T>,
    pyr_enc: PyramidEncoder<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(variant: ModelVariant, cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::ndgrad::rng::mix_seed(seed, &[0x6d6f64]));
        let dp = cfg.pyramid_dim;
        let last = *STAGE_CHANNELS.last().expect("non-empty");

        let crop_enc = CropEncoder {
            backbone: Backbone::init("crop.backbone", &mut rng),
            embed: Dense::init("crop.embed", cfg.repr_dim, last, &mut rng),
            head1: Dense::init("crop.head.fc1", cfg.repr_dim, cfg.repr_dim, &mut rng),
            head2: Dense::init("crop.head.fc2", cfg.embed_dim, cfg.repr_dim, &mut rng),
        };

        let backbone = Backbone::init("pyramid.backbone", &mut rng);
        let extra4 = Conv::init("pyramid.extra4", last, last, 3, 2, 1, &mut rng);
        let extra5 = Conv::init("pyramid.extra5", last, last, 3, 2, 1, &mut rng);
        // Lateral sources: stage1 (stride 4), stage2 (8), stage3 (16),
        // extra4 (32), extra5 (64).
        let lateral_channels = [
            STAGE_CHANNELS[1],
            STAGE_CHANNELS[2],
            STAGE_CHANNELS[3],
            last,
            last,
        ];
        let laterals = lateral_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| Conv::init(&format!("pyramid.lateral{i}"), dp, cin, 1, 1, 0, &mut rng))
            .collect();
        let head = if variant.pipeline2_projection_head() {
            PyramidHead::Mlp(
                Dense::init("pyramid.head.fc1", dp, dp, &mut rng),
                Dense::init("pyramid.head.fc2", cfg.embed_dim, dp, &mut rng),
            )
        } else {
            PyramidHead::Linear(Dense::init("pyramid.head.proj", cfg.embed_dim, dp, &mut rng))
        };

        Ok(Model {
            variant,
            cfg,
            crop_enc,
            pyr_enc: PyramidEncoder {
                backbone,
                extra4,
                extra5,
                laterals,
                head,
            },
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.crop_enc.backbone.params();
        v.extend(self.crop_enc.embed.params());
        v.extend(self.crop_enc.head1.params());
        v.extend(self.crop_enc.head2.params());
        v.extend(self.pyr_enc.backbone.params());
        v.extend(self.pyr_enc.extra4.params());
        v.extend(self.pyr_enc.extra5.params());
        for l in &self.pyr_enc.laterals {
            v.extend(l.params());
        }
        match &self.pyr_enc.head {
            PyramidHead::Linear(d) => v.extend(d.params()),
            PyramidHead::Mlp(a, b) => {
                v.extend(a.params());
                v.extend(b.params());
            }
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.crop_enc.backbone.params_mut();
        v.extend(self.crop_enc.embed.params_mut());
        v.extend(self.crop_enc.head1.params_mut());
        v.extend(self.crop_enc.head2.params_mut());
        v.extend(self.pyr_enc.backbone.params_mut());
        v.extend(self.pyr_enc.extra4.params_mut());
        v.extend(self.pyr_enc.extra5.params_mut());
        for l in &mut self.pyr_enc.laterals {
            v.extend(l.params_mut());
        }
        match &mut self.pyr_enc.head {
            PyramidHead::Linear(d) => v.extend(d.params_mut()),
            PyramidHead::Mlp(a, b) => {
                v.extend(a.params_mut());
                v.extend(b.params_mut());
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    /// Pipeline 1 on a batch of crop-sized images: `(r [B, Dr], z [B, Dz])`.
    pub fn forward_crops(
        &self,
        tape: &mut Tape<T>,
        imgs: &[&Image],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = image_batch::<T>(imgs, self.cfg.crop_size, "crop")?;
        self.forward_crop_tensor(tape, &x)
    }

    /// Pipeline 1 on an already-built `[B, 3, S, S]` tensor.
    pub fn forward_crop_tensor(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let feats = self.crop_enc.backbone.forward(tape, x)?;
        let pooled = tape.global_avg_pool(feats.last().expect("non-empty"))?;
        let r = self.crop_enc.embed.forward(tape, &pooled)?;
        let h = self.crop_enc.head1.forward(tape, &r)?;
        let h = tape.relu(&h);
        let h = self.crop_enc.head2.forward(tape, &h)?;
        let z = tape.l2_normalize(&h)?;
        Ok((r, z))
    }

    /// Pipeline 2 on a batch of full-size images.
    pub fn forward_images(&self, tape: &mut Tape<T>, imgs: &[&Image]) -> Result<PyramidRows<T>> {
        let x = image_batch::<T>(imgs, self.cfg.image_size, "image")?;
        self.forward_image_tensor(tape, &x)
    }

    /// Pipeline 2 on an already-built `[B, 3, S, S]` tensor.
    pub fn forward_image_tensor(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<PyramidRows<T>> {
        let batch = x.shape()[0];
        let feats = self.pyr_enc.backbone.forward(tape, x)?;
        // Lateral sources at strides 4, 8, 16, 32, 64.
        let c4 = self.pyr_enc.extra4.forward(tape, feats.last().expect("non-empty"))?;
        let c4 = tape.relu(&c4);
        let c5 = self.pyr_enc.extra5.forward(tape, &c4)?;
        let c5 = tape.relu(&c5);
        let sources = [&feats[1], &feats[2], &feats[3], &c4, &c5];

        // Top-down fusion: coarsest lateral first, then add upsampled.
        let mut maps: Vec<Option<Tensor<T>>> = vec![None; NUM_LEVELS];
        let mut above: Option<Tensor<T>> = None;
        for level in (0..NUM_LEVELS).rev() {
            let lat = self.pyr_enc.laterals[level].forward(tape, sources[level])?;
            let fused = match &above {
                None => lat,
                Some(up) => {
                    let up2 = tape.upsample_nearest2x(up)?;
                    tape.add(&lat, &up2)?
                }
            };
            above = Some(fused.clone());
            maps[level] = Some(fused);
        }

        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for map in maps {
            let map = map.expect("filled above");
            let (gh, gw) = (map.shape()[2], map.shape()[3]);
            let rows = tape.channels_to_rows(&map)?;
            let h = match &self.pyr_enc.head {
                PyramidHead::Linear(d) => d.forward(tape, &rows)?,
                PyramidHead::Mlp(a, b) => {
                    let h = a.forward(tape, &rows)?;
                    let h = tape.relu(&h);
                    b.forward(tape, &h)?
                }
            };
            let z = tape.l2_normalize(&h)?;
            levels.push((z, gh, gw));
        }
        Ok(PyramidRows { levels, batch })
    }

    /// Evaluation entry point for one crop (no recording).
    pub fn encode_crop(&self, img: &Image) -> Result<(BackboneRepresentation<T>, Embedding<T>)> {
        let mut tape = Tape::inference();
        let (r, z) = self.forward_crops(&mut tape, &[img])?;
        Ok((
            BackboneRepresentation { vector: r },
            Embedding::from_row(z)?,
        ))
    }

    /// Evaluation entry point for one full image (no recording).
    pub fn encode_image(&self, img: &Image) -> Result<PyramidEmbeddings<T>> {
        let mut tape = Tape::inference();
        let rows = self.forward_images(&mut tape, &[img])?;
        rows.image_pyramid(&mut tape, 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.parameters(), path)
    }

    /// Loads weights saved by [`Model::save`] into a freshly built model.
    /// Validates the parameter name set and every shape.
    pub fn load(path: &Path, variant: ModelVariant, cfg: NetConfig) -> Result<Self> {
        let raw = load_checkpoint(path)?;
        let mut model = Model::new(variant, cfg, 0)?;
        let mut by_name: std::collections::HashMap<String, crate::ndgrad::RawParameter> =
            raw.into_iter().map(|p| (p.name.clone(), p)).collect();
        for param in model.parameters_mut() {
            let Some(loaded) = by_name.remove(param.name()) else {
                return Err(Error::CheckpointMismatch(format!(
                    "missing parameter {}",
                    param.name()
                )));
            };
            if loaded.shape != param.value().shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: shape {:?} in file, model expects {:?}",
                    param.name(),
                    loaded.shape,
                    param.value().shape()
                )));
            }
            param.assign(loaded.values.iter().map(|&v| T::from_f32(v)).collect())?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::CheckpointMismatch(format!(
                "unknown parameter {extra} in checkpoint"
            )));
        }
        Ok(model)
    }
}

/// Stacks same-size images into `[B, 3, S, S]` (channel-major).
pub fn image_batch<T: Scalar>(imgs: &[&Image], expect_side: usize, what: &str) -> Result<Tensor<T>> {
    if imgs.is_empty() {
        return Err(Error::Data(format!("empty {what} batch")));
    }
    for img in imgs {
        if img.width() != expect_side || img.height() != expect_side {
            return Err(Error::InvalidImage(format!(
                "wrong {what} input size: got {}x{}, expected {expect_side}x{expect_side}",
                img.width(),
                img.height()
            )));
        }
    }
    let b = imgs.len();
    let s = expect_side;
    let mut data = vec![T::zero(); b * 3 * s * s];
    for (bi, img) in imgs.iter().enumerate() {
        let px = img.pixels();
        for c in 0..3 {
            let base = (bi * 3 + c) * s * s;
            for i in 0..s * s {
                data[base + i] = T::from_f32(px[i * 3 + c]);
            }
        }
    }
    Tensor::new(&[b, 3, s, s], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(n: usize, seed: u64) -> Image {
        let mut state = seed;
        Image::from_fn(n, n, |_, _| {
            let mut v = [0.0f32; 3];
            for o in &mut v {
                state = crate::ndgrad::rng::splitmix64(state);
                *o = (state >> 40) as f32 / (1u64 << 24) as f32;
            }
            v
        })
    }

    #[test]
    fn crop_embedding_is_unit_norm_and_deterministic() {
        let model = Model::<f32>::new(ModelVariant::M4, NetConfig::default(), 11).unwrap();
        let img = noise_image(32, 5);
        let (_, z1) = model.encode_crop(&img).unwrap();
        let (_, z2) = model.encode_crop(&img).unwrap();
        let norm: f64 = z1.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        // bit-identical forward
        let bits1: Vec<u32> = z1.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u32> = z2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn pyramid_grid_shapes_and_norms() {
        let model = Model::<f32>::new(ModelVariant::M2, NetConfig::default(), 3).unwrap();
        let img = noise_image(64, 9);
        let pyr = model.encode_image(&img).unwrap();
        assert_eq!(pyr.grids.len(), 5);
        for (l, expect) in [16usize, 8, 4, 2, 1].iter().enumerate() {
            let g = pyr.level(l);
            assert_eq!((g.rows, g.cols), (*expect, *expect), "level {l}");
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let norm: f64 = g
                        .cell_slice(r, c)
                        .iter()
                        .map(|v| (*v as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!((norm - 1.0).abs() < 1e-6, "level {l} cell {r},{c}: {norm}");
                }
            }
        }
    }

    #[test]
    fn wrong_input_size_is_an_error() {
        let model = Model::<f32>::new(ModelVariant::M4, NetConfig::default(), 0).unwrap();
        let img = noise_image(48, 1);
        assert!(model.encode_crop(&img).is_err());
        assert!(model.encode_image(&img).is_err());
    }

    #[test]
    fn pipelines_share_no_parameters() {
        let model = Model::<f32>::new(ModelVariant::M4, NetConfig::default(), 0).unwrap();
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name()).collect();
        let crop: std::collections::HashSet<&&str> =
            names.iter().filter(|n| n.starts_with("crop.")).collect();
        let pyr: std::collections::HashSet<&&str> =
            names.iter().filter(|n| n.starts_with("pyramid.")).collect();
        assert_eq!(crop.len() + pyr.len(), names.len());
        assert!(crop.iter().all(|n| !pyr.contains(*n)));
        // names unique
        let set: std::collections::HashSet<&&str> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn variant_head_structure() {
        let m4 = Model::<f32>::new(ModelVariant::M4, NetConfig::default(), 0).unwrap();
        let m2 = Model::<f32>::new(ModelVariant::M2, NetConfig::default(), 0).unwrap();
        let names4: Vec<String> = m4.parameters().iter().map(|p| p.name().to_string()).collect();
        let names2: Vec<String> = m2.parameters().iter().map(|p| p.name().to_string()).collect();
        assert!(names4.iter().any(|n| n == "pyramid.head.fc2.weight"));
        assert!(names2.iter().any(|n| n == "pyramid.head.proj.weight"));
        assert!(!names2.iter().any(|n| n.contains("pyramid.head.fc")));
    }
}
