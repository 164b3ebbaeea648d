//! Training loop: augment, encode both pipelines, select positives/anchors
//! per level, average the anchor-based loss, and take an adaptive
//! moment-estimate step.
//!
//! Supervision geometry: the training crop is sampled inside the augmented
//! view's source viewport, then its rectangle is mapped through the logged
//! geometric transforms into the augmented frame, so the positive cell and
//! anchor exclusions are exact for every sample.

use rand::Rng;

use crate::contrast::{
    batch_loss, select_positive_and_anchors, LossConfig, LossSample,
};
use crate::data::{epoch_augment, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{track_epoch, EpochStats, StepMetrics};
use crate::imops::{
    crop, decode_image, resize, sample_crop_within, AugmentConfig, Image, RectN,
};
use crate::ndgrad::rng::{mix_seed, stream_rng};
use crate::ndgrad::{Gradients, Parameter, Scalar, Tape, Tensor};
use crate::net::{Embedding, Model, NUM_LEVELS};

/// Adaptive per-parameter step with first/second moment estimates.
/// Moments are kept in f64; parameters stay in their own precision.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over all parameters. A non-finite resulting parameter is a
    /// hard error.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut Parameter<T>],
        grads: &Gradients<T>,
    ) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value().numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Data(format!(
                "optimizer state for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get_or_zeros(p.value());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut next = Vec::with_capacity(g.len());
            for (j, gj) in g.iter().enumerate() {
                let gf = gj.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gf;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gf * gf;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let cur = p.value().data()[j].as_f64();
                next.push(T::from_f64(cur - self.lr * mhat / (vhat.sqrt() + self.eps)));
            }
            p.assign(next)?;
        }
        Ok(())
    }
}

fn dot64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

struct PreparedSample {
    crop_img: Image,
    aug_img: Image,
    rect: RectN,
}

fn prepare_sample(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    id: &str,
    img: &Image,
    epoch: usize,
    sample_index: u64,
) -> Result<PreparedSample> {
    let (aug_img, log) = crate::imops::augment(img, aug, sample_index)?;
    let viewport = log.viewport(img.width(), img.height());
    let mut crop_rng = stream_rng(
        mix_seed(cfg.seed, &[0x6372_6f70, epoch as u64]),
        sample_index,
    );
    let spec = sample_crop_within(img, viewport, id, &mut crop_rng)?;
    let interp = cfg.augment.interpolations[crop_rng.gen_range(0..cfg.augment.interpolations.len())];
    let crop_img = resize(&crop(img, &spec)?, cfg.crop_size, cfg.crop_size, interp)?;
    let (mapped, (fw, fh)) = log.map_rect(spec.rect(), img.width(), img.height());
    Ok(PreparedSample {
        crop_img,
        aug_img,
        rect: mapped.normalized_in(fw as f64, fh as f64),
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    prepared: &[PreparedSample],
    epoch: usize,
    step: usize,
) -> Result<StepMetrics> {
    let n = prepared.len();
    let mut tape = Tape::new();

    let crop_refs: Vec<&Image> = prepared.iter().map(|p| &p.crop_img).collect();
    let (_r, z1) = model.forward_crops(&mut tape, &crop_refs)?;
    let img_refs: Vec<&Image> = prepared.iter().map(|p| &p.aug_img).collect();
    let rows = model.forward_images(&mut tape, &img_refs)?;

    let mut z_is = Vec::with_capacity(n);
    for s in 0..n {
        z_is.push(Embedding::from_row(tape.select_rows(&z1, &[s])?)?);
    }
    let mut pyrs = Vec::with_capacity(n);
    for s in 0..n {
        pyrs.push(rows.image_pyramid(&mut tape, s)?);
    }

    let mut total: Option<Tensor<f32>> = None;
    let mut pos_sims: Vec<f64> = Vec::new();
    let mut neg_sims: Vec<f64> = Vec::new();
    for level in 0..NUM_LEVELS {
        let mut samples = Vec::with_capacity(n);
        for s in 0..n {
            let anchor_seed = mix_seed(
                cfg.seed,
                &[0x616e_63, epoch as u64, step as u64, s as u64, level as u64],
            );
            let (z_j, anchors) = select_positive_and_anchors(
                &mut tape,
                &pyrs[s],
                prepared[s].rect,
                level,
                loss_cfg.anchors_per_sample,
                anchor_seed,
            )?;
            samples.push(LossSample {
                z_i: z_is[s].clone(),
                z_j,
                anchors,
            });
        }
        for s in 0..n {
            let zi = samples[s].z_i.data();
            pos_sims.push(dot64(zi, samples[s].z_j.data()));
            for (t, other) in samples.iter().enumerate() {
                if t == s {
                    continue;
                }
                neg_sims.push(dot64(zi, other.z_i.data()));
                neg_sims.push(dot64(zi, other.z_j.data()));
            }
            for row in samples[s].anchors.iter_rows() {
                neg_sims.push(dot64(zi, row));
            }
        }
        let level_loss = batch_loss(&mut tape, &samples, loss_cfg)?;
        total = Some(match total {
            None => level_loss,
            Some(t) => tape.add(&t, &level_loss)?,
        });
    }

    let total = total.expect("at least one level");
    let loss = total.item() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(&total)?;
    adam.step(&mut model.parameters_mut(), &grads)?;

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(StepMetrics {
        pos_sim: mean(&pos_sims),
        neg_sim: mean(&neg_sims),
        loss,
    })
}

/// Trains on the dataset, invoking `on_epoch` after each epoch's stats are
/// reduced. Deterministic for a fixed `(config, dataset)`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Model<f32>, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let images: Vec<(String, Image)> = data
        .entries()
        .iter()
        .map(|(id, path)| Ok((id.clone(), decode_image(path)?)))
        .collect::<Result<Vec<_>>>()?;
    for (id, img) in &images {
        if img.width() < crate::imops::MIN_CROP_SIDE || img.height() < crate::imops::MIN_CROP_SIDE {
            return Err(Error::Data(format!(
                "{id}: image {}x{} smaller than minimum crop side",
                img.width(),
                img.height()
            )));
        }
    }

    let mut model = Model::new(cfg.variant, cfg.net_config(), cfg.seed)?;
    let loss_cfg = cfg.loss_config();
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    let n = images.len();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let aug = epoch_augment(cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, mix_seed(0x7368_7566, &[epoch as u64]));
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut step_metrics = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<PreparedSample> = chunk
                .iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let (id, img) = &images[idx];
                    let sample_index = (step * cfg.batch_size + pos) as u64;
                    prepare_sample(cfg, &aug, id, img, epoch, sample_index)
                })
                .collect::<Result<Vec<_>>>()?;
            step_metrics.push(train_step(
                &mut model, &mut adam, cfg, &loss_cfg, &prepared, epoch, step,
            )?);
        }
        let es = track_epoch(epoch, &step_metrics)?;
        on_epoch(&es);
        stats.push(es);
    }
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Parameter::new("w", &[2], vec![1.0f32, -2.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);

        let mut tape = Tape::new();
        let sq = tape.mul(p.value(), p.value()).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        adam.step(&mut [&mut p], &grads).unwrap();
        // grad = 2w: positive for w0, negative for w1.
        assert!(p.value().data()[0] < 1.0);
        assert!(p.value().data()[1] > -2.0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Parameter::new("w", &[3], vec![2.0f32, -3.0, 0.5]).unwrap();
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..400 {
            let mut tape = Tape::new();
            let sq = tape.mul(p.value(), p.value()).unwrap();
            let loss = tape.sum(&sq);
            let grads = tape.backward(&loss).unwrap();
            adam.step(&mut [&mut p], &grads).unwrap();
        }
        for v in p.value().data() {
            assert!(v.abs() < 0.05, "{:?}", p.value().data());
        }
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut p = Parameter::new("w", &[1], vec![1.0f32]).unwrap();
        let mut adam = Adam::new(f64::NAN, 0.9, 0.999, 1e-8);
        let mut tape = Tape::new();
        let sq = tape.mul(p.value(), p.value()).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert!(matches!(
            adam.step(&mut [&mut p], &grads),
            Err(Error::NonFinite(_))
        ));
    }
}
