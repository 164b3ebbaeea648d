//! Anchor-based NT-Xent loss.
//!
//! For a crop embedding `z_i` with positive cell `z_j`, batch of `2N`
//! embeddings and anchor set `A` (same-image pyramid cells away from the
//! crop), the per-pair loss is
//!
//! ```text
//! AN      = sum_{a in A} exp(sim(z_i, z_a) / tau)
//! l_{i,j} = -log( exp(sim(z_i, z_j)/tau)
//!                 / ( sum_{k != i} exp(sim(z_i, z_k)/tau) + AN ) )
//! ```
//!
//! The denominator sum runs over the batch (including `k = j`), so the loss
//! is non-negative and exactly zero for the degenerate `N = 1`, no-anchor
//! case. Evaluation is log-sum-exp stabilized by subtracting the max logit,
//! which leaves both value and gradient unchanged.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imops::RectN;
use crate::ndgrad::rng::stream_rng;
use crate::ndgrad::{Scalar, Tape, Tensor};
use crate::net::{Embedding, PyramidEmbeddings};

/// Temperature and batch geometry for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub batch_size: usize,
    /// Optional cap M on anchors per sample (uniform seeded subsample).
    pub anchors_per_sample: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            batch_size: 8,
            anchors_per_sample: Some(64),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Data(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Data("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The anchor-negative set A: same-grid cells away from the crop, with their
/// `(level, row, col)` provenance. May legitimately be empty (level 4 has a
/// single cell).
#[derive(Debug, Clone)]
pub struct AnchorSet<T> {
    tensor: Option<Tensor<T>>,
    provenance: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn empty() -> Self {
        AnchorSet {
            tensor: None,
            provenance: Vec::new(),
        }
    }

    /// Wraps a `[K, D]` tensor of unit-norm anchor rows (typically a taped
    /// row selection from a pyramid grid).
    pub fn from_rows(tensor: Tensor<T>, provenance: Vec<(usize, usize, usize)>) -> Result<Self> {
        if tensor.shape().len() != 2 || tensor.shape()[0] != provenance.len() {
            return Err(Error::ShapeMismatch {
                op: "anchor_set",
                detail: format!(
                    "rows {:?} vs {} provenance entries",
                    tensor.shape(),
                    provenance.len()
                ),
            });
        }
        Ok(AnchorSet {
            tensor: Some(tensor),
            provenance,
        })
    }

    /// Builds a constant anchor set from standalone embeddings (tests,
    /// scalar oracles). Not connected to any tape.
    pub fn from_embeddings(embs: &[Embedding<T>], provenance: Vec<(usize, usize, usize)>) -> Result<Self> {
        if embs.is_empty() {
            return Ok(Self::empty());
        }
        let d = embs[0].dim();
        let mut data = Vec::with_capacity(embs.len() * d);
        for e in embs {
            if e.dim() != d {
                return Err(Error::ShapeMismatch {
                    op: "anchor_set",
                    detail: format!("mixed dims {d} and {}", e.dim()),
                });
            }
            data.extend_from_slice(e.data());
        }
        Self::from_rows(Tensor::new(&[embs.len(), d], data)?, provenance)
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn tensor(&self) -> Option<&Tensor<T>> {
        self.tensor.as_ref()
    }

    pub fn provenance(&self) -> &[(usize, usize, usize)] {
        &self.provenance
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        let d = self
            .tensor
            .as_ref()
            .map(|t| t.shape()[1])
            .unwrap_or(1);
        self.tensor
            .iter()
            .flat_map(move |t| t.data().chunks_exact(d))
    }
}

fn check_unit<T: Scalar>(what: &str, data: &[T]) -> Result<()> {
    let norm: f64 = data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::DegenerateEmbedding(format!(
            "{what} has norm {norm}, expected 1 within 1e-4"
        )));
    }
    Ok(())
}

/// Cosine similarity of two unit-norm embeddings: their dot product.
pub fn cosine_sim<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            detail: format!("dims {} vs {}", a.dim(), b.dim()),
        });
    }
    check_unit("left embedding", a.data())?;
    check_unit("right embedding", b.data())?;
    Ok(dot_f64(a.data(), b.data()))
}

fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

/// The anchor-negative term `AN = sum_a exp(sim(z_i, z_a) / tau)`.
/// Zero iff the anchor set is empty; invariant under anchor order.
pub fn anchor_negative_term<T: Scalar>(
    z_i: &Embedding<T>,
    anchors: &AnchorSet<T>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Data(format!("tau must be positive, got {tau}")));
    }
    let mut acc = 0.0;
    for row in anchors.iter_rows() {
        acc += (dot_f64(z_i.data(), row) / tau).exp();
    }
    Ok(acc)
}

/// Core taped loss: `query` is the `[1, D]` crop row, `batch_all` the
/// `[R, D]` batch embeddings with the query at row `i_idx` and its positive
/// at row `j_idx`.
fn loss_from_parts<T: Scalar>(
    tape: &mut Tape<T>,
    query: &Tensor<T>,
    batch_all: &Tensor<T>,
    i_idx: usize,
    j_idx: usize,
    anchors: &AnchorSet<T>,
    tau: f64,
) -> Result<Tensor<T>> {
    if i_idx == j_idx {
        return Err(Error::Data(
            "positive index coincides with the query index".into(),
        ));
    }
    let r = batch_all.shape()[0];
    let neg_idx: Vec<usize> = (0..r).filter(|&k| k != i_idx).collect();
    let mut negs = tape.select_rows(batch_all, &neg_idx)?;
    if let Some(a) = anchors.tensor() {
        negs = tape.concat_rows(&negs, a)?;
    }
    let inv_tau = T::from_f64(1.0 / tau);

    let logits = tape.matmul_nt(query, &negs)?;
    let logits = tape.scalar_mul(&logits, inv_tau);
    let pos = tape.select_rows(batch_all, &[j_idx])?;
    let pos_logit = tape.matmul_nt(query, &pos)?;
    let pos_logit = tape.scalar_mul(&pos_logit, inv_tau);

    // Log-sum-exp with a detached max shift: value and gradient are exact.
    let m = logits
        .data()
        .iter()
        .cloned()
        .fold(T::neg_infinity(), T::max);
    let shifted = tape.add_scalar(&logits, -m);
    let e = tape.exp(&shifted);
    let total = tape.sum(&e);
    let lse = tape.log(&total)?;
    let lse = tape.add_scalar(&lse, m);

    let pos_flat = tape.sum(&pos_logit);
    let neg_pos = tape.scalar_mul(&pos_flat, -T::one());
    tape.add(&lse, &neg_pos)
}

/// Per-pair loss `l_{i,j}`. `batch` must contain `z_i` and `z_j` (by tensor
/// identity); the `k != i` exclusion removes `z_i`'s first occurrence.
pub fn ant_xent_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z_i: &Embedding<T>,
    z_j: &Embedding<T>,
    batch: &[Embedding<T>],
    anchors: &AnchorSet<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let i_idx = batch
        .iter()
        .position(|e| e.tensor().id() == z_i.tensor().id())
        .ok_or_else(|| Error::Data("z_i missing from batch".into()))?;
    let j_idx = batch
        .iter()
        .position(|e| e.tensor().id() == z_j.tensor().id())
        .ok_or_else(|| Error::Data("z_j missing from batch".into()))?;

    let mut batch_all = batch[0].tensor().clone();
    for e in &batch[1..] {
        batch_all = tape.concat_rows(&batch_all, e.tensor())?;
    }
    loss_from_parts(tape, z_i.tensor(), &batch_all, i_idx, j_idx, anchors, cfg.tau)
}

/// One training sample: crop embedding, its positive cell, and the anchor
/// negatives drawn from the same grid.
pub struct LossSample<T> {
    pub z_i: Embedding<T>,
    pub z_j: Embedding<T>,
    pub anchors: AnchorSet<T>,
}

/// Mean of per-sample losses. Batch negatives for sample `i` are the `z_i`
/// and `z_j` embeddings of all samples (rows `0..N` then `N..2N`).
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[LossSample<T>],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("batch_loss on an empty batch".into()));
    }
    let n = samples.len();
    let mut batch_all = samples[0].z_i.tensor().clone();
    for s in &samples[1..] {
        batch_all = tape.concat_rows(&batch_all, s.z_i.tensor())?;
    }
    for s in samples {
        batch_all = tape.concat_rows(&batch_all, s.z_j.tensor())?;
    }

    let mut total: Option<Tensor<T>> = None;
    for (s, sample) in samples.iter().enumerate() {
        let l = loss_from_parts(
            tape,
            sample.z_i.tensor(),
            &batch_all,
            s,
            n + s,
            &sample.anchors,
            cfg.tau,
        )?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(&t, &l)?,
        });
    }
    Ok(tape.scalar_mul(&total.expect("non-empty"), T::from_f64(1.0 / n as f64)))
}

/// Positive cell and anchor set for a crop at one pyramid level.
///
/// The positive is the cell whose center is nearest the crop center (ties
/// toward the lowest row-major index). Anchors are all other cells of the
/// grid whose centers lie outside the crop rectangle, optionally capped at
/// `cap` by a seeded uniform subsample. `crop` is in normalized coordinates
/// of the encoded frame.
pub fn select_positive_and_anchors<T: Scalar>(
    tape: &mut Tape<T>,
    pyr: &PyramidEmbeddings<T>,
    crop: RectN,
    level: usize,
    cap: Option<usize>,
    seed: u64,
) -> Result<(Embedding<T>, AnchorSet<T>)> {
    if level >= pyr.grids.len() {
        return Err(Error::Data(format!(
            "level {level} out of range (pyramid has {})",
            pyr.grids.len()
        )));
    }
    let grid = pyr.level(level);
    let (cx, cy) = crop.center();

    let mut best = (f64::INFINITY, 0usize, 0usize);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (px, py) = grid.cell_center(r, c);
            let d2 = (px - cx).powi(2) + (py - cy).powi(2);
            if d2 < best.0 {
                best = (d2, r, c);
            }
        }
    }
    let (_, pr, pc) = best;
    let positive = grid.cell_embedding(tape, pr, pc)?;

    let mut candidates: Vec<usize> = Vec::new();
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if r == pr && c == pc {
                continue;
            }
            let (px, py) = grid.cell_center(r, c);
            if crop.contains(px, py) {
                continue;
            }
            candidates.push(grid.cell_index(r, c));
            coords.push((level, r, c));
        }
    }

    if let Some(m) = cap {
        if candidates.len() > m {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            let mut rng = stream_rng(seed, 0x616e_6368);
            for i in 0..m {
                let j = rng.gen_range(i..order.len());
                order.swap(i, j);
            }
            order.truncate(m);
            order.sort_unstable();
            candidates = order.iter().map(|&i| candidates[i]).collect();
            coords = order.iter().map(|&i| coords[i]).collect();
        }
    }

    let anchors = if candidates.is_empty() {
        AnchorSet::empty()
    } else {
        let rows = tape.select_rows(grid.tensor(), &candidates)?;
        AnchorSet::from_rows(rows, coords)?
    };
    Ok((positive, anchors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::rng::stream_rng;
    use rand::Rng;

    fn unit<T: Scalar>(data: &[f64]) -> Embedding<T> {
        let v: Vec<T> = data.iter().map(|&x| T::from_f64(x)).collect();
        Embedding::from_unnormalized(&v).unwrap()
    }

    fn random_unit(dim: usize, rng: &mut impl Rng) -> Embedding<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
                return Embedding::from_unnormalized(&v).unwrap();
            }
        }
    }

    #[test]
    fn cosine_sim_trivials() {
        let v = unit::<f64>(&[1.0, 2.0, -0.5]);
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-12);

        let e1 = unit::<f64>(&[1.0, 0.0]);
        let e2 = unit::<f64>(&[0.0, 1.0]);
        assert!(cosine_sim(&e1, &e2).unwrap().abs() < 1e-12);

        let neg = unit::<f64>(&[-1.0, -2.0, 0.5]);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let bad = Embedding::from_row(Tensor::new(&[1, 2], vec![0.9, 0.0]).unwrap());
        assert!(matches!(bad, Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn anchor_negative_term_empty_is_zero() {
        let z = unit::<f64>(&[0.3, -0.7, 0.2]);
        let an = anchor_negative_term(&z, &AnchorSet::empty(), 0.5).unwrap();
        assert_eq!(an, 0.0);
    }

    #[test]
    fn anchor_negative_term_orthogonal_anchor() {
        let z = unit::<f64>(&[1.0, 0.0]);
        let a = unit::<f64>(&[0.0, 1.0]);
        let set = AnchorSet::from_embeddings(&[a], vec![(0, 0, 0)]).unwrap();
        let an = anchor_negative_term(&z, &set, 1.0).unwrap();
        assert!((an - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_negative_term_matches_scalar_sum() {
        let mut rng = stream_rng(3, 0);
        let z = random_unit(8, &mut rng);
        let anchors: Vec<Embedding<f64>> = (0..3).map(|_| random_unit(8, &mut rng)).collect();
        let set = AnchorSet::from_embeddings(
            &anchors,
            vec![(0, 0, 0), (0, 0, 1), (0, 0, 2)],
        )
        .unwrap();
        let tau = 0.5;
        let got = anchor_negative_term(&z, &set, tau).unwrap();
        let mut expect = 0.0;
        for a in &anchors {
            let dot: f64 = z.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
            expect += (dot / tau).exp();
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn anchor_negative_term_is_permutation_invariant() {
        let mut rng = stream_rng(5, 1);
        let z = random_unit(6, &mut rng);
        let anchors: Vec<Embedding<f64>> = (0..7).map(|_| random_unit(6, &mut rng)).collect();
        let prov: Vec<(usize, usize, usize)> = (0..7).map(|i| (0, 0, i)).collect();
        let fwd = AnchorSet::from_embeddings(&anchors, prov.clone()).unwrap();
        let mut rev_embs = anchors.clone();
        rev_embs.reverse();
        let rev = AnchorSet::from_embeddings(&rev_embs, prov).unwrap();
        let a = anchor_negative_term(&z, &fwd, 0.3).unwrap();
        let b = anchor_negative_term(&z, &rev, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_loss_is_exactly_zero() {
        // N = 1, no anchors: the only denominator term is the numerator.
        let mut rng = stream_rng(9, 2);
        for trial in 0..16 {
            let z_i = random_unit(5, &mut rng);
            let z_j = random_unit(5, &mut rng);
            let tau = rng.gen_range(0.05..2.0);
            let mut tape = Tape::new();
            let cfg = LossConfig {
                tau,
                batch_size: 1,
                anchors_per_sample: None,
            };
            let loss = ant_xent_loss(
                &mut tape,
                &z_i,
                &z_j,
                &[z_i.clone(), z_j.clone()],
                &AnchorSet::empty(),
                &cfg,
            )
            .unwrap();
            assert_eq!(loss.item(), 0.0, "trial {trial}: loss must be exactly 0");
        }
    }

    #[test]
    fn matched_anchor_doubles_denominator_to_log2() {
        // One anchor with sim(z_i, z_a) == sim(z_i, z_j) doubles the
        // denominator: loss = log 2.
        let z_i = unit::<f64>(&[1.0, 0.0, 0.0]);
        let z_j = unit::<f64>(&[0.0, 1.0, 0.0]);
        // Same similarity to z_i as z_j has (both orthogonal).
        let z_a = unit::<f64>(&[0.0, 0.0, 1.0]);
        let set = AnchorSet::from_embeddings(&[z_a], vec![(0, 3, 3)]).unwrap();
        let mut tape = Tape::new();
        let cfg = LossConfig {
            tau: 0.7,
            batch_size: 1,
            anchors_per_sample: None,
        };
        let loss = ant_xent_loss(
            &mut tape,
            &z_i,
            &z_j,
            &[z_i.clone(), z_j.clone()],
            &set,
            &cfg,
        )
        .unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn missing_membership_is_an_error() {
        let z_i = unit::<f64>(&[1.0, 0.0]);
        let z_j = unit::<f64>(&[0.0, 1.0]);
        let other = unit::<f64>(&[1.0, 1.0]);
        let mut tape = Tape::new();
        let cfg = LossConfig::default();
        let err = ant_xent_loss(
            &mut tape,
            &z_i,
            &z_j,
            &[z_i.clone(), other],
            &AnchorSet::empty(),
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("z_j missing"));
    }

    #[test]
    fn single_sample_batch_loss_reduces_to_ant_xent() {
        let mut rng = stream_rng(21, 0);
        let z_i = random_unit(8, &mut rng);
        let z_j = random_unit(8, &mut rng);
        let anchors = AnchorSet::from_embeddings(
            &[random_unit(8, &mut rng), random_unit(8, &mut rng)],
            vec![(1, 0, 0), (1, 0, 1)],
        )
        .unwrap();
        let cfg = LossConfig {
            tau: 0.2,
            batch_size: 1,
            anchors_per_sample: None,
        };

        let direct = {
            let mut tape = Tape::new();
            ant_xent_loss(
                &mut tape,
                &z_i,
                &z_j,
                &[z_i.clone(), z_j.clone()],
                &anchors,
                &cfg,
            )
            .unwrap()
            .item()
        };
        let batched = {
            let mut tape = Tape::new();
            batch_loss(
                &mut tape,
                &[LossSample {
                    z_i: z_i.clone(),
                    z_j: z_j.clone(),
                    anchors: anchors.clone(),
                }],
                &cfg,
            )
            .unwrap()
            .item()
        };
        assert!((direct - batched).abs() < 1e-15);
    }

    #[test]
    fn batch_order_permutation_keeps_mean() {
        let mut rng = stream_rng(33, 0);
        let samples: Vec<LossSample<f64>> = (0..5)
            .map(|_| LossSample {
                z_i: random_unit(6, &mut rng),
                z_j: random_unit(6, &mut rng),
                anchors: AnchorSet::from_embeddings(
                    &[random_unit(6, &mut rng)],
                    vec![(0, 0, 0)],
                )
                .unwrap(),
            })
            .collect();
        let cfg = LossConfig {
            tau: 0.15,
            batch_size: 5,
            anchors_per_sample: None,
        };
        let a = {
            let mut tape = Tape::new();
            batch_loss(&mut tape, &samples, &cfg).unwrap().item()
        };
        let mut reordered: Vec<LossSample<f64>> = Vec::new();
        for i in [3usize, 1, 4, 0, 2] {
            reordered.push(LossSample {
                z_i: samples[i].z_i.clone(),
                z_j: samples[i].z_j.clone(),
                anchors: samples[i].anchors.clone(),
            });
        }
        let b = {
            let mut tape = Tape::new();
            batch_loss(&mut tape, &reordered, &cfg).unwrap().item()
        };
        assert!((a - b).abs() < 1e-10);
    }
}
