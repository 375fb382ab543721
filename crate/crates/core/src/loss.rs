//! In-batch contrastive hinge losses.
//!
//! For a square score matrix `M` whose diagonal holds the gold pairs, the
//! ranking term is
//!
//! ```text
//! Σ_j Σ_{j'≠j} max(0, α − M[j,j] + M[j',j]) + max(0, α − M[j,j] + M[j,j'])
//! ```
//!
//! The pivot loss applies it to `M_k = S(captions_k, images)` for every
//! language `k`; the parallel loss adds it once more for
//! `C = S(captions_1, captions_2)`. Terms are summed, never averaged.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::similarity::{score_matrix, score_pairs_node, SimilarityMode};
use crate::tensor::{Real, Tensor};

/// Embeddings of one batch; row `j` of every tensor belongs to the same image.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings<T> {
    pub img: Tensor<T>,
    pub cap: Vec<Tensor<T>>,
    pub mode: SimilarityMode,
    pub margin: f64,
}

impl<T: Real> BatchEmbeddings<T> {
    fn batch_size(&self) -> Result<usize> {
        let b = self.img.rows();
        if self.img.shape().len() != 2 || b < 2 {
            return Err(Error::Train(format!("batch of {b} rows has no negatives")));
        }
        if self.cap.is_empty() {
            return Err(Error::Train("no caption embeddings".into()));
        }
        if let Some(c) = self
            .cap
            .iter()
            .find(|c| c.rows() != b || c.cols() != self.img.cols())
        {
            return Err(Error::Train(format!(
                "caption block {:?} does not match images {:?}",
                c.shape(),
                self.img.shape()
            )));
        }
        Ok(b)
    }
}

/// Sum of all hinge terms of a square score matrix with gold pairs on the diagonal.
pub fn ranking_hinge<T: Real>(scores: &Tensor<T>, margin: f64) -> Result<T> {
    let b = scores.rows();
    if scores.shape().len() != 2 || scores.cols() != b {
        return Err(Error::Train(format!(
            "score matrix {:?} is not square",
            scores.shape()
        )));
    }
    let alpha = T::of_f64(margin);
    let hinge = |v: T| if v > T::zero() { v } else { T::zero() };
    let mut total = T::zero();
    for j in 0..b {
        let gold = scores.get(j, j);
        for jn in (0..b).filter(|&jn| jn != j) {
            total = total + hinge(alpha - gold + scores.get(jn, j));
            total = total + hinge(alpha - gold + scores.get(j, jn));
        }
    }
    Ok(total)
}

pub fn pivot_loss<T: Real>(e: &BatchEmbeddings<T>) -> Result<T> {
    e.batch_size()?;
    let mut total = T::zero();
    for cap in &e.cap {
        total = total + ranking_hinge(&score_matrix(cap, &e.img, e.mode)?, e.margin)?;
    }
    Ok(total)
}

pub fn parallel_loss<T: Real>(e: &BatchEmbeddings<T>) -> Result<T> {
    e.batch_size()?;
    if e.cap.len() != 2 {
        return Err(Error::Train(format!(
            "parallel loss needs two languages, got {}",
            e.cap.len()
        )));
    }
    let cross = ranking_hinge(&score_matrix(&e.cap[0], &e.cap[1], e.mode)?, e.margin)?;
    Ok(pivot_loss(e)? + cross)
}

/// Records the ranking term for `M[p, q] = S(a[p], b[q])` on the tape.
pub fn ranking_hinge_node(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    mode: SimilarityMode,
    margin: f64,
) -> Result<NodeId> {
    let n = tape.shape(a)[0];
    if n < 2 || tape.shape(b)[0] != n {
        return Err(Error::Train(format!(
            "ranking term needs matching batches of at least 2 rows, got {n}"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|p| (0..n).map(move |q| (p, q))).collect();
    let flat = |p: usize, q: usize| p * n + q;
    let mut gold = Vec::with_capacity(2 * n * (n - 1));
    let mut negative = Vec::with_capacity(2 * n * (n - 1));
    for j in 0..n {
        for jn in (0..n).filter(|&jn| jn != j) {
            gold.push(flat(j, j));
            negative.push(flat(jn, j));
            gold.push(flat(j, j));
            negative.push(flat(j, jn));
        }
    }
    let scores = score_pairs_node(tape, a, b, &pairs, mode)?;
    let g = tape.gather_rows(scores, gold)?;
    let ng = tape.gather_rows(scores, negative)?;
    let diff = tape.sub(ng, g)?;
    let alpha = tape.constant(&Tensor::<f64>::vector(vec![margin]));
    let shifted = tape.add_row(diff, alpha)?;
    let hinges = tape.relu(shifted)?;
    Ok(tape.sum(hinges)?)
}

pub fn pivot_loss_node(
    tape: &mut Tape,
    img: NodeId,
    caps: &[NodeId],
    mode: SimilarityMode,
    margin: f64,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &cap in caps {
        let term = ranking_hinge_node(tape, cap, img, mode, margin)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Train("no caption embeddings".into()))
}

pub fn parallel_loss_node(
    tape: &mut Tape,
    img: NodeId,
    caps: &[NodeId],
    mode: SimilarityMode,
    margin: f64,
) -> Result<NodeId> {
    if caps.len() != 2 {
        return Err(Error::Train(format!(
            "parallel loss needs two languages, got {}",
            caps.len()
        )));
    }
    let pivot = pivot_loss_node(tape, img, caps, mode, margin)?;
    let cross = ranking_hinge_node(tape, caps[0], caps[1], mode, margin)?;
    Ok(tape.add(pivot, cross)?)
}
