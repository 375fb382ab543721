//! Scoring functions between embeddings: cosine (symmetric) and the
//! order-violation score (asymmetric).
//!
//! In the asymmetric score the first argument is the *general* item and the
//! second the *specific* one. Descriptions are general and images specific,
//! so a caption/image pair is always scored as `asym_similarity(caption, image)`.
//! For caption/caption pairs the first language takes the general role.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    Symmetric,
    Asymmetric,
}

fn check_dims<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Cosine similarity; defined as 0 when either vector is zero.
pub fn sym_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    check_dims(a, b)?;
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return Ok(T::zero());
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// `−‖max(0, general − specific)‖²`. Zero exactly when `general ≤ specific` componentwise.
pub fn asym_similarity<T: Real>(general: &[T], specific: &[T]) -> Result<T> {
    check_dims(general, specific)?;
    let mut acc = T::zero();
    for (&g, &s) in general.iter().zip(specific) {
        let d = g - s;
        if d > T::zero() {
            acc = acc + d * d;
        }
    }
    Ok(-acc)
}

pub fn similarity<T: Real>(a: &[T], b: &[T], mode: SimilarityMode) -> Result<T> {
    match mode {
        SimilarityMode::Symmetric => sym_similarity(a, b),
        SimilarityMode::Asymmetric => asym_similarity(a, b),
    }
}

/// All pairwise scores: entry `(p, q)` is `similarity(a[p], b[q])`.
pub fn score_matrix<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: SimilarityMode,
) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Eval(format!(
            "dimension mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for p in 0..m {
        for q in 0..n {
            out.push(similarity(a.row(p), b.row(q), mode)?);
        }
    }
    Ok(Tensor::new(vec![m, n], out)?)
}

/// Records the scores of selected row pairs as a `K × 1` column on the tape.
/// `pairs[k] = (p, q)` scores row `p` of `a` against row `q` of `b`.
pub fn score_pairs_node(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    pairs: &[(usize, usize)],
    mode: SimilarityMode,
) -> Result<NodeId> {
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let node = match mode {
        SimilarityMode::Symmetric => {
            let an = tape.normalize_rows(a)?;
            let bn = tape.normalize_rows(b)?;
            let ga = tape.gather_rows(an, left)?;
            let gb = tape.gather_rows(bn, right)?;
            let prod = tape.mul(ga, gb)?;
            tape.row_sums(prod)?
        }
        SimilarityMode::Asymmetric => {
            let ga = tape.gather_rows(a, left)?;
            let gb = tape.gather_rows(b, right)?;
            let diff = tape.sub(ga, gb)?;
            let viol = tape.relu(diff)?;
            let sq = tape.mul(viol, viol)?;
            let sums = tape.row_sums(sq)?;
            tape.scale(sums, -1.0)?
        }
    };
    Ok(node)
}
