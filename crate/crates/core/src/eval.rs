//! Retrieval ranking metrics and semantic-textual-similarity scoring.
//!
//! Ranks are pessimistic: a candidate tied with the gold item counts as
//! ranked above it. When a query has several gold items, the best ranked one
//! counts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Split, StsPair};
use crate::error::{Error, Result};
use crate::model::JointEncoder;
use crate::similarity::{asym_similarity, similarity, sym_similarity, SimilarityMode};
use crate::tensor::Tensor;

/// Pessimistic rank of the best gold column for every query row.
pub fn gold_ranks(scores: &Tensor<f64>, gold: &[Vec<usize>]) -> Result<Vec<usize>> {
    if gold.len() != scores.rows() {
        return Err(Error::Eval(format!(
            "{} gold sets for {} queries",
            gold.len(),
            scores.rows()
        )));
    }
    let n = scores.cols();
    gold.iter()
        .enumerate()
        .map(|(q, golds)| {
            if golds.is_empty() {
                return Err(Error::Eval(format!("query {q} has no gold item")));
            }
            let row = scores.row(q);
            golds
                .iter()
                .map(|&g| {
                    if g >= n {
                        return Err(Error::Eval(format!(
                            "gold column {g} outside {n} candidates"
                        )));
                    }
                    let target = row[g];
                    Ok(1 + row
                        .iter()
                        .enumerate()
                        .filter(|&(c, &s)| c != g && s >= target)
                        .count())
                })
                .try_fold(usize::MAX, |best, r| r.map(|r| best.min(r)))
        })
        .collect()
}

/// Percentage of ranks `≤ k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Eval("recall of an empty rank list".into()));
    }
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    Ok(100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Eval("median of an empty rank list".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mr: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            mr: median_rank(ranks)?,
        })
    }

    pub fn recall_sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageRanking {
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
}

/// Per-language retrieval metrics, keyed by language tag.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankingReport {
    pub languages: BTreeMap<String, LanguageRanking>,
}

impl RankingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per language.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} | {:>25} | {:>25}\n",
            "", "Text to Image", "Image to Text"
        ));
        out.push_str(&format!(
            "{:<10} | {:>5} {:>5} {:>5} {:>6} | {:>5} {:>5} {:>5} {:>6}\n",
            "Language", "R@1", "R@5", "R@10", "Mr", "R@1", "R@5", "R@10", "Mr"
        ));
        out.push_str(&format!("{}\n", "-".repeat(66)));
        for (lang, r) in &self.languages {
            let (t, i) = (r.text_to_image, r.image_to_text);
            out.push_str(&format!(
                "{:<10} | {:>5.1} {:>5.1} {:>5.1} {:>6.1} | {:>5.1} {:>5.1} {:>5.1} {:>6.1}\n",
                lang, t.r1, t.r5, t.r10, t.mr, i.r1, i.r5, i.r10, i.mr
            ));
        }
        out
    }
}

/// Σ over languages and both directions of R@1 + R@5 + R@10. Higher is better.
pub fn early_stop_metric(report: &RankingReport) -> f64 {
    report
        .languages
        .values()
        .map(|l| l.text_to_image.recall_sum() + l.image_to_text.recall_sum())
        .sum()
}

/// Embeddings of every image and caption of a split.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub images: Tensor<f64>,
    /// Per language: caption embeddings and the image row of each caption.
    pub captions: Vec<(Tensor<f64>, Vec<usize>)>,
}

fn to_matrix(rows: Vec<Vec<f32>>) -> Result<Tensor<f64>> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let data: Vec<f64> = rows.iter().flatten().map(|&v| v as f64).collect();
    Ok(Tensor::new(vec![rows.len(), dim], data)?)
}

pub fn embed_split<M: JointEncoder>(model: &M, split: &Split) -> Result<SplitEmbeddings> {
    let feats = split.features();
    if feats.dim() != model.d_img() {
        return Err(Error::Eval(format!(
            "features have dim {}, model expects {}",
            feats.dim(),
            model.d_img()
        )));
    }
    if split.languages().len() != model.language_count() {
        return Err(Error::Eval(format!(
            "split has {} languages, model has {}",
            split.languages().len(),
            model.language_count()
        )));
    }
    if feats.is_empty() {
        return Err(Error::Eval("split has no images".into()));
    }
    let images: Vec<Vec<f32>> = (0..feats.len())
        .into_par_iter()
        .map(|i| model.embed_image(feats.row(i)))
        .collect::<Result<_>>()?;
    let mut captions = Vec::new();
    for k in 0..split.languages().len() {
        let caps = split.captions_in(k);
        if caps.is_empty() {
            return Err(Error::Eval(format!(
                "split has no {} captions",
                split.languages()[k]
            )));
        }
        let emb: Vec<Vec<f32>> = caps
            .par_iter()
            .map(|(_, r)| model.embed_caption(k, &r.tokens))
            .collect::<Result<_>>()?;
        captions.push((to_matrix(emb)?, caps.iter().map(|(row, _)| *row).collect()));
    }
    Ok(SplitEmbeddings {
        images: to_matrix(images)?,
        captions,
    })
}

/// `S(caption, image)` for every caption row and image row.
fn caption_image_scores(
    caps: &Tensor<f64>,
    images: &Tensor<f64>,
    mode: SimilarityMode,
) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = (0..caps.rows())
        .into_par_iter()
        .map(|c| {
            (0..images.rows())
                .map(|i| similarity(caps.row(c), images.row(i), mode))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

fn transpose(m: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (m.rows(), m.cols());
    let data = (0..c)
        .flat_map(|j| (0..r).map(move |i| m.get(i, j)))
        .collect();
    Tensor::new(vec![c, r], data).expect("shape")
}

/// Ranking metrics from precomputed embeddings.
pub fn ranking_from_embeddings(
    emb: &SplitEmbeddings,
    languages: &[String],
    mode: SimilarityMode,
) -> Result<RankingReport> {
    let mut report = RankingReport::default();
    for (k, (caps, owners)) in emb.captions.iter().enumerate() {
        let scores = caption_image_scores(caps, &emb.images, mode)?;
        let t2i_gold: Vec<Vec<usize>> = owners.iter().map(|&o| vec![o]).collect();
        let t2i = gold_ranks(&scores, &t2i_gold)?;

        let mut i2t_gold = vec![Vec::new(); emb.images.rows()];
        for (c, &o) in owners.iter().enumerate() {
            i2t_gold[o].push(c);
        }
        let with_captions: Vec<usize> = (0..i2t_gold.len())
            .filter(|&i| !i2t_gold[i].is_empty())
            .collect();
        let by_image = transpose(&scores);
        let queries: Vec<Vec<f64>> = with_captions
            .iter()
            .map(|&i| by_image.row(i).to_vec())
            .collect();
        let golds: Vec<Vec<usize>> = with_captions.iter().map(|&i| i2t_gold[i].clone()).collect();
        let i2t = gold_ranks(&Tensor::from_rows(&queries)?, &golds)?;

        report.languages.insert(
            languages[k].clone(),
            LanguageRanking {
                text_to_image: DirectionMetrics::from_ranks(&t2i)?,
                image_to_text: DirectionMetrics::from_ranks(&i2t)?,
            },
        );
    }
    Ok(report)
}

/// Text→image and image→text retrieval over all images and captions of a split.
pub fn rank_evaluation<M: JointEncoder>(model: &M, split: &Split) -> Result<RankingReport> {
    let emb = embed_split(model, split)?;
    ranking_from_embeddings(&emb, split.languages(), model.mode())
}

/// Caption→caption retrieval across languages: every `from` caption queries all
/// `to` captions, gold being the captions of the same image. Pairs are scored
/// with the lower-indexed language in the general (first) role.
pub fn cross_language_from_embeddings(
    emb: &SplitEmbeddings,
    from: usize,
    to: usize,
    mode: SimilarityMode,
) -> Result<DirectionMetrics> {
    if from == to || from >= emb.captions.len() || to >= emb.captions.len() {
        return Err(Error::Eval(format!("invalid language pair {from} -> {to}")));
    }
    let (q, q_owner) = &emb.captions[from];
    let (c, c_owner) = &emb.captions[to];
    let mut scores = Vec::with_capacity(q.rows());
    let mut golds = Vec::new();
    let mut rows = Vec::new();
    for (i, &owner) in q_owner.iter().enumerate() {
        let gold: Vec<usize> = (0..c.rows()).filter(|&j| c_owner[j] == owner).collect();
        if gold.is_empty() {
            continue;
        }
        let row: Vec<f64> = (0..c.rows())
            .map(|j| {
                if from < to {
                    similarity(q.row(i), c.row(j), mode)
                } else {
                    similarity(c.row(j), q.row(i), mode)
                }
            })
            .collect::<Result<_>>()?;
        scores.push(row);
        golds.push(gold);
        rows.push(i);
    }
    if scores.is_empty() {
        return Err(Error::Eval(
            "no caption has a counterpart in the other language".into(),
        ));
    }
    DirectionMetrics::from_ranks(&gold_ranks(&Tensor::from_rows(&scores)?, &golds)?)
}

pub fn cross_language_ranking<M: JointEncoder>(
    model: &M,
    split: &Split,
    from: usize,
    to: usize,
) -> Result<DirectionMetrics> {
    let emb = embed_split(model, split)?;
    cross_language_from_embeddings(&emb, from, to, model.mode())
}

/// Pearson correlation; an error when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Eval(format!(
            "pearson needs equal non-empty inputs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Eval("undefined correlation: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsReport {
    pub pearson_r: f64,
    pub n_pairs: usize,
    pub predictions: Vec<f64>,
}

/// Scores each pair with the model's similarity and correlates with gold.
/// Asymmetric scores are averaged over both argument orders.
pub fn sts_evaluate<M: JointEncoder>(
    model: &M,
    language: usize,
    pairs: &[StsPair],
) -> Result<StsReport> {
    if pairs.is_empty() {
        return Err(Error::Eval("no sentence pairs".into()));
    }
    if language >= model.language_count() {
        return Err(Error::Eval(format!("model has no language {language}")));
    }
    let predictions: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let a: Vec<f64> = model
                .embed_caption(language, &p.first)?
                .iter()
                .map(|&v| v as f64)
                .collect();
            let b: Vec<f64> = model
                .embed_caption(language, &p.second)?
                .iter()
                .map(|&v| v as f64)
                .collect();
            match model.mode() {
                SimilarityMode::Symmetric => sym_similarity(&a, &b),
                SimilarityMode::Asymmetric => {
                    Ok((asym_similarity(&a, &b)? + asym_similarity(&b, &a)?) / 2.0)
                }
            }
        })
        .collect::<Result<_>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let pearson_r = pearson(&predictions, &gold)?;
    Ok(StsReport {
        pearson_r,
        n_pairs: pairs.len(),
        predictions,
    })
}
