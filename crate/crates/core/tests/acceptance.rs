//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pivot_embed::autodiff::{check_gradient, Bindings, NodeId, Tape};
use pivot_embed::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use pivot_embed::cli::{run, Cli, CONFIG_SNAPSHOT, EXIT_OK, REPORT_JSON};
use pivot_embed::config::RunConfig;
use pivot_embed::data::{sample_minibatch, CaptionRecord, FeatureTable, Split};
use pivot_embed::eval::{
    cross_language_ranking, gold_ranks, median_rank, pearson, rank_evaluation, recall_at_k,
    DirectionMetrics, RankingReport,
};
use pivot_embed::loss::{
    parallel_loss, parallel_loss_node, pivot_loss, pivot_loss_node, ranking_hinge, BatchEmbeddings,
};
use pivot_embed::model::{
    encode_images_node, encode_sentences_node, init_params, EmbedConfig, JointEncoder, Model,
    ModelKind, ParamNodes,
};
use pivot_embed::similarity::{score_pairs_node, SimilarityMode};
use pivot_embed::synth::SynthSpec;
use pivot_embed::train::{build_loss_graph, train, TrainOptions};
use pivot_embed::{Error, Result, Tensor};

use common::{small_config, synth_data, write_synth_run};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_EPSILON: f64 = 1e-6;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const LOSS_TOLERANCE: f64 = 1e-6;
const PEARSON_TOLERANCE: f64 = 1e-5;
const E2E_EPOCHS: usize = 200;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const TRAIN_R1_MIN: f64 = 90.0;
const VAL_R1_MIN: f64 = 70.0;
const CROSS_R1_MIN: f64 = 60.0;

const MODES: [SimilarityMode; 2] = [SimilarityMode::Symmetric, SimilarityMode::Asymmetric];

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- gradients

/// Max gradient-check error of `sum(out ⊙ W)` for a fixed random `W`.
fn weighted_check(
    tape: &mut Tape,
    out: NodeId,
    inputs: &HashMap<NodeId, Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let target = if tape.shape(out).is_empty() {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let w = tape.constant(&w);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)?
    };
    Ok(check_gradient(tape, inputs, target, GRADIENT_EPSILON)?)
}

type Builder = fn(&mut Tape, &[NodeId]) -> pivot_embed::autodiff::Result<NodeId>;

fn primitive_cases() -> Vec<(&'static str, Vec<[usize; 2]>, Builder)> {
    vec![
        ("matmul", vec![[4, 8], [8, 3]], |t, x| t.matmul(x[0], x[1])),
        ("matmul_t", vec![[4, 8], [5, 8]], |t, x| {
            t.matmul_t(x[0], x[1])
        }),
        ("add", vec![[4, 8], [4, 8]], |t, x| t.add(x[0], x[1])),
        ("sub", vec![[4, 8], [4, 8]], |t, x| t.sub(x[0], x[1])),
        ("mul", vec![[4, 8], [4, 8]], |t, x| t.mul(x[0], x[1])),
        ("add_row", vec![[4, 8], [1, 8]], |t, x| {
            t.add_row(x[0], x[1])
        }),
        ("sigmoid", vec![[4, 8]], |t, x| t.sigmoid(x[0])),
        ("tanh", vec![[4, 8]], |t, x| t.tanh(x[0])),
        ("relu", vec![[4, 8]], |t, x| t.relu(x[0])),
        ("max_const", vec![[4, 8]], |t, x| t.max_const(x[0], 0.1)),
        ("sum", vec![[4, 8]], |t, x| t.sum(x[0])),
        ("squared_norm", vec![[4, 8]], |t, x| t.squared_norm(x[0])),
        ("normalize_rows", vec![[4, 8]], |t, x| {
            t.normalize_rows(x[0])
        }),
        ("abs", vec![[4, 8]], |t, x| t.abs(x[0])),
        ("gather_rows", vec![[4, 8]], |t, x| {
            t.gather_rows(x[0], vec![3, 0, 3, 1, 2])
        }),
        ("slice_rows", vec![[4, 8]], |t, x| t.slice_rows(x[0], 1, 3)),
        ("slice_cols", vec![[4, 8]], |t, x| t.slice_cols(x[0], 2, 7)),
        ("concat_rows", vec![[4, 8], [2, 8]], |t, x| {
            t.concat(&[x[0], x[1]], 0)
        }),
        ("concat_cols", vec![[4, 8], [4, 3]], |t, x| {
            t.concat(&[x[0], x[1]], 1)
        }),
        ("scale", vec![[4, 8]], |t, x| t.scale(x[0], -2.5)),
        ("row_sums", vec![[4, 8]], |t, x| t.row_sums(x[0])),
    ]
}

fn check_primitives(rng: &mut ChaCha8Rng, worst: &mut Vec<(String, f64)>) -> Result<()> {
    for (name, shapes, build) in primitive_cases() {
        let mut tape = Tape::new();
        let mut inputs = HashMap::new();
        let mut ids = Vec::new();
        for s in &shapes {
            let id = tape.input(s)?;
            inputs.insert(id, random_tensor(rng, s[0], s[1]));
            ids.push(id);
        }
        let out = build(&mut tape, &ids)?;
        worst.push((
            name.to_string(),
            weighted_check(&mut tape, out, &inputs, rng)?,
        ));
    }
    Ok(())
}

fn tiny_model_config(mode: SimilarityMode, kind: ModelKind) -> EmbedConfig {
    EmbedConfig {
        embed_dim: 8,
        word_dim: 5,
        d_img: 6,
        ..EmbedConfig::published_default(mode, kind)
    }
}

/// All parameters of a freshly initialized model, widened to `f64`.
fn widened(
    nodes: &ParamNodes,
    params: &pivot_embed::model::ModelParams,
) -> HashMap<NodeId, Tensor<f64>> {
    nodes
        .order
        .iter()
        .zip(params.named())
        .map(|((_, id), (_, t))| (*id, t.cast::<f64>()))
        .collect()
}

fn check_encoders(rng: &mut ChaCha8Rng, worst: &mut Vec<(String, f64)>) -> Result<()> {
    for mode in MODES {
        let config = tiny_model_config(mode, ModelKind::Pivot);
        let params = init_params(&config, &[9], &mut ChaCha8Rng::seed_from_u64(3))?;
        let sentences = vec![vec![2, 5, 7], vec![4], vec![8, 3, 2, 6, 5], vec![1, 2]];
        let mut tape = Tape::new();
        let nodes = ParamNodes::declare(&mut tape, &params)?;
        let out = encode_sentences_node(&mut tape, &nodes.languages[0], &sentences, mode)?;
        let inputs = widened(&nodes, &params);
        worst.push((
            format!("sentence_encoder/{mode:?}"),
            weighted_check(&mut tape, out, &inputs, rng)?,
        ));

        let mut tape = Tape::new();
        let nodes = ParamNodes::declare(&mut tape, &params)?;
        let feats = tape.input(&[4, config.d_img])?;
        let out = encode_images_node(&mut tape, nodes.w_img, feats, mode)?;
        let mut inputs = widened(&nodes, &params);
        inputs.insert(feats, random_tensor(rng, 4, config.d_img));
        worst.push((
            format!("image_encoder/{mode:?}"),
            weighted_check(&mut tape, out, &inputs, rng)?,
        ));
    }
    Ok(())
}

fn check_similarities(rng: &mut ChaCha8Rng, worst: &mut Vec<(String, f64)>) -> Result<()> {
    for mode in MODES {
        let mut tape = Tape::new();
        let a = tape.input(&[4, 8])?;
        let b = tape.input(&[4, 8])?;
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|p| (0..4).map(move |q| (p, q))).collect();
        let out = score_pairs_node(&mut tape, a, b, &pairs, mode)?;
        let inputs: HashMap<_, _> =
            [(a, random_tensor(rng, 4, 8)), (b, random_tensor(rng, 4, 8))].into();
        worst.push((
            format!("similarity/{mode:?}"),
            weighted_check(&mut tape, out, &inputs, rng)?,
        ));
    }
    Ok(())
}

fn check_losses(rng: &mut ChaCha8Rng, worst: &mut Vec<(String, f64)>) -> Result<()> {
    let data = synth_data(&SynthSpec {
        d_img: 6,
        ..SynthSpec::default()
    });
    for mode in MODES {
        for kind in [ModelKind::Pivot, ModelKind::Parallel] {
            // On free embeddings.
            let mut tape = Tape::new();
            let img = tape.input(&[4, 8])?;
            let caps = [tape.input(&[4, 8])?, tape.input(&[4, 8])?];
            let margin = pivot_embed::model::default_margin(mode);
            let loss = match kind {
                ModelKind::Pivot => pivot_loss_node(&mut tape, img, &caps, mode, margin)?,
                ModelKind::Parallel => parallel_loss_node(&mut tape, img, &caps, mode, margin)?,
            };
            let inputs: HashMap<_, _> = [img, caps[0], caps[1]]
                .iter()
                .map(|&id| (id, random_tensor(rng, 4, 8)))
                .collect();
            worst.push((
                format!("loss/{kind:?}/{mode:?}"),
                check_gradient(&tape, &inputs, loss, GRADIENT_EPSILON)?,
            ));

            // Through both encoders, from parameters to loss.
            let config = tiny_model_config(mode, kind);
            let sizes: Vec<usize> = data.vocabs.iter().map(|v| v.len()).collect();
            let params = init_params(&config, &sizes, &mut ChaCha8Rng::seed_from_u64(5))?;
            let batch = sample_minibatch(
                &data.train,
                &data.vocabs,
                4,
                &mut ChaCha8Rng::seed_from_u64(6),
            )?;
            let graph = build_loss_graph(&config, &params, &batch)?;
            let mut inputs = widened(&graph.params, &params);
            inputs.insert(graph.features, batch.image_rows.cast::<f64>());
            worst.push((
                format!("model_loss/{kind:?}/{mode:?}"),
                check_gradient(&graph.tape, &inputs, graph.loss, GRADIENT_EPSILON)?,
            ));
        }
    }
    Ok(())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Vec::new();
    let run = |rng: &mut ChaCha8Rng, worst: &mut Vec<(String, f64)>| -> Result<()> {
        check_primitives(rng, worst)?;
        check_encoders(rng, worst)?;
        check_similarities(rng, worst)?;
        check_losses(rng, worst)
    };
    run(&mut rng, &mut worst).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (name, max) =
        worst.iter().cloned().fold(
            (String::new(), 0.0),
            |acc, (n, e)| if e > acc.1 { (n, e) } else { acc },
        );
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| e.is_nan() || *e > GRADIENT_TOLERANCE)
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    ensure(
        failing.is_empty(),
        format!("above {GRADIENT_TOLERANCE:e}: {}", failing.join(", ")),
    )?;
    ensure(elapsed < GRADIENT_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {max:.2e} ({name}), {:.1}s",
        worst.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- loss oracle

fn oracle_similarity(a: &[f64], b: &[f64], mode: SimilarityMode) -> f64 {
    match mode {
        SimilarityMode::Symmetric => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        }
        SimilarityMode::Asymmetric => -a
            .iter()
            .zip(b)
            .map(|(g, s)| (g - s).max(0.0).powi(2))
            .sum::<f64>(),
    }
}

/// Triple loop over anchors, negatives and embedding coordinates.
fn oracle_term(a: &Tensor<f64>, b: &Tensor<f64>, mode: SimilarityMode, margin: f64) -> f64 {
    let n = a.rows();
    let s = |p: usize, q: usize| oracle_similarity(a.row(p), b.row(q), mode);
    let mut total = 0.0;
    for j in 0..n {
        for k in 0..n {
            if k != j {
                total += (margin - s(j, j) + s(k, j)).max(0.0);
                total += (margin - s(j, j) + s(j, k)).max(0.0);
            }
        }
    }
    total
}

fn oracle_loss(e: &BatchEmbeddings<f64>, parallel: bool) -> f64 {
    let mut total: f64 = e
        .cap
        .iter()
        .map(|c| oracle_term(c, &e.img, e.mode, e.margin))
        .sum();
    if parallel {
        total += oracle_term(&e.cap[0], &e.cap[1], e.mode, e.margin);
    }
    total
}

fn tape_loss(e: &BatchEmbeddings<f64>, parallel: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let img = tape.input(e.img.shape())?;
    let caps: Vec<NodeId> = e
        .cap
        .iter()
        .map(|c| tape.input(c.shape()))
        .collect::<pivot_embed::autodiff::Result<_>>()?;
    let loss = if parallel {
        parallel_loss_node(&mut tape, img, &caps, e.mode, e.margin)?
    } else {
        pivot_loss_node(&mut tape, img, &caps, e.mode, e.margin)?
    };
    let mut b = Bindings::new();
    b.bind(img, &e.img);
    for (id, c) in caps.iter().zip(&e.cap) {
        b.bind(*id, c);
    }
    Ok(tape.forward(&b)?.value(loss).item())
}

fn loss_oracle_suite() -> Outcome {
    let example =
        Tensor::from_rows(&[vec![0.9, 0.3], vec![0.8, 0.6]]).map_err(|e| e.to_string())?;
    let worked: f64 = ranking_hinge(&example, 0.2).map_err(|e| e.to_string())?;
    ensure(
        (worked - 0.5).abs() <= LOSS_TOLERANCE,
        format!("worked example gives {worked}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let b = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=4);
        let mode = MODES[i % 2];
        let e = BatchEmbeddings {
            img: random_tensor(&mut rng, b, n),
            cap: vec![random_tensor(&mut rng, b, n), random_tensor(&mut rng, b, n)],
            mode,
            margin: rng.gen_range(0.01..0.5),
        };
        for parallel in [false, true] {
            let oracle = oracle_loss(&e, parallel);
            let plain = if parallel {
                parallel_loss(&e)
            } else {
                pivot_loss(&e)
            }
            .map_err(|e| e.to_string())?;
            let taped = tape_loss(&e, parallel).map_err(|e| e.to_string())?;
            for got in [plain, taped] {
                let rel = (got - oracle).abs() / oracle.abs().max(1.0);
                worst = worst.max(rel);
                ensure(
                    rel <= LOSS_TOLERANCE,
                    format!("instance {i} (b={b}, N={n}, {mode:?}, parallel={parallel}): {got} vs oracle {oracle}"),
                )?;
            }
        }
    }
    Ok(format!(
        "worked example 0.5, 100 instances x 2 losses, worst relative error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- margin semantics

fn rows(r: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn margin_semantics() -> Outcome {
    let eye = rows(&[
        &[1., 0., 0., 0.],
        &[0., 1., 0., 0.],
        &[0., 0., 1., 0.],
        &[0., 0., 0., 1.],
    ]);
    let mut checks = Vec::new();
    // Cosine: identity scores dominate by 1 ≥ α = 0.2.
    let sym = BatchEmbeddings {
        img: eye.clone(),
        cap: vec![eye.clone()],
        mode: SimilarityMode::Symmetric,
        margin: 0.2,
    };
    checks.push((
        "cosine, dominant",
        pivot_loss(&sym).map_err(|e| e.to_string())?,
        0.0,
    ));
    // Caption 0 = (0.28, 0.96): S(c0, i0) = 0.28 and S(c0, i1) = 0.96.
    // Violations: α − 0.28 + 0.96 = 0.88 (caption 0) and α − 1 + 0.96 = 0.16 (image 1).
    let cap = rows(&[
        &[0.28, 0.96, 0., 0.],
        &[0., 1., 0., 0.],
        &[0., 0., 1., 0.],
        &[0., 0., 0., 1.],
    ]);
    let sym_bad = BatchEmbeddings {
        cap: vec![cap],
        ..sym
    };
    checks.push((
        "cosine, one weak pair",
        pivot_loss(&sym_bad).map_err(|e| e.to_string())?,
        0.88 + 0.16,
    ));
    // Order violation: identical caption and image give 0, the rest -1; α = 0.05.
    let asym = BatchEmbeddings {
        img: eye.clone(),
        cap: vec![eye.clone()],
        mode: SimilarityMode::Asymmetric,
        margin: 0.05,
    };
    checks.push((
        "order, dominant",
        pivot_loss(&asym).map_err(|e| e.to_string())?,
        0.0,
    ));
    // Image 1 = (0.875, 1, 0, 0): S(c0, i1) = −0.125² = −0.015625, all gold scores stay 0.
    // Both terms pairing caption 0 with image 1 become α − 0.015625.
    let img = rows(&[
        &[1., 0., 0., 0.],
        &[0.875, 1., 0., 0.],
        &[0., 0., 1., 0.],
        &[0., 0., 0., 1.],
    ]);
    let asym_bad = BatchEmbeddings { img, ..asym };
    checks.push((
        "order, one weak pair",
        pivot_loss(&asym_bad).map_err(|e| e.to_string())?,
        2.0 * (0.05 - 0.015625),
    ));
    for (name, got, want) in &checks {
        if *want == 0.0 {
            ensure(*got == 0.0, format!("{name}: {got} instead of exactly 0"))?;
        } else {
            ensure(
                (got - want).abs() <= 1e-12,
                format!("{name}: {got} instead of {want}"),
            )?;
        }
    }
    Ok(checks
        .iter()
        .map(|(n, g, _)| format!("{n} = {g:.6}"))
        .collect::<Vec<_>>()
        .join(", "))
}

// ---------------------------------------------------------------- metric oracles

/// Embeds caption `c<k>` as row `k` of a table and images as their features.
struct TableEncoder {
    captions: Vec<Vec<f32>>,
    dim: usize,
    mode: SimilarityMode,
    languages: usize,
}

impl JointEncoder for TableEncoder {
    fn mode(&self) -> SimilarityMode {
        self.mode
    }
    fn embed_caption(&self, _language: usize, tokens: &[String]) -> Result<Vec<f32>> {
        let k: usize = tokens[0][1..]
            .parse()
            .map_err(|_| Error::Eval("bad token".into()))?;
        Ok(self.captions[k].clone())
    }
    fn embed_image(&self, feature: &[f32]) -> Result<Vec<f32>> {
        Ok(feature.to_vec())
    }
    fn language_count(&self) -> usize {
        self.languages
    }
    fn d_img(&self) -> usize {
        self.dim
    }
}

/// Sort candidates by score, ties placing the target last; 1-based position.
fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == target).cmp(&(b == target)))
    });
    order.iter().position(|&c| c == target).unwrap() + 1
}

fn brute_metrics(ranks: &[usize]) -> DirectionMetrics {
    let n = ranks.len() as f64;
    let within = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 * 100.0 / n;
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let m = s.len();
    let mr = if m % 2 == 1 {
        s[m / 2] as f64
    } else {
        (s[m / 2 - 1] + s[m / 2]) as f64 / 2.0
    };
    DirectionMetrics {
        r1: within(1),
        r5: within(5),
        r10: within(10),
        mr,
    }
}

fn close(a: &DirectionMetrics, b: &DirectionMetrics) -> bool {
    [(a.r1, b.r1), (a.r5, b.r5), (a.r10, b.r10), (a.mr, b.mr)]
        .iter()
        .all(|(x, y)| (x - y).abs() <= 1e-9)
}

fn random_ranking_case(rng: &mut ChaCha8Rng, mode: SimilarityMode) -> (TableEncoder, Split) {
    let n_images = rng.gen_range(2..=20);
    let dim = 3;
    // Coarse values so that ties are common.
    let value = |rng: &mut ChaCha8Rng| (rng.gen_range(0..3) as f32) * 0.5;
    let feats: Vec<f32> = (0..n_images * dim).map(|_| value(rng)).collect();
    let ids: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
    let mut captions = Vec::new();
    let mut table = Vec::new();
    for lang in 0..2 {
        for (i, id) in ids.iter().enumerate() {
            let count = if i == 0 {
                rng.gen_range(1..=3)
            } else {
                rng.gen_range(0..=3)
            };
            for _ in 0..count {
                let tok = format!("c{}", table.len());
                let mut v: Vec<f32> = (0..dim).map(|_| value(rng)).collect();
                if v.iter().all(|&x| x == 0.0) {
                    v[0] = 1.0;
                }
                table.push(v);
                captions.push(CaptionRecord {
                    image_id: id.clone(),
                    language: lang,
                    tokens: vec![tok],
                });
            }
        }
    }
    let features = FeatureTable::new(ids, dim, feats).unwrap();
    let split = Split::new(vec!["en".into(), "de".into()], captions, features).unwrap();
    (
        TableEncoder {
            captions: table,
            dim,
            mode,
            languages: 2,
        },
        split,
    )
}

fn brute_report(enc: &TableEncoder, split: &Split) -> RankingReport {
    let f = split.features();
    let mut report = RankingReport::default();
    for (k, lang) in split.languages().iter().enumerate() {
        let caps = split.captions_in(k);
        let score = |c: &CaptionRecord, i: usize| -> f64 {
            let a: Vec<f64> = enc
                .embed_caption(k, &c.tokens)
                .unwrap()
                .iter()
                .map(|&x| x as f64)
                .collect();
            let b: Vec<f64> = f.row(i).iter().map(|&x| x as f64).collect();
            oracle_similarity(&a, &b, enc.mode)
        };
        let t2i: Vec<usize> = caps
            .iter()
            .map(|(owner, c)| {
                brute_rank(
                    &(0..f.len()).map(|i| score(c, i)).collect::<Vec<_>>(),
                    *owner,
                )
            })
            .collect();
        let mut i2t = Vec::new();
        for i in 0..f.len() {
            let row: Vec<f64> = caps.iter().map(|(_, c)| score(c, i)).collect();
            let golds: Vec<usize> = (0..caps.len()).filter(|&c| caps[c].0 == i).collect();
            if let Some(best) = golds.iter().map(|&g| brute_rank(&row, g)).min() {
                i2t.push(best);
            }
        }
        report.languages.insert(
            lang.clone(),
            pivot_embed::eval::LanguageRanking {
                text_to_image: brute_metrics(&t2i),
                image_to_text: brute_metrics(&i2t),
            },
        );
    }
    report
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn metric_oracle_suite() -> Outcome {
    let err = |e: Error| e.to_string();
    // Fixed examples.
    let ranks = [1, 3, 12, 2, 7];
    let r5 = recall_at_k(&ranks, 5).map_err(err)?;
    let mr = median_rank(&ranks).map_err(err)?;
    ensure(
        r5 == 60.0 && mr == 3.0,
        format!("ranks [1,3,12,2,7]: R@5={r5}, Mr={mr}"),
    )?;
    let r = pearson(&[1., 2., 3.], &[1., 2., 4.]).map_err(err)?;
    ensure(
        (r - 0.98198).abs() <= PEARSON_TOLERANCE,
        format!("pearson example {r}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cases = 0;
    for i in 0..60 {
        let mode = MODES[i % 2];
        let (enc, split) = random_ranking_case(&mut rng, mode);
        let got = rank_evaluation(&enc, &split).map_err(err)?;
        let want = brute_report(&enc, &split);
        for (lang, w) in &want.languages {
            let g = &got.languages[lang];
            ensure(
                close(&g.text_to_image, &w.text_to_image)
                    && close(&g.image_to_text, &w.image_to_text),
                format!(
                    "split {i} ({mode:?}, {} images), {lang}: {g:?} vs {w:?}",
                    split.features().len()
                ),
            )?;
        }
        // Direct rank, recall and median checks on a random score matrix.
        let n = rng.gen_range(1..=20);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0..4) as f64).collect())
            .collect();
        let gold: Vec<Vec<usize>> = (0..n).map(|q| vec![q]).collect();
        let ranks = gold_ranks(
            &Tensor::from_rows(&scores).map_err(|e| e.to_string())?,
            &gold,
        )
        .map_err(err)?;
        let brute: Vec<usize> = (0..n).map(|q| brute_rank(&scores[q], q)).collect();
        ensure(ranks == brute, format!("ranks {ranks:?} vs {brute:?}"))?;
        let m = brute_metrics(&brute);
        for (k, want) in [(1, m.r1), (5, m.r5), (10, m.r10)] {
            let got = recall_at_k(&ranks, k).map_err(err)?;
            ensure((got - want).abs() <= 1e-9, format!("R@{k} {got} vs {want}"))?;
        }
        ensure(median_rank(&ranks).map_err(err)? == m.mr, "median rank")?;
        let x: Vec<f64> = (0..n.max(3)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v * 0.5 + rng.gen_range(-2.0..2.0))
            .collect();
        let (p, b) = (pearson(&x, &y).map_err(err)?, brute_pearson(&x, &y));
        ensure((p - b).abs() <= 1e-9, format!("pearson {p} vs {b}"))?;
        cases += 1;
    }
    Ok(format!(
        "fixed examples hold (r = {r:.5}); {cases} random splits with n <= 20 match brute force"
    ))
}

// ---------------------------------------------------------------- end to end

fn e2e_spec() -> SynthSpec {
    SynthSpec {
        n_images: 32,
        captions_per_language: 2,
        noise_scale: 0.05,
        seed: 7,
        ..SynthSpec::default()
    }
}

struct E2eRun {
    model: Model,
    elapsed: Duration,
}

fn e2e_train(kind: ModelKind) -> std::result::Result<E2eRun, String> {
    let spec = e2e_spec();
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Asymmetric, kind, spec.d_img, E2E_EPOCHS);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let options = TrainOptions {
        out_dir: dir.path().to_path_buf(),
        epoch_policy: Default::default(),
    };
    let outcome = train(&config, &data.train, &data.val, &data.vocabs, &options)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let model = load_checkpoint(&outcome.best_checkpoint).map_err(|e| e.to_string())?;
    Ok(E2eRun { model, elapsed })
}

fn end_to_end(pivot: &E2eRun, parallel: &E2eRun) -> Outcome {
    let err = |e: Error| e.to_string();
    let data = synth_data(&e2e_spec());
    let train_report = rank_evaluation(&pivot.model, &data.train).map_err(err)?;
    let val_report = rank_evaluation(&pivot.model, &data.val).map_err(err)?;
    let mut summary = Vec::new();
    for (lang, r) in &train_report.languages {
        let t = r.text_to_image.r1;
        ensure(
            t >= TRAIN_R1_MIN,
            format!("train {lang} text->image R@1 {t:.1} < {TRAIN_R1_MIN}"),
        )?;
        summary.push(format!("train {lang} t2i {t:.1}"));
    }
    for (lang, r) in &val_report.languages {
        let (t, i) = (r.text_to_image.r1, r.image_to_text.r1);
        ensure(
            t >= VAL_R1_MIN && i >= VAL_R1_MIN,
            format!("val {lang} R@1 t2i {t:.1} / i2t {i:.1} < {VAL_R1_MIN}"),
        )?;
        summary.push(format!("val {lang} t2i {t:.1} i2t {i:.1}"));
    }
    for (from, to) in [(0, 1), (1, 0)] {
        let par = cross_language_ranking(&parallel.model, &data.val, from, to)
            .map_err(err)?
            .r1;
        let piv = cross_language_ranking(&pivot.model, &data.val, from, to)
            .map_err(err)?
            .r1;
        ensure(
            par >= CROSS_R1_MIN,
            format!("parallel cross-language {from}->{to} R@1 {par:.1} < {CROSS_R1_MIN}"),
        )?;
        ensure(
            par > piv,
            format!("parallel cross-language {from}->{to} R@1 {par:.1} not above pivot {piv:.1}"),
        )?;
        summary.push(format!(
            "cross {from}->{to} parallel {par:.1} vs pivot {piv:.1}"
        ));
    }
    for (name, run) in [("pivot", pivot), ("parallel", parallel)] {
        ensure(
            run.elapsed < E2E_BUDGET,
            format!("{name} run took {:?}", run.elapsed),
        )?;
        summary.push(format!("{name} {:.1}s", run.elapsed.as_secs_f64()));
    }
    Ok(summary.join(", "))
}

// ---------------------------------------------------------------- configuration

fn published_defaults() -> Outcome {
    for (mode, margin) in [
        (SimilarityMode::Symmetric, 0.2),
        (SimilarityMode::Asymmetric, 0.05),
    ] {
        for kind in [ModelKind::Pivot, ModelKind::Parallel] {
            let json = serde_json::to_value(EmbedConfig::published_default(mode, kind))
                .map_err(|e| e.to_string())?;
            let want = serde_json::json!({
                "embed_dim": 1024, "word_dim": 300, "learning_rate": 0.001, "batch_size": 64, "margin": margin,
            });
            for (k, v) in want.as_object().unwrap() {
                ensure(
                    &json[k] == v,
                    format!("{mode:?}/{kind:?}: {k} = {} instead of {v}", json[k]),
                )?;
            }
        }
    }
    // A run config that names only its paths, in each mode.
    for (mode, margin) in [("symmetric", 0.2), ("asymmetric", 0.05)] {
        let value = serde_json::json!({
            "similarity_mode": mode,
            "train": {"captions": "a", "ids": "b", "features": "c"},
            "val": {"captions": "a", "ids": "b", "features": "c"},
            "output_dir": "o",
        });
        let c = RunConfig::from_value(value)
            .map_err(|e| e.to_string())?
            .resolved();
        let json = serde_json::to_value(&c).map_err(|e| e.to_string())?;
        ensure(
            json["embed_dim"] == 1024
                && json["word_dim"] == 300
                && json["learning_rate"] == 0.001
                && json["batch_size"] == 64
                && json["margin"] == margin,
            format!("run config defaults for {mode}: {json}"),
        )?;
    }
    Ok(
        "N=1024, word_dim=300, lr=0.001, batch_size=64, margin 0.2 symmetric / 0.05 asymmetric"
            .into(),
    )
}

// ---------------------------------------------------------------- determinism

fn cli(args: &[&str]) -> i32 {
    run(Cli::parse_from(
        std::iter::once("pivot-embed").chain(args.iter().copied()),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_synth_run(dir.path(), &e2e_spec(), 15);
    let run1 = dir.path().join("run");
    let run2 = dir.path().join("rerun");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_owned();
    ensure(
        cli(&["--threads", "1", "train", "--config", &s(&config)]) == EXIT_OK,
        "first training run failed",
    )?;
    let snapshot = run1.join(CONFIG_SNAPSHOT);
    let set_out = format!("output_dir={}", s(&run2));
    ensure(
        cli(&[
            "--threads",
            "1",
            "train",
            "--config",
            &s(&snapshot),
            "--set",
            &set_out,
        ]) == EXIT_OK,
        "re-run from snapshot failed",
    )?;
    let ckpt1 = std::fs::read(run1.join("best.mmck")).map_err(|e| e.to_string())?;
    let ckpt2 = std::fs::read(run2.join("best.mmck")).map_err(|e| e.to_string())?;
    ensure(ckpt1 == ckpt2, "checkpoints differ")?;
    let data = dir.path().join("data");
    let mut reports = Vec::new();
    for (run, out) in [(&run1, "eval1"), (&run2, "eval2")] {
        let code = cli(&[
            "--threads",
            "1",
            "eval",
            "--checkpoint",
            &s(&run.join("best.mmck")),
            "--captions",
            &s(&data.join("val.captions.tsv")),
            "--ids",
            &s(&data.join("val.ids.txt")),
            "--features",
            &s(&data.join("val.features.bin")),
            "--out-dir",
            &s(&dir.path().join(out)),
        ]);
        ensure(code == EXIT_OK, "eval failed")?;
        reports.push(
            std::fs::read(dir.path().join(out).join(REPORT_JSON)).map_err(|e| e.to_string())?,
        );
    }
    ensure(reports[0] == reports[1], "reports differ")?;
    Ok(format!(
        "checkpoints ({} bytes) and reports identical",
        ckpt1.len()
    ))
}

fn checkpoint_round_trip(run: &E2eRun) -> Outcome {
    let err = |e: Error| e.to_string();
    let data = synth_data(&e2e_spec());
    let before = rank_evaluation(&run.model, &data.val).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.mmck");
    pivot_embed::checkpoint::save_checkpoint(&run.model, &path).map_err(err)?;
    let loaded = load_checkpoint(&path).map_err(err)?;
    let after = rank_evaluation(&loaded, &data.val).map_err(err)?;
    ensure(
        before == after && before.to_json() == after.to_json(),
        "report changed after reload",
    )?;
    let again = decode_checkpoint(&encode_checkpoint(&loaded).map_err(err)?).map_err(err)?;
    ensure(again == loaded, "second round trip changed the model")?;
    Ok("save -> load -> eval reproduces the report exactly".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name}: {detail}");
        }
    };
    report("gradient_suite", gradient_suite());
    report("loss_oracle_suite", loss_oracle_suite());
    report("margin_semantics", margin_semantics());
    report("metric_oracle_suite", metric_oracle_suite());
    let pivot = e2e_train(ModelKind::Pivot);
    let parallel = e2e_train(ModelKind::Parallel);
    match (&pivot, &parallel) {
        (Ok(p), Ok(q)) => report("end_to_end_synthetic", end_to_end(p, q)),
        (Err(e), _) | (_, Err(e)) => {
            report("end_to_end_synthetic", Err(format!("training failed: {e}")))
        }
    }
    report("published_default_config", published_defaults());
    report("determinism", determinism());
    match &pivot {
        Ok(p) => report("checkpoint_round_trip", checkpoint_round_trip(p)),
        Err(e) => report(
            "checkpoint_round_trip",
            Err(format!("no trained model: {e}")),
        ),
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
