//! Sentence and image encoders.
//!
//! Each language has its own word embeddings and single-layer GRU; the final
//! hidden state is the sentence representation. Images are projected by one
//! shared matrix. Outputs are unit-normalized in symmetric mode and made
//! non-negative with `|·|` in asymmetric mode.
//!
//! The GRU update, with row vectors:
//!
//! ```text
//! z = σ(x·W_z + h·U_z + b_z)
//! r = σ(x·W_r + h·U_r + b_r)
//! g = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = h + z ⊙ (g − h)        // = (1 − z) ⊙ h + z ⊙ g
//! ```
//!
//! There are two implementations: a direct `f32` one used for inference and
//! a tape one used for training. They are tested against each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, NodeId, Tape};
use crate::data::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::similarity::SimilarityMode;
use crate::tensor::{matmul, Real, Tensor};

pub const INIT_RANGE: f32 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Caption/image ranking terms only.
    Pivot,
    /// Pivot terms plus a caption/caption ranking term across the two languages.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub embed_dim: usize,
    pub word_dim: usize,
    pub margin: f64,
    pub similarity_mode: SimilarityMode,
    pub model_kind: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub d_img: usize,
}

/// Margin used when none is given: 0.2 for cosine, 0.05 for order violation.
pub fn default_margin(mode: SimilarityMode) -> f64 {
    match mode {
        SimilarityMode::Symmetric => 0.2,
        SimilarityMode::Asymmetric => 0.05,
    }
}

impl EmbedConfig {
    /// The published experimental setup: N = 1024, 300-d words, Adam at 0.001,
    /// 64 images per batch, VGG-19 fc7 features (4096-d).
    pub fn published_default(mode: SimilarityMode, kind: ModelKind) -> Self {
        Self {
            embed_dim: 1024,
            word_dim: 300,
            margin: default_margin(mode),
            similarity_mode: mode,
            model_kind: kind,
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            grad_clip: 2.0,
            seed: 1234,
            d_img: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_owned()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.word_dim == 0 {
            return bad("word_dim must be positive");
        }
        if self.d_img == 0 {
            return bad("d_img must be positive");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Word embeddings and GRU weights of one language.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub embed: Tensor<f32>,
    pub w_z: Tensor<f32>,
    pub w_r: Tensor<f32>,
    pub w_h: Tensor<f32>,
    pub u_z: Tensor<f32>,
    pub u_r: Tensor<f32>,
    pub u_h: Tensor<f32>,
    pub b_z: Tensor<f32>,
    pub b_r: Tensor<f32>,
    pub b_h: Tensor<f32>,
}

const GRU_FIELDS: [&str; 10] = [
    "embed", "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h",
];

impl GruParams {
    fn zeros(vocab: usize, word_dim: usize, n: usize) -> Self {
        let z = |s: &[usize]| Tensor::zeros(s);
        Self {
            embed: z(&[vocab, word_dim]),
            w_z: z(&[word_dim, n]),
            w_r: z(&[word_dim, n]),
            w_h: z(&[word_dim, n]),
            u_z: z(&[n, n]),
            u_r: z(&[n, n]),
            u_h: z(&[n, n]),
            b_z: z(&[n]),
            b_r: z(&[n]),
            b_h: z(&[n]),
        }
    }

    fn fields(&self) -> [&Tensor<f32>; 10] {
        [
            &self.embed,
            &self.w_z,
            &self.w_r,
            &self.w_h,
            &self.u_z,
            &self.u_r,
            &self.u_h,
            &self.b_z,
            &self.b_r,
            &self.b_h,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<f32>; 10] {
        [
            &mut self.embed,
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn embed_dim(&self) -> usize {
        self.b_z.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub languages: Vec<GruParams>,
    /// `d_img × N`
    pub w_img: Tensor<f32>,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config` and the vocabulary sizes.
    pub fn zeros(config: &EmbedConfig, vocab_sizes: &[usize]) -> Self {
        Self {
            languages: vocab_sizes
                .iter()
                .map(|&v| GruParams::zeros(v, config.word_dim, config.embed_dim))
                .collect(),
            w_img: Tensor::zeros(&[config.d_img, config.embed_dim]),
        }
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (k, lang) in self.languages.iter().enumerate() {
            for (name, t) in GRU_FIELDS.iter().zip(lang.fields()) {
                out.push((format!("lang{k}.{name}"), t));
            }
        }
        out.push(("w_img".to_owned(), &self.w_img));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = Vec::new();
        for (k, lang) in self.languages.iter_mut().enumerate() {
            for (name, t) in GRU_FIELDS.iter().zip(lang.fields_mut()) {
                out.push((format!("lang{k}.{name}"), t));
            }
        }
        out.push(("w_img".to_owned(), &mut self.w_img));
        out
    }

    pub fn is_embedding(name: &str) -> bool {
        name.ends_with(".embed")
    }

    /// Zeroes the PAD row of every word-embedding matrix.
    pub fn zero_pad_rows(&mut self) {
        for lang in &mut self.languages {
            lang.embed
                .row_mut(PAD as usize)
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_img.cols()
    }

    pub fn d_img(&self) -> usize {
        self.w_img.rows()
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Uniform `[−0.08, 0.08]` for word embeddings and GRU weights, uniform
/// `[−s, s]` with `s = √(6 / (d_img + N))` for the image projection.
pub fn init_params<R: Rng>(
    config: &EmbedConfig,
    vocab_sizes: &[usize],
    rng: &mut R,
) -> Result<ModelParams> {
    if vocab_sizes.is_empty() || vocab_sizes.iter().any(|&v| v < 2) {
        return Err(Error::Model(format!(
            "invalid vocabulary sizes {vocab_sizes:?}"
        )));
    }
    let mut params = ModelParams::zeros(config, vocab_sizes);
    for lang in &mut params.languages {
        for t in lang.fields_mut() {
            *t = uniform(rng, t.shape(), INIT_RANGE);
        }
    }
    let s = (6.0 / (config.d_img + config.embed_dim) as f64).sqrt() as f32;
    params.w_img = uniform(rng, &[config.d_img, config.embed_dim], s);
    params.zero_pad_rows();
    Ok(params)
}

/// Unit L2 norm in symmetric mode (zero stays zero), `|v|` in asymmetric mode.
pub fn normalize_embedding<T: Real>(v: &[T], mode: SimilarityMode) -> Vec<T> {
    match mode {
        SimilarityMode::Symmetric => {
            let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            if norm > T::zero() {
                v.iter().map(|&x| x / norm).collect()
            } else {
                log::warn!("zero embedding left unnormalized");
                v.to_vec()
            }
        }
        SimilarityMode::Asymmetric => v.iter().map(|x| x.abs()).collect(),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn row_times(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    let xt = Tensor::new(vec![1, x.len()], x.to_vec()).expect("row");
    matmul(&xt, w, false).into_data()
}

/// Final GRU hidden state before output normalization.
pub fn sentence_state(params: &ModelParams, language: usize, ids: &[u32]) -> Result<Vec<f32>> {
    let gru = params
        .languages
        .get(language)
        .ok_or_else(|| Error::Model(format!("no encoder for language {language}")))?;
    if ids.is_empty() {
        return Err(Error::Model("cannot encode an empty sentence".into()));
    }
    let vocab = gru.embed.rows();
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::Model(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    let n = gru.embed_dim();
    let mut h = vec![0.0f32; n];
    for &id in ids {
        let x = gru.embed.row(id as usize);
        let (xz, xr, xh) = (
            row_times(x, &gru.w_z),
            row_times(x, &gru.w_r),
            row_times(x, &gru.w_h),
        );
        let (hz, hr) = (row_times(&h, &gru.u_z), row_times(&h, &gru.u_r));
        let z: Vec<f32> = (0..n)
            .map(|i| sigmoid(xz[i] + hz[i] + gru.b_z.data()[i]))
            .collect();
        let r: Vec<f32> = (0..n)
            .map(|i| sigmoid(xr[i] + hr[i] + gru.b_r.data()[i]))
            .collect();
        let rh: Vec<f32> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let uh = row_times(&rh, &gru.u_h);
        let cand: Vec<f32> = (0..n)
            .map(|i| (xh[i] + uh[i] + gru.b_h.data()[i]).tanh())
            .collect();
        h = (0..n).map(|i| h[i] + z[i] * (cand[i] - h[i])).collect();
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("non-finite sentence state".into()));
    }
    Ok(h)
}

pub fn encode_sentence(
    params: &ModelParams,
    language: usize,
    ids: &[u32],
    mode: SimilarityMode,
) -> Result<Vec<f32>> {
    Ok(normalize_embedding(
        &sentence_state(params, language, ids)?,
        mode,
    ))
}

/// `normalize(feature · W_img)`.
pub fn encode_image(
    params: &ModelParams,
    feature: &[f32],
    mode: SimilarityMode,
) -> Result<Vec<f32>> {
    if feature.len() != params.d_img() {
        return Err(Error::Model(format!(
            "image feature has {} values, model expects {}",
            feature.len(),
            params.d_img()
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(
            "image feature contains a non-finite value".into(),
        ));
    }
    Ok(normalize_embedding(
        &row_times(feature, &params.w_img),
        mode,
    ))
}

/// Tape input nodes for one language's parameters.
#[derive(Debug, Clone)]
pub struct GruNodes {
    pub embed: NodeId,
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
}

/// Every parameter declared as a tape input, in [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub languages: Vec<GruNodes>,
    pub w_img: NodeId,
    pub order: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn declare(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        let mut order = Vec::new();
        let mut ids = Vec::new();
        for (name, t) in params.named() {
            let id = tape.input(t.shape())?;
            order.push((name, id));
            ids.push(id);
        }
        let languages = ids[..ids.len() - 1]
            .chunks(GRU_FIELDS.len())
            .map(|c| GruNodes {
                embed: c[0],
                w_z: c[1],
                w_r: c[2],
                w_h: c[3],
                u_z: c[4],
                u_r: c[5],
                u_h: c[6],
                b_z: c[7],
                b_r: c[8],
                b_h: c[9],
            })
            .collect();
        Ok(Self {
            languages,
            w_img: *ids.last().unwrap(),
            order,
        })
    }

    pub fn bind<'a>(&self, params: &'a ModelParams, bindings: &mut Bindings<'a, f32>) {
        for ((_, id), (_, t)) in self.order.iter().zip(params.named()) {
            bindings.bind(*id, t);
        }
    }
}

fn gate(tape: &mut Tape, x: NodeId, h: NodeId, w: NodeId, u: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    Ok(tape.add_row(s, b)?)
}

/// Encodes `sentences` as a `b × N` node. Sentences are processed together,
/// longest first; rows whose sentence has ended keep their last state.
pub fn encode_sentences_node(
    tape: &mut Tape,
    gru: &GruNodes,
    sentences: &[Vec<u32>],
    mode: SimilarityMode,
) -> Result<NodeId> {
    let b = sentences.len();
    if b == 0 || sentences.iter().any(Vec::is_empty) {
        return Err(Error::Model(
            "empty sentence batch or empty sentence".into(),
        ));
    }
    let n = tape.shape(gru.b_z)[0];
    let vocab = tape.shape(gru.embed)[0];
    if sentences.iter().flatten().any(|&i| i as usize >= vocab) {
        return Err(Error::Model("token id outside vocabulary".into()));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| sentences[c].len().cmp(&sentences[a].len()));
    let max_len = sentences[order[0]].len();

    let mut h = tape.constant(&Tensor::<f64>::zeros(&[b, n]));
    for t in 0..max_len {
        let active = order
            .iter()
            .take_while(|&&j| sentences[j].len() > t)
            .count();
        let ids: Vec<usize> = order[..active]
            .iter()
            .map(|&j| sentences[j][t] as usize)
            .collect();
        let x = tape.gather_rows(gru.embed, ids)?;
        let h_prev = if active < b {
            tape.slice_rows(h, 0, active)?
        } else {
            h
        };
        let z_pre = gate(tape, x, h_prev, gru.w_z, gru.u_z, gru.b_z)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = gate(tape, x, h_prev, gru.w_r, gru.u_r, gru.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h_prev)?;
        let cand_pre = gate(tape, x, rh, gru.w_h, gru.u_h, gru.b_h)?;
        let cand = tape.tanh(cand_pre)?;
        let delta = tape.sub(cand, h_prev)?;
        let step = tape.mul(z, delta)?;
        let h_new = tape.add(h_prev, step)?;
        h = if active < b {
            let rest = tape.slice_rows(h, active, b)?;
            tape.concat(&[h_new, rest], 0)?
        } else {
            h_new
        };
    }
    let mut inverse = vec![0; b];
    for (pos, &j) in order.iter().enumerate() {
        inverse[j] = pos;
    }
    let identity = inverse.iter().enumerate().all(|(i, &p)| i == p);
    let h = if identity {
        h
    } else {
        tape.gather_rows(h, inverse)?
    };
    normalize_node(tape, h, mode)
}

/// Encodes a `b × d_img` feature node as `b × N`.
pub fn encode_images_node(
    tape: &mut Tape,
    w_img: NodeId,
    features: NodeId,
    mode: SimilarityMode,
) -> Result<NodeId> {
    let proj = tape.matmul(features, w_img)?;
    normalize_node(tape, proj, mode)
}

fn normalize_node(tape: &mut Tape, x: NodeId, mode: SimilarityMode) -> Result<NodeId> {
    Ok(match mode {
        SimilarityMode::Symmetric => tape.normalize_rows(x)?,
        SimilarityMode::Asymmetric => tape.abs(x)?,
    })
}

/// A trained (or initialized) model with its vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EmbedConfig,
    pub params: ModelParams,
    pub vocabs: Vec<Vocabulary>,
}

/// Anything that maps captions and image features into the joint space.
pub trait JointEncoder: Sync {
    fn mode(&self) -> SimilarityMode;
    fn embed_caption(&self, language: usize, tokens: &[String]) -> Result<Vec<f32>>;
    fn embed_image(&self, feature: &[f32]) -> Result<Vec<f32>>;
    fn language_count(&self) -> usize;
    fn d_img(&self) -> usize;
}

impl Model {
    pub fn languages(&self) -> Vec<String> {
        self.vocabs
            .iter()
            .map(|v| v.language().to_owned())
            .collect()
    }
}

impl JointEncoder for Model {
    fn mode(&self) -> SimilarityMode {
        self.config.similarity_mode
    }

    fn embed_caption(&self, language: usize, tokens: &[String]) -> Result<Vec<f32>> {
        let vocab = self
            .vocabs
            .get(language)
            .ok_or_else(|| Error::Model(format!("no vocabulary for language {language}")))?;
        let ids = vocab.encode(tokens)?;
        encode_sentence(&self.params, language, &ids, self.config.similarity_mode)
    }

    fn embed_image(&self, feature: &[f32]) -> Result<Vec<f32>> {
        encode_image(&self.params, feature, self.config.similarity_mode)
    }

    fn language_count(&self) -> usize {
        self.vocabs.len()
    }

    fn d_img(&self) -> usize {
        self.params.d_img()
    }
}
