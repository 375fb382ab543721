//! Caption and image-feature ingestion, vocabularies, and minibatch assembly.
//!
//! A minibatch holds `b` distinct images, one caption per language for each of
//! them, and nothing else: every other row of the batch is a negative for a
//! given row.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFE";
pub const FEATURE_VERSION: u32 = 1;

/// One tokenized description of an image. `language` indexes the declared language list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub language: usize,
    pub tokens: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a `image_id TAB language TAB tokens` file. Blank lines are skipped.
pub fn load_captions(path: &Path, languages: &[String]) -> Result<Vec<CaptionRecord>> {
    let text = read_text(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let image_id = fields[0].trim();
        if image_id.is_empty() {
            return Err(parse_err(i + 1, "empty image id".into()));
        }
        let language = languages
            .iter()
            .position(|l| l == fields[1].trim())
            .ok_or_else(|| parse_err(i + 1, format!("unknown language {:?}", fields[1])))?;
        let tokens: Vec<String> = fields[2].split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(parse_err(i + 1, "empty token field".into()));
        }
        out.push(CaptionRecord {
            image_id: image_id.to_owned(),
            language,
            tokens,
        });
    }
    Ok(out)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord], languages: &[String]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            r.image_id,
            languages[r.language],
            r.tokens.join(" ")
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Token ↔ id mapping for one language. Ids are dense; 0 is PAD and 1 is UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    language: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    language: String,
    tokens: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;
    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.language, r.tokens)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            language: v.language,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(language: String, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2
            || tokens[PAD as usize] != PAD_TOKEN
            || tokens[UNK as usize] != UNK_TOKEN
        {
            return Err(Error::Data(format!(
                "vocabulary for {language} lacks reserved PAD/UNK entries"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!(
                    "duplicate token {t:?} in {language} vocabulary"
                )));
            }
        }
        Ok(Self {
            language,
            tokens,
            index,
        })
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Maps tokens to ids, sending unknown tokens to UNK.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot encode an empty token sequence".into()));
        }
        Ok(tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect())
    }
}

/// Builds the vocabulary of `language` from every token seen at least `min_count`
/// times. Ids follow descending frequency, then lexicographic order.
pub fn build_vocabulary(
    records: &[CaptionRecord],
    language: usize,
    tag: &str,
    min_count: usize,
) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Data("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut seen = false;
    for r in records.iter().filter(|r| r.language == language) {
        seen = true;
        for t in &r.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if !seen {
        return Err(Error::Data(format!("empty corpus for language {tag}")));
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_owned()));
    Vocabulary::from_tokens(tag.to_owned(), tokens)
}

/// Image id → feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Features("feature dimension is zero".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Features(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Features(format!(
                "non-finite value in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Features(format!("duplicate image id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            index,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn load_feature_table(ids_path: &Path, bin_path: &Path) -> Result<FeatureTable> {
    let ids: Vec<String> = read_text(ids_path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_owned())
        .filter(|l| !l.is_empty())
        .collect();
    let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Features(format!(
            "{}: bad magic",
            bin_path.display()
        )));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    let (version, n_rows, dim) = (word(1), word(2) as usize, word(3) as usize);
    if version != FEATURE_VERSION {
        return Err(Error::Features(format!(
            "{}: unsupported version {version}",
            bin_path.display()
        )));
    }
    if n_rows != ids.len() {
        return Err(Error::Features(format!(
            "row count mismatch: header says {n_rows}, {} lists {} ids",
            ids_path.display(),
            ids.len()
        )));
    }
    let payload = &bytes[16..];
    if payload.len() != n_rows * dim * 4 {
        return Err(Error::Features(format!(
            "{}: payload has {} bytes, expected {}",
            bin_path.display(),
            payload.len(),
            n_rows * dim * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureTable::new(ids, dim, data)
}

pub fn write_feature_table(table: &FeatureTable, ids_path: &Path, bin_path: &Path) -> Result<()> {
    let mut ids = String::new();
    for id in &table.ids {
        ids.push_str(id);
        ids.push('\n');
    }
    fs::write(ids_path, ids).map_err(|e| Error::io(ids_path, e))?;
    let mut bytes = Vec::with_capacity(16 + table.data.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, table.len() as u32, table.dim as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &table.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(bin_path, e))
}

/// One sentence pair with a gold similarity in `[0, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub first: Vec<String>,
    pub second: Vec<String>,
    pub gold: f64,
}

pub fn load_sts_pairs(path: &Path) -> Result<Vec<StsPair>> {
    let text = read_text(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let tok = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_owned).collect() };
        let (first, second) = (tok(fields[0]), tok(fields[1]));
        if first.is_empty() || second.is_empty() {
            return Err(parse_err(i + 1, "empty sentence".into()));
        }
        let gold: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad gold score {:?}", fields[2])))?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(parse_err(
                i + 1,
                format!("gold score {gold} outside [0, 5]"),
            ));
        }
        out.push(StsPair {
            first,
            second,
            gold,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no sentence pairs",
            path.display()
        )));
    }
    Ok(out)
}

/// Captions and features of one split, indexed by image.
#[derive(Debug, Clone)]
pub struct Split {
    languages: Vec<String>,
    captions: Vec<CaptionRecord>,
    features: FeatureTable,
    // [image row][language] -> caption indices
    by_image: Vec<Vec<Vec<usize>>>,
}

impl Split {
    pub fn new(
        languages: Vec<String>,
        captions: Vec<CaptionRecord>,
        features: FeatureTable,
    ) -> Result<Self> {
        let mut by_image = vec![vec![Vec::new(); languages.len()]; features.len()];
        for (c, rec) in captions.iter().enumerate() {
            if rec.language >= languages.len() {
                return Err(Error::Data(format!(
                    "caption {c} has undeclared language {}",
                    rec.language
                )));
            }
            let row = features.row_of(&rec.image_id).ok_or_else(|| {
                Error::Data(format!(
                    "caption image {:?} missing from feature table",
                    rec.image_id
                ))
            })?;
            by_image[row][rec.language].push(c);
        }
        Ok(Self {
            languages,
            captions,
            features,
            by_image,
        })
    }

    /// Loads a split from its captions, feature-id and feature-binary files.
    pub fn load(
        languages: &[String],
        captions: &Path,
        ids: &Path,
        features: &Path,
    ) -> Result<Self> {
        let records = load_captions(captions, languages)?;
        let table = load_feature_table(ids, features)?;
        Self::new(languages.to_vec(), records, table)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    /// Caption indices of image row `image` in `language`.
    pub fn captions_of(&self, image: usize, language: usize) -> &[usize] {
        &self.by_image[image][language]
    }

    /// Image rows having at least one caption in every language.
    pub fn eligible_images(&self) -> Vec<usize> {
        (0..self.features.len())
            .filter(|&i| self.by_image[i].iter().all(|c| !c.is_empty()))
            .collect()
    }

    /// Image row of every caption in `language`, in caption-file order.
    pub fn captions_in(&self, language: usize) -> Vec<(usize, &CaptionRecord)> {
        self.captions
            .iter()
            .filter(|r| r.language == language)
            .map(|r| {
                (
                    self.features
                        .row_of(&r.image_id)
                        .expect("validated in Split::new"),
                    r,
                )
            })
            .collect()
    }

    /// Assembles a batch from image rows and the chosen caption per row and language.
    fn assemble(
        &self,
        rows: &[usize],
        choice: &[Vec<usize>],
        vocabs: &[Vocabulary],
    ) -> Result<Batch> {
        let dim = self.features.dim();
        let mut image_data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            image_data.extend_from_slice(self.features.row(r));
        }
        let mut caption_ids = Vec::with_capacity(self.languages.len());
        for (k, vocab) in vocabs.iter().enumerate().take(self.languages.len()) {
            let ids = choice[k]
                .iter()
                .map(|&c| vocab.encode(&self.captions[c].tokens))
                .collect::<Result<Vec<_>>>()?;
            caption_ids.push(ids);
        }
        Ok(Batch {
            image_ids: rows
                .iter()
                .map(|&r| self.features.ids()[r].clone())
                .collect(),
            image_rows: Tensor::new(vec![rows.len(), dim], image_data)?,
            caption_ids,
        })
    }
}

/// Aligned rows: row `j` of every field describes the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image_ids: Vec<String>,
    pub image_rows: Tensor<f32>,
    /// `[language][row]` token ids.
    pub caption_ids: Vec<Vec<Vec<u32>>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.image_ids.len()
    }

    pub fn lengths(&self, language: usize) -> Vec<usize> {
        self.caption_ids[language].iter().map(Vec::len).collect()
    }
}

fn check_vocabs(split: &Split, vocabs: &[Vocabulary]) -> Result<()> {
    if vocabs.len() != split.languages.len() {
        return Err(Error::Data(format!(
            "{} vocabularies for {} languages",
            vocabs.len(),
            split.languages.len()
        )));
    }
    Ok(())
}

/// Draws `batch_size` distinct images, and for each image one caption per
/// language uniformly among that image's captions.
pub fn sample_minibatch<R: Rng>(
    split: &Split,
    vocabs: &[Vocabulary],
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    check_vocabs(split, vocabs)?;
    if batch_size < 2 {
        return Err(Error::Data("batch size must be at least 2".into()));
    }
    let eligible = split.eligible_images();
    if eligible.len() < batch_size {
        return Err(Error::Data(format!(
            "only {} images have captions in every language, batch size is {batch_size}",
            eligible.len()
        )));
    }
    let rows: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), batch_size)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let choice: Vec<Vec<usize>> = (0..split.languages.len())
        .map(|k| {
            rows.iter()
                .map(|&r| {
                    let caps = split.captions_of(r, k);
                    caps[rng.gen_range(0..caps.len())]
                })
                .collect()
        })
        .collect();
    split.assemble(&rows, &choice, vocabs)
}

/// How one training epoch walks the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochPolicy {
    /// Every eligible image appears once, with a uniformly drawn caption per language.
    #[default]
    PerImage,
    /// Repeated image passes until every caption has been used at least once.
    PerCaption,
}

/// The minibatches of one epoch. Trailing chunks with fewer than two images are dropped.
pub fn epoch_batches<R: Rng>(
    split: &Split,
    vocabs: &[Vocabulary],
    batch_size: usize,
    policy: EpochPolicy,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    check_vocabs(split, vocabs)?;
    if batch_size < 2 {
        return Err(Error::Data("batch size must be at least 2".into()));
    }
    let eligible = split.eligible_images();
    if eligible.len() < batch_size {
        return Err(Error::Data(format!(
            "only {} images have captions in every language, batch size is {batch_size}",
            eligible.len()
        )));
    }
    let n_lang = split.languages.len();
    // Per image and language, the caption order used by successive passes.
    let orders: Vec<Vec<Vec<usize>>> = eligible
        .iter()
        .map(|&r| {
            (0..n_lang)
                .map(|k| {
                    let mut caps = split.captions_of(r, k).to_vec();
                    if policy == EpochPolicy::PerCaption {
                        caps.shuffle(rng);
                    }
                    caps
                })
                .collect()
        })
        .collect();
    let passes = match policy {
        EpochPolicy::PerImage => 1,
        EpochPolicy::PerCaption => orders.iter().flatten().map(Vec::len).max().unwrap_or(1),
    };
    let mut batches = Vec::new();
    for pass in 0..passes {
        let mut order: Vec<usize> = (0..eligible.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rows: Vec<usize> = chunk.iter().map(|&e| eligible[e]).collect();
            let choice: Vec<Vec<usize>> = (0..n_lang)
                .map(|k| {
                    chunk
                        .iter()
                        .map(|&e| {
                            let caps = &orders[e][k];
                            match policy {
                                EpochPolicy::PerImage => caps[rng.gen_range(0..caps.len())],
                                EpochPolicy::PerCaption => caps[pass % caps.len()],
                            }
                        })
                        .collect()
                })
                .collect();
            batches.push(split.assemble(&rows, &choice, vocabs)?);
        }
    }
    Ok(batches)
}

/// True when no image id repeats.
pub fn ids_unique(ids: &[String]) -> bool {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().all(|id| seen.insert(id))
}
