//! Deterministic synthetic bilingual corpus.
//!
//! Every image has a latent class: one value for each of `n_slots`
//! attribute slots. Its feature vector is the sum of one Gaussian prototype
//! per (slot, value) plus isotropic jitter, and each caption lists the
//! attribute words of its class in the language's own pseudo-vocabulary
//! (caption `j` starts at slot `j`, wrapping around).
//! Languages never share a token, so the only link between them is the image.
//!
//! The world (prototypes, word forms, class order) depends only on the seed.
//! Image `i` of every partition has the `i`-th class of the shuffled class
//! list, so train, val and test describe the same classes but with their own
//! feature jitter and word orders.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_captions, write_feature_table, CaptionRecord, FeatureTable};
use crate::error::{Error, Result};

/// Which split is generated; each has its own noise and word-order stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Partition::Train => 0,
            Partition::Val => 1,
            Partition::Test => 2,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!(
                "unknown partition {other:?}; expected train, val or test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub captions_per_language: usize,
    /// Word types per language; split evenly across the slots.
    pub vocab_size: usize,
    pub n_slots: usize,
    pub d_img: usize,
    pub seed: u64,
    pub noise_scale: f64,
    /// Expected L2 norm of each attribute prototype.
    pub prototype_norm: f64,
    pub languages: Vec<String>,
    /// Emit the attribute words in a random order per caption instead of
    /// the deterministic order (slot order rotated by the caption index).
    pub shuffle_words: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 32,
            captions_per_language: 2,
            vocab_size: 12,
            n_slots: 3,
            d_img: 8,
            seed: 7,
            noise_scale: 0.05,
            prototype_norm: 4.0,
            languages: vec!["en".into(), "de".into()],
            shuffle_words: false,
        }
    }
}

impl SynthSpec {
    pub fn values_per_slot(&self) -> usize {
        self.vocab_size / self.n_slots.max(1)
    }

    /// Number of distinct latent classes.
    pub fn class_count(&self) -> usize {
        (0..self.n_slots).fold(1usize, |acc, _| acc.saturating_mul(self.values_per_slot()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if self.captions_per_language == 0 {
            return bad("captions_per_language must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!(
                "vocab_size must be at least 4, got {}",
                self.vocab_size
            ));
        }
        if self.n_slots == 0 || self.values_per_slot() < 2 {
            return bad(format!(
                "vocab_size {} cannot give {} slots at least two words each",
                self.vocab_size, self.n_slots
            ));
        }
        if self.d_img == 0 {
            return bad("d_img must be positive".into());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!(
                "noise_scale must be finite and non-negative, got {}",
                self.noise_scale
            ));
        }
        if !(self.prototype_norm.is_finite() && self.prototype_norm > 0.0) {
            return bad(format!(
                "prototype_norm must be positive, got {}",
                self.prototype_norm
            ));
        }
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        for (k, l) in self.languages.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return bad(format!("invalid language tag {l:?}"));
            }
            if self.languages[..k].contains(l) {
                return bad(format!("language {l:?} listed twice"));
            }
        }
        Ok(())
    }
}

/// The seed-determined parts shared by every partition.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    spec: SynthSpec,
    /// `prototypes[slot][value]` is a `d_img` vector.
    prototypes: Vec<Vec<Vec<f32>>>,
    /// `words[language][slot][value]`.
    words: Vec<Vec<Vec<String>>>,
    /// All classes in shuffled order.
    classes: Vec<Vec<usize>>,
}

fn all_classes(n_slots: usize, values: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_slots {
        out = out
            .into_iter()
            .flat_map(|c| (0..values).map(move |v| [c.clone(), vec![v]].concat()))
            .collect();
    }
    out
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let values = spec.values_per_slot();
        let scale = (spec.prototype_norm / (spec.d_img as f64).sqrt()) as f32;
        let prototypes = (0..spec.n_slots)
            .map(|_| {
                (0..values)
                    .map(|_| {
                        (0..spec.d_img)
                            .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let words = spec
            .languages
            .iter()
            .map(|lang| {
                let mut forms: Vec<usize> = (0..spec.n_slots * values).collect();
                forms.shuffle(&mut rng);
                (0..spec.n_slots)
                    .map(|s| {
                        (0..values)
                            .map(|v| format!("{lang}{:02}", forms[s * values + v]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut classes = all_classes(spec.n_slots, values);
        classes.shuffle(&mut rng);
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            words,
            classes,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Latent class of image `i`; the class list wraps when it is exhausted.
    pub fn class_of(&self, image: usize) -> &[usize] {
        &self.classes[image % self.classes.len()]
    }

    /// Noise-free feature vector of a class.
    pub fn prototype(&self, class: &[usize]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.spec.d_img];
        for (s, &v) in class.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&self.prototypes[s][v]) {
                *o += p;
            }
        }
        out
    }

    /// Attribute words of a class in slot order.
    pub fn words_of(&self, language: usize, class: &[usize]) -> Vec<String> {
        class
            .iter()
            .enumerate()
            .map(|(s, &v)| self.words[language][s][v].clone())
            .collect()
    }

    /// Recovers the class named by a caption, if every slot is mentioned once.
    pub fn decode_caption(&self, language: usize, tokens: &[String]) -> Option<Vec<usize>> {
        let mut class = vec![None; self.spec.n_slots];
        for t in tokens {
            let (s, v) = self.words[language]
                .iter()
                .enumerate()
                .find_map(|(s, slot)| slot.iter().position(|w| w == t).map(|v| (s, v)))?;
            if class[s].replace(v).is_some() {
                return None;
            }
        }
        class.into_iter().collect()
    }

    /// Nearest noise-free class prototype to a feature vector.
    pub fn decode_feature(&self, feature: &[f32]) -> Vec<usize> {
        let dist = |c: &[usize]| -> f64 {
            self.prototype(c)
                .iter()
                .zip(feature)
                .map(|(p, f)| ((p - f) as f64).powi(2))
                .sum()
        };
        self.classes
            .iter()
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            .expect("at least one class")
            .clone()
    }
}

/// A generated split held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub captions: Vec<CaptionRecord>,
    pub features: FeatureTable,
    pub classes: Vec<Vec<usize>>,
}

pub fn generate_split(world: &SynthWorld, partition: Partition) -> Result<SynthCorpus> {
    let spec = world.spec();
    if spec.n_images > world.classes.len() {
        log::warn!(
            "{} images requested but only {} classes exist; classes repeat within the split",
            spec.n_images,
            world.classes.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + partition.index() as u64);

    let mut ids = Vec::with_capacity(spec.n_images);
    let mut data = Vec::with_capacity(spec.n_images * spec.d_img);
    let mut classes = Vec::with_capacity(spec.n_images);
    let mut captions = Vec::new();
    for i in 0..spec.n_images {
        let id = format!("{partition}-{i:04}");
        let class = world.class_of(i).to_vec();
        for p in world.prototype(&class) {
            let jitter: f64 = rng.sample(StandardNormal);
            data.push(p + (spec.noise_scale * jitter) as f32);
        }
        for language in 0..spec.languages.len() {
            for j in 0..spec.captions_per_language {
                let mut tokens = world.words_of(language, &class);
                if spec.shuffle_words {
                    tokens.shuffle(&mut rng);
                } else {
                    tokens.rotate_left(j % spec.n_slots);
                }
                captions.push(CaptionRecord {
                    image_id: id.clone(),
                    language,
                    tokens,
                });
            }
        }
        ids.push(id);
        classes.push(class);
    }
    let features = FeatureTable::new(ids, spec.d_img, data)?;
    Ok(SynthCorpus {
        captions,
        features,
        classes,
    })
}

/// Paths of the three files of one generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub captions: PathBuf,
    pub ids: PathBuf,
    pub features: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path, partition: Partition) -> Self {
        Self {
            captions: dir.join(format!("{partition}.captions.tsv")),
            ids: dir.join(format!("{partition}.ids.txt")),
            features: dir.join(format!("{partition}.features.bin")),
        }
    }
}

/// Writes `<partition>.captions.tsv`, `<partition>.ids.txt` and
/// `<partition>.features.bin` under `dir`.
pub fn generate(spec: &SynthSpec, partition: Partition, dir: &Path) -> Result<SynthFiles> {
    let world = SynthWorld::new(spec)?;
    let corpus = generate_split(&world, partition)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles::in_dir(dir, partition);
    write_captions(&files.captions, &corpus.captions, &spec.languages)?;
    write_feature_table(&corpus.features, &files.ids, &files.features)?;
    Ok(files)
}
