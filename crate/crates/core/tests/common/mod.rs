//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use pivot_embed::config::{RunConfig, SplitPaths};
use pivot_embed::data::{build_vocabulary, Split, Vocabulary};
use pivot_embed::model::{EmbedConfig, ModelKind};
use pivot_embed::similarity::SimilarityMode;
use pivot_embed::synth::{generate, generate_split, Partition, SynthSpec, SynthWorld};

/// Train and val splits of the synthetic corpus plus vocabularies built
/// from the training captions.
pub struct SynthData {
    pub train: Split,
    pub val: Split,
    pub vocabs: Vec<Vocabulary>,
}

pub fn synth_data(spec: &SynthSpec) -> SynthData {
    let world = SynthWorld::new(spec).unwrap();
    let load = |p| {
        let c = generate_split(&world, p).unwrap();
        Split::new(spec.languages.clone(), c.captions, c.features).unwrap()
    };
    let (train, val) = (load(Partition::Train), load(Partition::Val));
    let vocabs = spec
        .languages
        .iter()
        .enumerate()
        .map(|(k, l)| build_vocabulary(train.captions(), k, l, 1).unwrap())
        .collect();
    SynthData { train, val, vocabs }
}

/// The small model used for end-to-end runs on the synthetic corpus.
pub fn small_config(
    mode: SimilarityMode,
    kind: ModelKind,
    d_img: usize,
    max_epochs: usize,
) -> EmbedConfig {
    EmbedConfig {
        embed_dim: 32,
        word_dim: 16,
        batch_size: 8,
        learning_rate: 0.001,
        d_img,
        max_epochs,
        patience: max_epochs.max(1),
        ..EmbedConfig::published_default(mode, kind)
    }
}

/// Writes train and val splits under `dir` and a matching run config file.
pub fn write_synth_run(dir: &Path, spec: &SynthSpec, max_epochs: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let t = generate(spec, Partition::Train, &data).unwrap();
    let v = generate(spec, Partition::Val, &data).unwrap();
    let paths = |f: pivot_embed::synth::SynthFiles| SplitPaths {
        captions: f.captions,
        ids: f.ids,
        features: f.features,
    };
    let mut config = RunConfig::with_paths(paths(t), paths(v), dir.join("run"));
    config.embed_dim = 32;
    config.word_dim = 16;
    config.batch_size = 8;
    config.d_img = spec.d_img;
    config.max_epochs = max_epochs;
    config.patience = max_epochs.max(1);
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json()).unwrap();
    path
}
