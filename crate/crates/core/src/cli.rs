//! Command-line front end: `train`, `eval`, `sts` and `synth`.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 when the input (config,
//! paths, files, checkpoint) is invalid.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, SplitPaths};
use crate::data::{build_vocabulary, load_sts_pairs, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{rank_evaluation, sts_evaluate, RankingReport, StsReport};
use crate::model::Model;
use crate::synth::{generate, Partition, SynthFiles, SynthSpec};
use crate::train::{train, TrainOptions, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const TEST_REPORT_JSON: &str = "test_report.json";

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

fn invalid(error: Error) -> CliError {
    CliError {
        code: EXIT_INVALID,
        error,
    }
}

fn runtime(error: Error) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        error,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "pivot-embed",
    version,
    about = "Image-pivoted multilingual sentence and image embeddings"
)]
pub struct Cli {
    /// Worker threads for evaluation; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Retrieval evaluation of a checkpoint on one split.
    Eval(EvalArgs),
    /// Sentence similarity evaluation of a checkpoint.
    Sts(StsArgs),
    /// Generate one split of the synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set margin=0.1` or `--set train.features=x.bin`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub ids: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct StsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tab-separated `sentence TAB sentence TAB gold` file.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Language tag of the sentences, as listed in the checkpoint.
    #[arg(long)]
    pub language: String,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "train")]
    pub partition: String,
    #[arg(long, default_value_t = SynthSpec::default().n_images)]
    pub n_images: usize,
    #[arg(long, default_value_t = SynthSpec::default().captions_per_language)]
    pub captions_per_language: usize,
    #[arg(long, default_value_t = SynthSpec::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_slots)]
    pub n_slots: usize,
    #[arg(long, default_value_t = SynthSpec::default().d_img)]
    pub d_img: usize,
    #[arg(long, default_value_t = SynthSpec::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().noise_scale)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = SynthSpec::default().prototype_norm)]
    pub prototype_norm: f64,
    /// Comma-separated language tags.
    #[arg(long, value_delimiter = ',', default_values_t = SynthSpec::default().languages)]
    pub languages: Vec<String>,
    #[arg(long)]
    pub shuffle_words: bool,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            n_images: self.n_images,
            captions_per_language: self.captions_per_language,
            vocab_size: self.vocab_size,
            n_slots: self.n_slots,
            d_img: self.d_img,
            seed: self.seed,
            noise_scale: self.noise_scale,
            prototype_norm: self.prototype_norm,
            languages: self.languages.clone(),
            shuffle_words: self.shuffle_words,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(languages: &[String], paths: &SplitPaths) -> Result<Split> {
    Split::load(languages, &paths.captions, &paths.ids, &paths.features)
}

fn check_dims(model_d_img: usize, split: &Split, what: &str) -> Result<()> {
    if split.features().dim() != model_d_img {
        return Err(Error::Config(format!(
            "{what} features have dimension {}, the model expects {model_d_img}",
            split.features().dim()
        )));
    }
    Ok(())
}

/// Loads and validates the config, trains, and writes the checkpoint, the
/// training log and a resolved config snapshot under `output_dir`.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> CliResult<TrainOutcome> {
    let config = RunConfig::load(config_path, overrides)
        .map_err(invalid)?
        .resolved();
    config.validate().map_err(invalid)?;
    let train_split = load_split(&config.languages, &config.train).map_err(invalid)?;
    let val_split = load_split(&config.languages, &config.val).map_err(invalid)?;
    check_dims(config.d_img, &train_split, "training").map_err(invalid)?;
    check_dims(config.d_img, &val_split, "validation").map_err(invalid)?;
    let test_split = match &config.test {
        Some(paths) => {
            let split = load_split(&config.languages, paths).map_err(invalid)?;
            check_dims(config.d_img, &split, "test").map_err(invalid)?;
            Some(split)
        }
        None => None,
    };
    let vocabs: Vec<Vocabulary> = config
        .languages
        .iter()
        .enumerate()
        .map(|(k, tag)| build_vocabulary(train_split.captions(), k, tag, config.min_count))
        .collect::<Result<_>>()
        .map_err(invalid)?;

    write_file(&config.output_dir.join(CONFIG_SNAPSHOT), &config.to_json()).map_err(runtime)?;
    let options = TrainOptions {
        out_dir: config.output_dir.clone(),
        epoch_policy: config.epoch_policy,
    };
    let outcome = train(
        &config.embed_config(),
        &train_split,
        &val_split,
        &vocabs,
        &options,
    )
    .map_err(runtime)?;
    log::info!(
        "best checkpoint {} (epoch {:?})",
        outcome.best_checkpoint.display(),
        outcome.best_epoch
    );

    if let Some(test) = test_split {
        let model = load_checkpoint(&outcome.best_checkpoint).map_err(runtime)?;
        let report = rank_evaluation(&model, &test).map_err(runtime)?;
        write_file(&config.output_dir.join(TEST_REPORT_JSON), &report.to_json())
            .map_err(runtime)?;
        log::info!("test split:\n{}", report.to_table());
    }
    Ok(outcome)
}

fn load_model(path: &Path) -> CliResult<Model> {
    load_checkpoint(path).map_err(invalid)
}

/// Ranks every image and caption of a split and writes the report.
pub fn cmd_eval(checkpoint: &Path, split: &SplitPaths, out_dir: &Path) -> CliResult<RankingReport> {
    let model = load_model(checkpoint)?;
    split.check_exist().map_err(invalid)?;
    let data = load_split(&model.languages(), split).map_err(invalid)?;
    check_dims(model.config.d_img, &data, "evaluation").map_err(invalid)?;
    let report = rank_evaluation(&model, &data).map_err(runtime)?;
    write_file(&out_dir.join(REPORT_JSON), &report.to_json()).map_err(runtime)?;
    write_file(&out_dir.join(REPORT_TABLE), &report.to_table()).map_err(runtime)?;
    Ok(report)
}

/// Correlates model similarities with gold ratings and writes the report.
pub fn cmd_sts(
    checkpoint: &Path,
    pairs: &Path,
    language: &str,
    out: &Path,
) -> CliResult<StsReport> {
    let model = load_model(checkpoint)?;
    let lang = model
        .languages()
        .iter()
        .position(|l| l == language)
        .ok_or_else(|| {
            invalid(Error::Config(format!(
                "checkpoint has no language {language:?}"
            )))
        })?;
    let pairs = load_sts_pairs(pairs).map_err(invalid)?;
    let report = sts_evaluate(&model, lang, &pairs).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, &json).map_err(runtime)?;
    Ok(report)
}

/// Writes one split of the synthetic corpus.
pub fn cmd_synth(spec: &SynthSpec, partition: &str, out_dir: &Path) -> CliResult<SynthFiles> {
    let partition: Partition = partition.parse().map_err(invalid)?;
    spec.validate().map_err(invalid)?;
    let files = generate(spec, partition, out_dir).map_err(runtime)?;
    log::info!(
        "wrote {}, {}, {}",
        files.captions.display(),
        files.ids.display(),
        files.features.display()
    );
    Ok(files)
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(&a.config, &a.overrides).map(drop),
        Command::Eval(a) => {
            let split = SplitPaths {
                captions: a.captions,
                ids: a.ids,
                features: a.features,
            };
            let report = cmd_eval(&a.checkpoint, &split, &a.out_dir)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Sts(a) => {
            let report = cmd_sts(&a.checkpoint, &a.pairs, &a.language, &a.out)?;
            println!(
                "pearson r = {:.4} over {} pairs",
                report.pearson_r, report.n_pairs
            );
            Ok(())
        }
        Command::Synth(a) => cmd_synth(&a.spec(), &a.partition, &a.out_dir).map(drop),
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let threads = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return EXIT_INVALID;
        }
        Some(n) => n,
        None => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
