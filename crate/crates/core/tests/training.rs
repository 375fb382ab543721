//! Training loop behaviour on the synthetic corpus.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pivot_embed::checkpoint::load_checkpoint;
use pivot_embed::data::{sample_minibatch, EpochPolicy, PAD};
use pivot_embed::model::{init_params, ModelKind};
use pivot_embed::similarity::SimilarityMode;
use pivot_embed::synth::SynthSpec;
use pivot_embed::train::{
    adam_step, batch_gradients, train, AdamState, TrainLog, TrainOptions, LOG_FILE,
};

use common::{small_config, synth_data};

fn options(dir: &std::path::Path) -> TrainOptions {
    TrainOptions {
        out_dir: dir.to_path_buf(),
        epoch_policy: EpochPolicy::PerImage,
    }
}

#[test]
fn zero_epochs_saves_the_initial_parameters() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Asymmetric, ModelKind::Pivot, spec.d_img, 0);
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(
        &config,
        &data.train,
        &data.val,
        &data.vocabs,
        &options(dir.path()),
    )
    .unwrap();
    assert!(outcome.log.epochs.is_empty());
    assert_eq!(outcome.best_epoch, None);

    let sizes: Vec<usize> = data.vocabs.iter().map(|v| v.len()).collect();
    let initial =
        init_params(&config, &sizes, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
    assert_eq!(
        load_checkpoint(&outcome.best_checkpoint).unwrap().params,
        initial
    );

    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(TrainLog::from_jsonl(&text).unwrap().epochs.is_empty());
}

#[test]
fn fixed_seed_runs_have_identical_losses() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = small_config(
        SimilarityMode::Symmetric,
        ModelKind::Parallel,
        spec.d_img,
        3,
    );
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &config,
            &data.train,
            &data.val,
            &data.vocabs,
            &options(dir.path()),
        )
        .unwrap();
        let losses: Vec<u64> = out
            .log
            .epochs
            .iter()
            .map(|e| e.mean_loss.to_bits())
            .collect();
        (losses, std::fs::read(&out.best_checkpoint).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.len(), 3);
    assert_eq!(a, b);
}

#[test]
fn loss_on_a_fixed_batch_decreases() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    for mode in [SimilarityMode::Symmetric, SimilarityMode::Asymmetric] {
        let config = small_config(mode, ModelKind::Pivot, spec.d_img, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sizes: Vec<usize> = data.vocabs.iter().map(|v| v.len()).collect();
        let mut params = init_params(&config, &sizes, &mut rng).unwrap();
        let batch =
            sample_minibatch(&data.train, &data.vocabs, config.batch_size, &mut rng).unwrap();
        let mut adam = AdamState::new(config.learning_rate);
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (loss, grads) = batch_gradients(&config, &params, &batch).unwrap();
            losses.push(loss);
            adam_step(&mut params, &grads, &mut adam, config.grad_clip).unwrap();
        }
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "{mode:?}: {losses:?}"
        );
    }
}

#[test]
fn returned_model_is_the_best_epoch() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Asymmetric, ModelKind::Pivot, spec.d_img, 6);
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &config,
        &data.train,
        &data.val,
        &data.vocabs,
        &options(dir.path()),
    )
    .unwrap();
    let best = out
        .log
        .epochs
        .iter()
        .map(|e| e.val_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_metric, best);
    let first_best = out
        .log
        .epochs
        .iter()
        .find(|e| e.val_metric == best)
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, Some(first_best));

    let model = load_checkpoint(&out.best_checkpoint).unwrap();
    let report = pivot_embed::eval::rank_evaluation(&model, &data.val).unwrap();
    assert_eq!(pivot_embed::eval::early_stop_metric(&report), best);
    assert_eq!(Some(report), out.best_report);
}

#[test]
fn patience_stops_training_early() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = pivot_embed::model::EmbedConfig {
        learning_rate: 1e-12,
        patience: 2,
        ..small_config(SimilarityMode::Symmetric, ModelKind::Pivot, spec.d_img, 10)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &config,
        &data.train,
        &data.val,
        &data.vocabs,
        &options(dir.path()),
    )
    .unwrap();
    // Steps this small vanish below f32 resolution, so the frozen model improves once (epoch 1) and then waits out its patience.
    assert_eq!(out.log.epochs.len(), 3);
    assert_eq!(out.best_epoch, Some(1));
}

#[test]
fn too_few_images_for_a_batch_is_an_error() {
    let spec = SynthSpec {
        n_images: 4,
        ..SynthSpec::default()
    };
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Symmetric, ModelKind::Pivot, spec.d_img, 1);
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &config,
        &data.train,
        &data.val,
        &data.vocabs,
        &options(dir.path()),
    )
    .unwrap_err();
    assert!(err.to_string().contains("fewer than one batch"), "{err}");
}

#[test]
fn padding_rows_stay_zero() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Asymmetric, ModelKind::Pivot, spec.d_img, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &config,
        &data.train,
        &data.val,
        &data.vocabs,
        &options(dir.path()),
    )
    .unwrap();
    let model = load_checkpoint(&out.best_checkpoint).unwrap();
    for (name, tensor) in model.params.named() {
        if pivot_embed::model::ModelParams::is_embedding(&name) {
            let width = tensor.cols();
            let pad = &tensor.data()[PAD as usize * width..(PAD as usize + 1) * width];
            assert!(pad.iter().all(|&v| v == 0.0), "{name}: {pad:?}");
        }
    }
}

#[test]
fn per_caption_epochs_see_more_batches() {
    let spec = SynthSpec::default();
    let data = synth_data(&spec);
    let config = small_config(SimilarityMode::Symmetric, ModelKind::Pivot, spec.d_img, 1);
    let count = |policy| {
        pivot_embed::data::epoch_batches(
            &data.train,
            &data.vocabs,
            config.batch_size,
            policy,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
        .len()
    };
    assert_eq!(
        count(EpochPolicy::PerImage),
        spec.n_images / config.batch_size
    );
    assert!(count(EpochPolicy::PerCaption) > count(EpochPolicy::PerImage));
}
