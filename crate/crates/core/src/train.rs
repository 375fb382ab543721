//! Adam with global-norm clipping, the epoch loop, and validation-based
//! early stopping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, NodeId, Tape};
use crate::checkpoint::save_checkpoint;
use crate::data::{epoch_batches, Batch, EpochPolicy, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{early_stop_metric, rank_evaluation, RankingReport};
use crate::loss::{parallel_loss_node, pivot_loss_node};
use crate::model::{
    encode_images_node, encode_sentences_node, init_params, EmbedConfig, Model, ModelKind,
    ModelParams, ParamNodes,
};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

pub const CHECKPOINT_FILE: &str = "best.mmck";
pub const LOG_FILE: &str = "train_log.jsonl";

/// First and second moment estimates per named parameter, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update over `(name, parameter, gradient)` triples. Gradients are
    /// first rescaled so their global L2 norm is at most `grad_clip`.
    pub fn update(
        &mut self,
        entries: Vec<(&str, &mut [f32], &[f32])>,
        grad_clip: f64,
    ) -> Result<()> {
        let mut sq = 0.0f64;
        for (name, p, g) in &entries {
            if p.len() != g.len() {
                return Err(Error::Train(format!(
                    "gradient for {name} has {} values, parameter {}",
                    g.len(),
                    p.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!("non-finite gradient for {name}")));
            }
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > grad_clip {
            grad_clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - BETA1.powi(t);
        let correct2 = 1.0 - BETA2.powi(t);
        for (name, p, g) in entries {
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let gi = g[i] as f64 * scale;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] = (p[i] as f64 - self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON)) as f32;
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every model parameter and re-zeroes PAD rows.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    grad_clip: f64,
) -> Result<()> {
    let mut entries = Vec::new();
    let named = params.named_mut();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    for ((name, t), key) in named.into_iter().zip(&names) {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Train(format!("missing gradient for {name}")))?;
        entries.push((key.as_str(), t.data_mut(), g.data()));
    }
    state.update(entries, grad_clip)?;
    params.zero_pad_rows();
    Ok(())
}

/// A loss graph for one batch, with every parameter as a tape input.
pub struct LossGraph {
    pub tape: Tape,
    pub params: ParamNodes,
    pub features: NodeId,
    pub loss: NodeId,
}

pub fn build_loss_graph(
    config: &EmbedConfig,
    params: &ModelParams,
    batch: &Batch,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::declare(&mut tape, params)?;
    let features = tape.input(batch.image_rows.shape())?;
    let mode = config.similarity_mode;
    let img = encode_images_node(&mut tape, nodes.w_img, features, mode)?;
    let caps: Vec<NodeId> = batch
        .caption_ids
        .iter()
        .enumerate()
        .map(|(k, ids)| encode_sentences_node(&mut tape, &nodes.languages[k], ids, mode))
        .collect::<Result<_>>()?;
    let loss = match config.model_kind {
        ModelKind::Pivot => pivot_loss_node(&mut tape, img, &caps, mode, config.margin)?,
        ModelKind::Parallel => parallel_loss_node(&mut tape, img, &caps, mode, config.margin)?,
    };
    Ok(LossGraph {
        tape,
        params: nodes,
        features,
        loss,
    })
}

/// Loss value and per-parameter gradients of one batch, in `f32`.
pub fn batch_gradients(
    config: &EmbedConfig,
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f32, BTreeMap<String, Tensor<f32>>)> {
    let graph = build_loss_graph(config, params, batch)?;
    let mut bindings = Bindings::new();
    graph.params.bind(params, &mut bindings);
    bindings.bind(graph.features, &batch.image_rows);
    let eval = graph.tape.forward(&bindings)?;
    let loss = eval.value(graph.loss).item();
    let mut grads = graph.tape.backward(&eval, graph.loss)?;
    let mut out = BTreeMap::new();
    for (name, id) in &graph.params.order {
        out.insert(
            name.clone(),
            grads.take(*id).expect("every input has a gradient"),
        );
    }
    Ok((loss, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_metric: f64,
    pub wall_time_s: f64,
    pub improved: bool,
}

/// Run configuration followed by one record per finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: EmbedConfig,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    config: EmbedConfig,
}

impl TrainLog {
    /// JSON lines: a `{"config": ...}` header, then one object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&LogHeader {
            config: self.config.clone(),
        })
        .expect("serializes");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Train("empty log".into()))?,
        )
        .map_err(|e| Error::Train(format!("log header: {e}")))?;
        let epochs = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Train(format!("log record: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: header.config,
            epochs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: PathBuf,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(best_checkpoint: PathBuf, patience: usize) -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            best_epoch: None,
            best_checkpoint,
            epochs_since_improvement: 0,
            patience,
        }
    }

    /// Records an epoch's metric; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub epoch_policy: EpochPolicy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    pub best_report: Option<RankingReport>,
    pub log: TrainLog,
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Trains from scratch and returns the checkpoint with the best validation
/// metric (never simply the last one).
pub fn train(
    config: &EmbedConfig,
    train_split: &Split,
    val_split: &Split,
    vocabs: &[Vocabulary],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if vocabs.len() != train_split.languages().len() {
        return Err(Error::Train(format!(
            "{} vocabularies for {} languages",
            vocabs.len(),
            train_split.languages().len()
        )));
    }
    if config.model_kind == ModelKind::Parallel && vocabs.len() != 2 {
        return Err(Error::Train(
            "the parallel model needs exactly two languages".into(),
        ));
    }
    for split in [train_split, val_split] {
        if split.features().dim() != config.d_img {
            return Err(Error::Train(format!(
                "features have dim {}, config says d_img = {}",
                split.features().dim(),
                config.d_img
            )));
        }
    }
    let eligible = train_split.eligible_images().len();
    if eligible < config.batch_size {
        return Err(Error::Train(format!(
            "training split has {eligible} usable images, fewer than one batch of {}",
            config.batch_size
        )));
    }
    fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(&options.out_dir, e))?;
    let ckpt_path = options.out_dir.join(CHECKPOINT_FILE);
    let log_path = options.out_dir.join(LOG_FILE);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sizes: Vec<usize> = vocabs.iter().map(Vocabulary::len).collect();
    let params = init_params(config, &sizes, &mut rng)?;
    let mut model = Model {
        config: config.clone(),
        params,
        vocabs: vocabs.to_vec(),
    };
    let mut adam = AdamState::new(config.learning_rate);
    let mut stop = EarlyStopState::new(ckpt_path.clone(), config.patience);
    let mut log = TrainLog {
        config: config.clone(),
        epochs: Vec::new(),
    };
    let mut best_report = None;

    if config.max_epochs == 0 {
        save_checkpoint(&model, &ckpt_path)?;
    }
    write_log(&log_path, &log)?;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let batches = epoch_batches(
            train_split,
            vocabs,
            config.batch_size,
            options.epoch_policy,
            &mut rng,
        )?;
        let mut total = 0.0f64;
        for batch in &batches {
            let (loss, grads) = batch_gradients(config, &model.params, batch)?;
            adam_step(&mut model.params, &grads, &mut adam, config.grad_clip)?;
            total += loss as f64;
        }
        let mean_loss = total / batches.len().max(1) as f64;
        let report = rank_evaluation(&model, val_split)?;
        let metric = early_stop_metric(&report);
        let improved = stop.observe(epoch, metric);
        if improved {
            save_checkpoint(&model, &ckpt_path)?;
            best_report = Some(report);
        }
        let record = EpochRecord {
            epoch,
            mean_loss,
            val_metric: metric,
            wall_time_s: started.elapsed().as_secs_f64(),
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4} val {metric:.1}{}",
            if improved { " (best)" } else { "" }
        );
        log.epochs.push(record);
        write_log(&log_path, &log)?;
        if stop.should_stop() {
            log::info!("no improvement for {} epochs, stopping", stop.patience);
            break;
        }
    }

    Ok(TrainOutcome {
        best_checkpoint: ckpt_path,
        best_epoch: stop.best_epoch,
        best_metric: stop.best_metric,
        best_report,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut state = AdamState::new(0.001);
        let mut p = vec![0.5f32, -0.25];
        state.update(vec![("p", &mut p, &[0.0, 0.0])], 2.0).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(0.001);
        let mut p = vec![0.0f32];
        state.update(vec![("p", &mut p, &[1.0])], 10.0).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        // global norm of (6, 8) is 10; clip 2 scales by 0.2 -> (1.2, 1.6)
        let mut state = AdamState::new(0.001);
        let mut p = vec![0.0f32, 0.0];
        state.update(vec![("p", &mut p, &[6.0, 8.0])], 2.0).unwrap();
        let (m, v) = state.moments("p").unwrap();
        assert!((m[0] - 0.1 * 1.2).abs() < 1e-12 && (m[1] - 0.1 * 1.6).abs() < 1e-12);
        assert!((v[0] - 0.001 * 1.44).abs() < 1e-12 && (v[1] - 0.001 * 2.56).abs() < 1e-12);
    }

    #[test]
    fn clipped_updates_ignore_gradient_scale() {
        let g: Vec<f32> = vec![3.0, -4.0, 12.0];
        let g10: Vec<f32> = g.iter().map(|v| v * 10.0).collect();
        let (mut s1, mut s2) = (AdamState::new(0.01), AdamState::new(0.01));
        let (mut p1, mut p2) = (vec![0.1f32, 0.2, 0.3], vec![0.1f32, 0.2, 0.3]);
        for _ in 0..3 {
            s1.update(vec![("p", &mut p1, &g)], 2.0).unwrap();
            s2.update(vec![("p", &mut p2, &g10)], 2.0).unwrap();
        }
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut state = AdamState::new(0.001);
        let mut p = vec![1.0f32];
        let err = state
            .update(vec![("lang0.w_z", &mut p, &[f32::NAN])], 2.0)
            .unwrap_err();
        assert!(err.to_string().contains("lang0.w_z"));
        assert_eq!(p, vec![1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn early_stop_counts_stale_epochs() {
        let mut s = EarlyStopState::new(PathBuf::from("x"), 2);
        assert!(s.observe(1, 10.0));
        assert!(!s.observe(2, 10.0));
        assert!(!s.should_stop());
        assert!(!s.observe(3, 5.0));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch, Some(1));
    }
}
