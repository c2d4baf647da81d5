//! Mini-batch training loop.
//!
//! Reproducibility contract: given the same config, dataset, and embedding
//! table, two runs produce bit-identical checkpoints and loss curves, for any
//! `jobs` value. Everything random derives from `config.train.seed` through
//! named substreams (shuffling from the epoch index, dropout from the epoch
//! and the instance's position in the prepared list), batch gradients fold in
//! batch order, and the optimizer walks parameters in name order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graphs::InstanceBundle;
use crate::harness::parallel_map;
use crate::model::{ForwardOptions, Pipeline, PreparedInstance, RelationFilter};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::retrieval::RelationVocab;
use crate::rng::substream;

/// Knobs that affect how training runs but not what it computes.
#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Worker threads for per-instance forward/backward passes.
    pub jobs: usize,
    /// Where per-epoch checkpoints land (`epoch-N.ckpt`); none are written
    /// when unset. The final state is always returned either way.
    pub out_dir: Option<PathBuf>,
    /// Continue from a snapshot instead of initializing fresh. The
    /// checkpoint's config must match the requested one except for
    /// `train.epochs`, which is the total target: epochs the checkpoint has
    /// already completed are not rerun.
    pub resume: Option<Checkpoint>,
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per epoch, in epoch order. On resume only the newly
    /// run epochs appear.
    pub loss_curve: Vec<f64>,
    /// Instances dropped before training: retrieval left no candidates, the
    /// answer matched no retained entity, or validation failed.
    pub skipped: usize,
    /// Optimizer steps taken by this call.
    pub steps: u64,
}

/// The per-instance piece of one gradient step.
struct InstancePass {
    grads: BTreeMap<String, Tensor>,
    loss: f64,
}

/// Builds the relation vocabulary from whatever annotations the dataset has.
/// Empty annotations mean no relation head is trained.
pub fn vocab_from_dataset(dataset: &[InstanceBundle]) -> Option<RelationVocab> {
    let vocab = RelationVocab::from_labels(
        dataset
            .iter()
            .filter_map(|inst| inst.relation_label.as_deref()),
    );
    (!vocab.is_empty()).then_some(vocab)
}

/// Prepares every instance once, keeping only those that can produce a loss.
/// Returns the usable instances and the number dropped.
fn prepare_dataset(
    pipeline: &Pipeline,
    dataset: &[InstanceBundle],
    table: &EmbeddingTable,
) -> Result<(Vec<PreparedInstance>, usize)> {
    let mut used = Vec::with_capacity(dataset.len());
    let mut skipped = 0usize;
    for instance in dataset {
        match pipeline.prepare(instance, table, RelationFilter::Annotated) {
            Ok(prepared) if prepared.labels.is_some() => used.push(prepared),
            Ok(_) => skipped += 1,
            Err(Error::NoCandidates { .. }) | Err(Error::Schema { .. }) => skipped += 1,
            Err(other) => return Err(other),
        }
    }
    Ok((used, skipped))
}

/// Serialized config with the run-length knob zeroed: two configs with the
/// same identity build interchangeable parameter sets.
fn config_identity(config: &Config) -> Result<String> {
    let mut c = config.clone();
    c.train.epochs = 0;
    serde_json::to_string(&c).map_err(|source| Error::Json {
        path: "<config>".into(),
        source,
    })
}

fn save_epoch(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = dir.join(format!("epoch-{}.ckpt", checkpoint.completed_epochs));
    checkpoint.save(&path)
}

/// Runs mini-batch Adam over `dataset` until `config.train.epochs` epochs
/// have completed (counting any the resume checkpoint already holds).
///
/// One batch is one optimizer step; a single instance for a single epoch is
/// exactly one step. The learning rate comes from the warmup/cosine schedule
/// at fractional epoch `global_step / steps_per_epoch`, evaluated before each
/// step.
pub fn train(
    config: &Config,
    dataset: &[InstanceBundle],
    table: &EmbeddingTable,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }

    let seed = config.train.seed;
    let (pipeline, mut params, mut adam, start_epoch) = match &options.resume {
        Some(ckpt) => {
            if config_identity(&ckpt.config)? != config_identity(config)? {
                return Err(Error::Data(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            if ckpt.train_seed != seed {
                return Err(Error::Data(format!(
                    "resume checkpoint has seed {}, config wants {}",
                    ckpt.train_seed, seed
                )));
            }
            let pipeline = Pipeline::new(config.clone(), ckpt.vocab.clone())?;
            let adam = ckpt
                .optimizer
                .clone()
                .unwrap_or_else(|| Adam::new(AdamConfig::default()));
            (pipeline, ckpt.params.clone(), adam, ckpt.completed_epochs)
        }
        None => {
            let pipeline = Pipeline::new(config.clone(), vocab_from_dataset(dataset))?;
            let params = pipeline.build_params(seed)?;
            (pipeline, params, Adam::new(AdamConfig::default()), 0)
        }
    };

    let (used, skipped) = prepare_dataset(&pipeline, dataset, table)?;
    if used.is_empty() {
        return Err(Error::Data(format!(
            "no trainable instances remain ({skipped} skipped)",
        )));
    }

    let batch_size = config.train.batch.max(1);
    let steps_per_epoch = used.len().div_ceil(batch_size) as u64;
    let mut global_step = start_epoch * steps_per_epoch;
    let mut steps_taken = 0u64;
    let mut loss_curve = Vec::new();
    let mut completed = start_epoch;

    for epoch in start_epoch..(config.train.epochs as u64).max(start_epoch) {
        let mut order: Vec<usize> = (0..used.len()).collect();
        order.shuffle(&mut substream(seed, &format!("shuffle/{epoch}")));

        let mut batch_losses = Vec::new();
        for batch in order.chunks(batch_size) {
            let lr = config
                .train
                .schedule
                .lr_at(global_step as f64 / steps_per_epoch as f64)?;

            let passes = parallel_map(batch, options.jobs, |&idx| {
                let prepared = &used[idx];
                let mut rng = substream(seed, &format!("dropout/{epoch}/{idx}"));
                let mut tape = Tape::new();
                let opts = ForwardOptions {
                    training: true,
                    inspect: false,
                };
                let pass = pipeline.forward(&mut tape, &params, prepared, table, &opts, &mut rng)?;
                let loss = pass.loss.ok_or_else(|| {
                    Error::Data(format!("instance `{}` produced no loss", prepared.id))
                })?;
                let grads = tape.backward(loss)?;
                Ok(InstancePass {
                    grads: tape.param_grads(&grads),
                    loss: tape.value(loss).item()?,
                })
            })?;

            // Mean gradient over the batch, folded in batch order so the
            // result does not depend on the worker count.
            let scale = 1.0 / passes.len() as f64;
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for pass in &passes {
                loss_sum += pass.loss;
                for (name, grad) in &pass.grads {
                    match acc.get_mut(name) {
                        Some(total) => {
                            for (t, g) in total.data_mut().iter_mut().zip(grad.data()) {
                                *t += g;
                            }
                        }
                        None => {
                            acc.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
            for tensor in acc.values_mut() {
                for v in tensor.data_mut() {
                    *v *= scale;
                }
            }
            // Parameters no instance in the batch touched (an ablated stream,
            // an always-empty graph) carry zero gradient rather than being an
            // error: the optimizer still advances their moment decay.
            let missing: Vec<(String, Tensor)> = params
                .iter()
                .filter(|(name, _)| !acc.contains_key(*name))
                .map(|(name, tensor)| (name.to_string(), Tensor::zeros(tensor.shape())))
                .collect();
            acc.extend(missing);

            adam.step(&mut params, &acc, lr)?;
            global_step += 1;
            steps_taken += 1;
            batch_losses.push(loss_sum * scale);
        }

        completed = epoch + 1;
        loss_curve.push(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64);

        if let Some(dir) = &options.out_dir {
            let snapshot = Checkpoint {
                config: config.clone(),
                vocab: pipeline.vocab().cloned(),
                params: params.clone(),
                optimizer: Some(adam.clone()),
                completed_epochs: completed,
                train_seed: seed,
            };
            save_epoch(dir, &snapshot)?;
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            vocab: pipeline.vocab().cloned(),
            params,
            optimizer: Some(adam),
            completed_epochs: completed,
            train_seed: seed,
        },
        loss_curve,
        skipped,
        steps: steps_taken,
    })
}
