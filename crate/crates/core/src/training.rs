//! Mini-batch Adam training with early stopping on dev macro-F1.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::exec::Mode;
use crate::model::{Instance, Model, ParamStore};

/// Examples whose gradients are held in memory at once during a batch.
const CHUNK: usize = 16;

/// Mean loss of a batch and the matching mean gradient per parameter
/// (`None` for parameters that are not trained or were not touched).
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub losses: Vec<f64>,
    pub grads: Vec<Option<Tensor>>,
}

fn example_gradient(
    model: &Model,
    instance: &Instance,
    trainable: &[bool],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Some(trainable));
    let loss = model.loss_graph(&mut g, &vars, instance)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss)?;
    let out = trainable
        .iter()
        .zip(&vars)
        .map(|(&t, &v)| if t { grads.take(v) } else { None })
        .collect();
    Ok((value, out))
}

/// Mean NLL over the batch and its gradient. Examples are evaluated
/// independently (in parallel under [`Mode::Parallel`]) and their gradients
/// summed in batch order, so both modes give bit-identical results.
pub fn batch_loss(
    model: &Model,
    batch: &[&Instance],
    trainable: &[bool],
    mode: Mode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; trainable.len()];
    let mut losses = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        for result in mode.map(chunk, |inst| example_gradient(model, inst, trainable)) {
            let (loss, example_grads) = result?;
            losses.push(loss);
            for (acc, g) in grads.iter_mut().zip(example_grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grads.iter_mut().flatten() {
        g.scale_in_place(scale);
    }
    let mut sorted = losses.clone();
    sorted.sort_by(f64::total_cmp);
    let loss = sorted.iter().sum::<f64>() * scale;
    Ok(BatchLoss {
        loss,
        losses,
        grads,
    })
}

/// Adam with bias correction; parameters without a gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: i32,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            steps: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if params.params()[i].frozen {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            let value = params.value_mut(i).data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                value[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's score; returns whether it improved on the best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

/// Seeded per-epoch permutation of example indices.
#[derive(Debug, Clone)]
pub struct EpochShuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochShuffler {
    pub fn new(n: usize, seed: u64) -> Self {
        EpochShuffler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
        }
    }

    /// Reshuffles and returns the visiting order of the next epoch.
    pub fn next_epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_macro_f1: f64,
}

/// One optimization run (the whole model, or one attribute for `per_attribute`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub attributes: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub runs: Vec<RunReport>,
    pub train_counts: BTreeMap<String, usize>,
    /// Macro-F1 of the final (best) parameters over the whole dev split.
    pub dev_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Per-epoch training NLL of every run, in order.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.runs
            .iter()
            .flat_map(|r| r.epochs.iter().map(|e| e.train_nll))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub mode: Mode,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

/// Dev macro-F1 over the attributes present in `dev`.
pub fn dev_macro_f1(model: &Model, dev: &[LabeledExample], mode: Mode) -> Result<f64> {
    let (_, report) = evaluation::evaluate(model, dev, mode)?;
    Ok(report.macro_f1())
}

fn run(
    model: &mut Model,
    attributes: Vec<String>,
    trainable: &[bool],
    train: &[Instance],
    dev: &[LabeledExample],
    seed: u64,
    mode: Mode,
) -> Result<RunReport> {
    let config = model.config.clone();
    let mut adam = Adam::new(&config, model.params.len());
    let mut shuffler = EpochShuffler::new(train.len(), seed);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<ParamStore> = None;
    let mut epochs = Vec::new();
    let mut early_stopped = false;

    for epoch in 1..=config.max_epochs {
        let order = shuffler.next_epoch();
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let out = batch_loss(model, &batch, trainable, mode)?;
            let grads_finite = out.grads.iter().flatten().all(Tensor::all_finite);
            if !out.loss.is_finite() || !grads_finite {
                let ids: Vec<&str> = batch.iter().take(5).map(|i| i.id.as_str()).collect();
                return Err(Error::Numerical(format!(
                    "non-finite {} in epoch {epoch}, batch {b} (examples {}{})",
                    if out.loss.is_finite() {
                        "gradient"
                    } else {
                        "loss"
                    },
                    ids.join(", "),
                    if batch.len() > ids.len() { ", ..." } else { "" }
                )));
            }
            adam.step(&mut model.params, &out.grads);
            total += out.losses.iter().sum::<f64>();
        }
        let train_nll = total / train.len() as f64;

        // Evaluate (and keep) the f32 image that a checkpoint would hold.
        let mut snapshot = model.params.rounded_to_f32();
        std::mem::swap(&mut model.params, &mut snapshot);
        let f1 = dev_macro_f1(model, dev, mode);
        std::mem::swap(&mut model.params, &mut snapshot);
        let f1 = f1?;

        log::info!(
            "[{}] epoch {epoch}: train nll {train_nll:.6}, dev macro-F1 {f1:.4}",
            attributes.join(",")
        );
        epochs.push(EpochRecord {
            epoch,
            train_nll,
            dev_macro_f1: f1,
        });
        if stopper.observe(epoch, f1) {
            best = Some(snapshot);
        }
        if stopper.should_stop() {
            early_stopped = true;
            break;
        }
    }

    let best = best.expect("at least one epoch ran");
    for (i, &t) in trainable.iter().enumerate() {
        if t {
            *model.params.value_mut(i) = best.params()[i].value.clone();
        }
    }
    let (best_epoch, best_dev_macro_f1) = stopper.best().expect("at least one epoch ran");
    Ok(RunReport {
        attributes,
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        best_dev_macro_f1,
        early_stopped,
    })
}

/// Trains `model` in place on `train`, selecting parameters by dev macro-F1.
/// Examples of attributes outside the model's attribute set are ignored
/// when the configuration restricts attributes, and rejected otherwise.
pub fn train(
    model: &mut Model,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    options: &TrainOptions,
) -> Result<TrainReport> {
    let keep = |ex: &&LabeledExample| {
        model.config.attributes.is_none() || model.attributes.index_of(&ex.attribute).is_some()
    };
    let train: Vec<LabeledExample> = train.iter().filter(keep).cloned().collect();
    let dev: Vec<LabeledExample> = dev.iter().filter(keep).cloned().collect();
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and dev splits (got {} and {} examples)",
            train.len(),
            dev.len()
        )));
    }
    for ex in dev.iter() {
        model.attribute_index(&ex.attribute)?;
    }

    let mut counts: BTreeMap<String, usize> = model
        .attributes
        .ids()
        .iter()
        .map(|a| (a.clone(), 0))
        .collect();
    for ex in &train {
        if !ex.values().is_empty() {
            *counts.entry(ex.attribute.clone()).or_default() += 1;
        }
    }
    model.train_counts = counts.clone();

    let mode = options.mode;
    let seed = model.config.seed;
    let mut runs = Vec::new();
    if model.variant() == Variant::PerAttribute {
        let ids = model.attributes.ids().to_vec();
        for (r, id) in ids.iter().enumerate() {
            let own: Vec<LabeledExample> = train
                .iter()
                .filter(|e| &e.attribute == id)
                .cloned()
                .collect();
            if own.is_empty() {
                log::warn!(
                    "attribute `{id}` has no training examples; its model stays at initialization"
                );
                continue;
            }
            let own_dev: Vec<LabeledExample> =
                dev.iter().filter(|e| &e.attribute == id).cloned().collect();
            let prefix = format!("{id}/");
            let mask = model.params.trainable_mask(|p| p.name.starts_with(&prefix));
            let instances = model.instances(&own)?;
            runs.push(run(
                model,
                vec![id.clone()],
                &mask,
                &instances,
                &own_dev,
                seed.wrapping_add(r as u64),
                mode,
            )?);
        }
    } else {
        let mask = model.params.trainable_mask(|_| true);
        let instances = model.instances(&train)?;
        let ids = model.attributes.ids().to_vec();
        runs.push(run(model, ids, &mask, &instances, &dev, seed, mode)?);
    }

    let dev_macro_f1 = dev_macro_f1(model, &dev, mode)?;
    if let Some(path) = &options.checkpoint {
        checkpoint::save(model, path)?;
    }
    Ok(TrainReport {
        variant: model.variant(),
        runs,
        train_counts: counts,
        dev_macro_f1,
        checkpoint: options.checkpoint.clone(),
    })
}
