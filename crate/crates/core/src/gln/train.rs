use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gln, GlnConfig, MultiViewSample};
use crate::error::{GlnError, Result};
use crate::floorplan::LocationId;
use crate::numerics::{Adam, AdamConfig, Mode, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience in epochs on validation loss; 0 disables it.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            patience: 20,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Loss over the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (last epoch without validation).
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut s = format!("epoch 0 train_loss={}\n", self.initial_loss);
        for e in &self.epochs {
            let _ = write!(s, "epoch {} train_loss={}", e.epoch, e.train_loss);
            if let (Some(l), Some(a)) = (e.val_loss, e.val_accuracy) {
                let _ = write!(s, " val_loss={l} val_acc={a}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "best_epoch {}", self.best_epoch);
        s
    }
}

/// Maps head outputs to training-class logits and locations to class indices.
pub(crate) trait Objective {
    fn class_logits(&self, tape: &mut Tape, output: Var) -> Result<Var>;
    fn target(&self, location: LocationId) -> Result<usize>;
}

struct Classification {
    classes: usize,
}

impl Objective for Classification {
    fn class_logits(&self, _tape: &mut Tape, output: Var) -> Result<Var> {
        Ok(output)
    }

    fn target(&self, location: LocationId) -> Result<usize> {
        if location >= self.classes {
            return Err(GlnError::Data(format!(
                "sample location {location} outside 0..{}",
                self.classes
            )));
        }
        Ok(location)
    }
}

/// Trains a GLN classifier over `config.output_dim` locations with softmax loss.
pub fn train_standard(
    train: &[MultiViewSample],
    val: &[MultiViewSample],
    config: &GlnConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(Gln, TrainingLog)> {
    let mut model = Gln::new(config.clone(), seed)?;
    let objective = Classification {
        classes: config.output_dim,
    };
    let log = fit(&mut model, train, val, train_config, seed, &objective)?;
    Ok((model, log))
}

/// Mean loss and accuracy in inference mode.
fn evaluate(
    model: &Gln,
    samples: &[MultiViewSample],
    targets: &[usize],
    batch_size: usize,
    objective: &dyn Objective,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut correct = 0usize;
    for (chunk, tchunk) in samples.chunks(batch_size).zip(targets.chunks(batch_size)) {
        let refs: Vec<&MultiViewSample> = chunk.iter().collect();
        let views = model.stack_views(&refs)?;
        let mut tape = Tape::new();
        let g = model.build(&mut tape, &views, Mode::Eval, &mut rng)?;
        let logits = objective.class_logits(&mut tape, g.output)?;
        let loss = tape.softmax_cross_entropy(logits, tchunk)?;
        total += tape.value(loss)[(0, 0)] * chunk.len() as f64;
        let lv = tape.value(logits);
        for (r, &t) in tchunk.iter().enumerate() {
            let row = lv.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            correct += usize::from(best == t);
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((total / n, correct as f64 / n))
}

/// Minibatch Adam on the objective's cross-entropy; deterministic given `seed`.
pub(crate) fn fit(
    model: &mut Gln,
    train: &[MultiViewSample],
    val: &[MultiViewSample],
    cfg: &TrainConfig,
    seed: u64,
    objective: &dyn Objective,
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(GlnError::Config("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(GlnError::Config("batch size must be positive".into()));
    }
    let train_targets = train
        .iter()
        .map(|s| objective.target(s.location))
        .collect::<Result<Vec<_>>>()?;
    let val_targets = val
        .iter()
        .map(|s| objective.target(s.location))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A1B);
    let mut adam = Adam::new(cfg.adam);
    let (initial_loss, _) = evaluate(model, train, &train_targets, cfg.batch_size, objective)?;
    let mut log = TrainingLog {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Gln)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&MultiViewSample> = idx.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train_targets[i]).collect();
            let views = model.stack_views(&batch)?;
            let mut tape = Tape::new();
            let graph = model.build(&mut tape, &views, Mode::Train, &mut rng)?;
            let logits = objective.class_logits(&mut tape, graph.output)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let lv = tape.value(loss)[(0, 0)];
            if !lv.is_finite() {
                return Err(GlnError::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            epoch_loss += lv * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<_> = graph.params.iter().map(|&v| tape.grad(v)).collect();
            adam.step(&mut model.params.trainable_mut(), &grads)?;
            if !model.params.trainable().iter().all(|m| m.is_finite()) {
                return Err(GlnError::Numeric(format!("non-finite parameters after update at epoch {epoch}")));
            }
            for (layer, stats) in model.params.layers.iter_mut().zip(&graph.batch_stats) {
                layer.bn_running.update(stats);
            }
        }
        let train_loss = epoch_loss / train.len() as f64;

        let mut entry = EpochLog {
            epoch,
            train_loss,
            val_loss: None,
            val_accuracy: None,
        };
        if val.is_empty() {
            log.best_epoch = epoch;
            log.epochs.push(entry);
            continue;
        }
        let (val_loss, val_acc) = evaluate(model, val, &val_targets, cfg.batch_size, objective)?;
        if !val_loss.is_finite() {
            return Err(GlnError::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        entry.val_loss = Some(val_loss);
        entry.val_accuracy = Some(val_acc);
        log.epochs.push(entry);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            log.best_epoch = epoch;
        } else if cfg.patience > 0 && epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(log)
}
